"""Geometric evaluation: nearest-neighbor index, directional distances,
Chamfer, region densities and sample diversity.

Distances are reported in centimetres via the clouds' recorded world
transforms; both clouds of a comparison must carry the same transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from pointfold.geometry import PointCloud


class NNIndex:
    """Exact Euclidean nearest-neighbor queries over a 3D point set,
    backed by a k-d tree."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValueError("index needs a nonempty (N, 3) point array")
        self._tree = cKDTree(pts)

    def query(self, points: np.ndarray) -> np.ndarray:
        """Distance from each query point to its nearest indexed point."""
        d, _ = self._tree.query(np.asarray(points, dtype=np.float64), k=1)
        return np.atleast_1d(d)


def _check_compatible(a: PointCloud, b: PointCloud):
    if not np.isclose(a.world_scale, b.world_scale, rtol=1e-9):
        raise ValueError(
            f"incompatible world scales: {a.world_scale} vs {b.world_scale}")
    if not np.allclose(a.world_offset, b.world_offset, atol=1e-6):
        raise ValueError("incompatible world offsets")


def directional_distance(a: PointCloud, b: PointCloud) -> float:
    """Mean distance (cm) from each point of a to its nearest point of b."""
    _check_compatible(a, b)
    d = NNIndex(b.points).query(a.points)
    return float(d.mean() * a.world_scale)


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Symmetric Chamfer distance (cm): the average of the two directional
    means, with unsquared Euclidean distances."""
    return 0.5 * (directional_distance(a, b) + directional_distance(b, a))


def diversity(clouds: list[PointCloud]) -> float:
    """Mean pairwise Chamfer distance over all unordered pairs."""
    if len(clouds) < 2:
        raise ValueError("diversity needs at least 2 clouds")
    vals = [chamfer(clouds[i], clouds[j])
            for i in range(len(clouds)) for j in range(i + 1, len(clouds))]
    return float(np.mean(vals))


@dataclass(frozen=True)
class Region:
    """Axis-aligned box or half-space, in world (cm) coordinates.

    box:       min/max corners.
    halfspace: points p with normal . p <= offset.
    """

    kind: str
    min: tuple | None = None
    max: tuple | None = None
    normal: tuple | None = None
    offset: float | None = None

    def __post_init__(self):
        if self.kind == "box":
            if self.min is None or self.max is None:
                raise ValueError("box region needs min and max corners")
        elif self.kind == "halfspace":
            if self.normal is None or self.offset is None:
                raise ValueError("halfspace region needs normal and offset")
        else:
            raise ValueError(f"unknown region kind {self.kind!r}")

    def contains(self, world_points: np.ndarray) -> np.ndarray:
        p = np.asarray(world_points, dtype=np.float64)
        if self.kind == "box":
            lo = np.asarray(self.min, dtype=np.float64)
            hi = np.asarray(self.max, dtype=np.float64)
            return ((p >= lo) & (p <= hi)).all(axis=-1)
        n = np.asarray(self.normal, dtype=np.float64)
        return p @ n <= self.offset

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "box":
            d["min"] = list(self.min)
            d["max"] = list(self.max)
        else:
            d["normal"] = list(self.normal)
            d["offset"] = self.offset
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Region":
        if d["kind"] == "box":
            return cls("box", min=tuple(d["min"]), max=tuple(d["max"]))
        return cls("halfspace", normal=tuple(d["normal"]), offset=d["offset"])


def region_fraction(cloud: PointCloud, region: Region) -> float:
    """Fraction of the cloud's points lying inside the region."""
    return float(region.contains(cloud.to_world()).mean())


def clip_to_region(cloud: PointCloud, region: Region) -> PointCloud:
    """Sub-cloud of the points inside the region (same world transform)."""
    mask = region.contains(cloud.to_world())
    if not mask.any():
        raise ValueError("no points inside region")
    return PointCloud(cloud.points[mask], cloud.world_scale, cloud.world_offset)
