"""Point-cloud and pose containers, normalization, subsampling, PLY I/O.

Coordinates are stored as float64 arrays.  A cloud carries the transform
back to world units: ``p_cm = p * world_scale + world_offset``.  Freshly
loaded or generated data in centimetres has ``world_scale=1`` and zero
offset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class PlyError(ValueError):
    """Malformed PLY content; message carries the offending line number."""


def _as_points(a, name):
    pts = np.asarray(a, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one point")
    if not np.isfinite(pts).all():
        raise ValueError(f"{name} contains non-finite coordinates")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """Unordered 3D point set plus the recorded world transform.

    world_scale is in cm per model unit and must be positive;
    world_offset is in cm.
    """

    points: np.ndarray
    world_scale: float = 1.0
    world_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        pts = _as_points(self.points, "points")
        if not (self.world_scale > 0):
            raise ValueError(f"world_scale must be positive, got {self.world_scale}")
        off = np.asarray(self.world_offset, dtype=np.float64)
        if off.shape != (3,) or not np.isfinite(off).all():
            raise ValueError("world_offset must be a finite coordinate triple")
        pts.setflags(write=False)
        off.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "world_scale", float(self.world_scale))
        object.__setattr__(self, "world_offset", off)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def to_world(self) -> np.ndarray:
        """Points mapped back to centimetres."""
        return self.points * self.world_scale + self.world_offset


@dataclass(frozen=True)
class Pose:
    """Skeletal keypoints, in the same frame as the paired cloud."""

    keypoints: np.ndarray

    def __post_init__(self):
        kps = _as_points(self.keypoints, "keypoints")
        if kps.shape[0] < 2:
            raise ValueError("a pose needs at least 2 keypoints")
        kps.setflags(write=False)
        object.__setattr__(self, "keypoints", kps)

    @property
    def j(self) -> int:
        return self.keypoints.shape[0]


def normalize(cloud: PointCloud, pose: Pose) -> tuple[PointCloud, Pose]:
    """Recenter a paired cloud and pose on the pose centroid and scale the
    cloud into the unit ball.

    The inverse map is recorded in the returned cloud's world transform,
    so ``denormalize(normalize(c, p)[0])`` reproduces the input
    coordinates.  The pose is transformed identically but carries no
    transform of its own (it shares the cloud's).

    Raises ValueError("zero extent") for a multi-point cloud whose points
    are all identical.  A single point coincident with the pose centroid
    keeps scale 1.
    """
    center = pose.keypoints.mean(axis=0)
    pts = cloud.points - center
    radius = float(np.linalg.norm(pts, axis=1).max())
    if radius == 0.0:
        if cloud.n > 1:
            raise ValueError("zero extent: all points identical")
        radius = 1.0  # lone point at the centroid: identity scale
    new_cloud = PointCloud(
        pts / radius,
        world_scale=cloud.world_scale * radius,
        world_offset=cloud.world_offset + cloud.world_scale * center,
    )
    new_pose = Pose((pose.keypoints - center) / radius)
    return new_cloud, new_pose


def denormalize(cloud: PointCloud) -> PointCloud:
    """Apply the recorded world transform; result is in cm with an
    identity transform."""
    return PointCloud(cloud.to_world(), world_scale=1.0, world_offset=np.zeros(3))


def subsample(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Draw n points uniformly without replacement, deterministically per seed."""
    if n < 1:
        raise ValueError(f"subsample size must be >= 1, got {n}")
    if n > cloud.n:
        raise ValueError(f"cannot subsample {n} points from a cloud of {cloud.n}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(cloud.n, size=n, replace=False)
    return PointCloud(cloud.points[idx], cloud.world_scale, cloud.world_offset)


# --- ASCII PLY (vertex-only) ------------------------------------------------
#
# The world transform rides along in "comment worldscale"/"comment
# worldoffset" header lines so normalized clouds round-trip.  Coordinates
# are written with 9 significant digits.


def save_ply(cloud: PointCloud, path) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment worldscale {cloud.world_scale!r}",
        "comment worldoffset {!r} {!r} {!r}".format(*map(float, cloud.world_offset)),
        f"element vertex {cloud.n}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    for p in cloud.points:
        lines.append("%.9g %.9g %.9g" % (p[0], p[1], p[2]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_ply(path) -> PointCloud:
    with open(path) as f:
        lines = f.read().splitlines()

    def err(lineno, msg):
        raise PlyError(f"{path}:{lineno}: {msg}")

    if not lines or lines[0].strip() != "ply":
        err(1, "missing 'ply' magic line")
    n_vertex = None
    world_scale = 1.0
    world_offset = np.zeros(3)
    props = []
    body_start = None
    for i, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "end_header":
            body_start = i
            break
        if tok[0] == "format":
            if tok[1:2] != ["ascii"]:
                err(i, f"unsupported format {' '.join(tok[1:])!r}")
        elif tok[0] == "comment":
            if tok[1:2] == ["worldscale"]:
                world_scale = float(tok[2])
            elif tok[1:2] == ["worldoffset"]:
                world_offset = np.array([float(v) for v in tok[2:5]])
        elif tok[0] == "element":
            if tok[1] != "vertex":
                err(i, f"unsupported element {tok[1]!r} (vertex-only reader)")
            try:
                n_vertex = int(tok[2])
            except (IndexError, ValueError):
                err(i, "bad vertex count")
        elif tok[0] == "property":
            if len(tok) != 3 or tok[1] not in ("float", "float32", "double", "float64"):
                err(i, f"non-float vertex property: {line.strip()!r}")
            props.append(tok[2])
    else:
        err(len(lines), "missing end_header")
    if n_vertex is None:
        err(body_start, "missing 'element vertex' declaration")
    if props != ["x", "y", "z"]:
        err(body_start, f"expected properties x, y, z, got {props}")

    body = [ln for ln in lines[body_start:] if ln.strip()]
    if len(body) != n_vertex:
        err(body_start, f"vertex count {n_vertex} does not match {len(body)} body rows")
    pts = np.empty((n_vertex, 3))
    for row, line in enumerate(body):
        tok = line.split()
        if len(tok) != 3:
            err(body_start + 1 + row, f"expected 3 coordinates, got {len(tok)}")
        try:
            pts[row] = [float(v) for v in tok]
        except ValueError:
            err(body_start + 1 + row, f"non-numeric coordinate in {line.strip()!r}")
    return PointCloud(pts, world_scale=world_scale, world_offset=world_offset)
