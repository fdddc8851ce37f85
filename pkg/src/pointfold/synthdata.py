"""Procedural articulated-figure generator.

Produces (pose, cloud) pairs of a simple capsule-limbed figure wearing a
cone skirt whose folds are driven by latent mode coefficients that are
independent of the pose: the same pose rendered with different seeds
yields the same body but visibly different skirt deformations.  This is
the stochastic structure a pose-conditioned generative model must
capture, with a clean separation between the deterministic (body) and
multimodal (skirt) parts.

Surface points are placed on a golden-ratio lattice with a small seeded
jitter, so sampling noise stays well below the fold amplitude.
Everything is deterministic given (params, seed); regenerating a dataset
with the same seed reproduces every file byte for byte.

All generated coordinates are in centimetres (identity world transform).
The figure stands on z=0 with the pelvis at z=100; +y is "front".
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from pointfold.geometry import PointCloud, Pose, save_ply
from pointfold.metrics import Region

GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0

# joint order of the generated 16-keypoint skeleton
JOINT_NAMES = (
    "pelvis", "spine", "chest", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)

# angle ranges (radians); chosen so arms and shins never enter the
# skirt's bounding region
ANGLE_RANGES = {
    "lean_x": (-0.15, 0.15),
    "lean_y": (-0.15, 0.15),
    "elev_l": (-0.15, 0.45),
    "elev_r": (-0.15, 0.45),
    "swing_l": (-0.6, 0.6),
    "swing_r": (-0.6, 0.6),
    "elbow_l": (0.0, 0.8),
    "elbow_r": (0.0, 0.8),
    "hip_l": (-0.2, 0.2),
    "hip_r": (-0.2, 0.2),
    "knee_l": (0.0, 0.4),
    "knee_r": (0.0, 0.4),
}


@dataclass(frozen=True)
class SkirtSpec:
    top_z: float = 98.0
    hem_z: float = 68.0
    top_radius: float = 12.0
    hem_radius: float = 45.0
    sway_amplitude: float = 10.0   # cm of hem drift per radian of torso lean
    n_modes: int = 3
    mode_amplitude: float = 0.35   # bound on each fold coefficient
    budget_fraction: float = 0.5   # share of points on the skirt


@dataclass(frozen=True)
class FigureSpec:
    n_points: int = 512
    skirt: SkirtSpec = field(default_factory=SkirtSpec)
    jitter: float = 0.2            # cm of per-point surface jitter

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if not 0.0 < self.skirt.budget_fraction < 1.0:
            raise ValueError("skirt budget fraction must lie in (0, 1)")
        if self.skirt.n_modes < 1 or self.skirt.mode_amplitude <= 0:
            raise ValueError("skirt needs >= 1 mode with positive amplitude")

    @property
    def j(self) -> int:
        return len(JOINT_NAMES)


# regions used for density/diversity analysis, in cm (see module docstring
# for the figure layout); emitted into the dataset manifest
SKIRT_REGION = Region("box", min=(-95.0, -95.0, 66.0), max=(95.0, 95.0, 99.0))
BODY_REGION = Region("box", min=(-95.0, -95.0, 100.0), max=(95.0, 95.0, 175.0))


@dataclass(frozen=True)
class FrameParams:
    """Joint angles plus (optionally) the latent skirt fold coefficients.

    When mode_coeffs is None, make_frame draws them from its seed; they
    are deliberately independent of the angles.
    """

    angles: dict[str, float]
    mode_coeffs: tuple[float, ...] | None = None

    def __post_init__(self):
        for name, (lo, hi) in ANGLE_RANGES.items():
            v = self.angles.get(name, 0.0)
            if not lo - 1e-12 <= v <= hi + 1e-12:
                raise ValueError(f"angle {name}={v} outside [{lo}, {hi}]")
        unknown = set(self.angles) - set(ANGLE_RANGES)
        if unknown:
            raise ValueError(f"unknown angles: {sorted(unknown)}")


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _arm_dirs(side, elev, swing, bend):
    """Upper-arm and forearm directions in the torso frame; side is +1
    for the left (+x) arm."""
    base = _rot_z(side * swing) @ _rot_y(-side * elev) @ np.array([side, 0.0, 0.0])
    front = np.array([0.0, 1.0, 0.0])
    perp = front - (front @ base) * base
    perp /= np.linalg.norm(perp)
    fore = np.cos(bend) * base + np.sin(bend) * perp
    return base, fore


def skeleton(params: FrameParams) -> np.ndarray:
    """Forward kinematics: world positions of the 16 joints, (16, 3) cm."""
    a = {name: params.angles.get(name, 0.0) for name in ANGLE_RANGES}
    pelvis = np.array([0.0, 0.0, 100.0])
    rt = _rot_y(a["lean_y"]) @ _rot_x(a["lean_x"])
    joints = {
        "pelvis": pelvis,
        "spine": pelvis + rt @ [0, 0, 15],
        "chest": pelvis + rt @ [0, 0, 30],
        "head": pelvis + rt @ [0, 0, 55],
    }
    for side, tag in ((1.0, "l"), (-1.0, "r")):
        shoulder = pelvis + rt @ [side * 18, 0, 30]
        up, fore = _arm_dirs(side, a[f"elev_{tag}"], a[f"swing_{tag}"],
                             a[f"elbow_{tag}"])
        elbow = shoulder + 28.0 * (rt @ up)
        wrist = elbow + 25.0 * (rt @ fore)
        joints[f"{tag}_shoulder"] = shoulder
        joints[f"{tag}_elbow"] = elbow
        joints[f"{tag}_wrist"] = wrist

        hip = np.array([side * 10, 0.0, 95.0])
        hs, kb = a[f"hip_{tag}"], a[f"knee_{tag}"]
        knee = hip + 40.0 * np.array([0.0, np.sin(hs), -np.cos(hs)])
        ankle = knee + 35.0 * np.array([0.0, np.sin(hs - kb), -np.cos(hs - kb)])
        joints[f"{tag}_hip"] = hip
        joints[f"{tag}_knee"] = knee
        joints[f"{tag}_ankle"] = ankle
    return np.stack([joints[name] for name in JOINT_NAMES])


def _lattice(k: int, offset: float = 0.0):
    """k quasi-uniform (u, v) pairs in [0,1)^2 (golden-ratio sequence)."""
    i = np.arange(k, dtype=np.float64)
    u = (i + 0.5) / k
    v = np.mod(i / GOLDEN + offset, 1.0)
    return u, v


def _capsule_points(a, b, radius, k, rng, jitter, offset):
    """k points on the side surface of the capsule from a to b."""
    axis = b - a
    length = np.linalg.norm(axis)
    axis = axis / length
    # orthonormal frame around the axis
    ref = np.array([1.0, 0.0, 0.0])
    if abs(axis @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    u, v = _lattice(k, offset)
    theta = 2.0 * np.pi * v
    ring = np.outer(np.cos(theta), e1) + np.outer(np.sin(theta), e2)
    pts = a + np.outer(u * length, axis) + radius * ring
    return pts + rng.normal(0.0, jitter, pts.shape)


def _skirt_points(spec: FigureSpec, angles, modes, k, rng):
    sk = spec.skirt
    u, v = _lattice(k, offset=0.37)
    s = u                     # 0 at waist, 1 at hem
    theta = 2.0 * np.pi * v
    radius = sk.top_radius + (sk.hem_radius - sk.top_radius) * s
    fold = np.zeros_like(theta)
    for i, m in enumerate(modes):
        fold += m * np.sin((i + 1) * theta)
    radius = radius * (1.0 + s * fold)   # folds grow toward the hem
    sway = sk.sway_amplitude * np.array([angles.get("lean_y", 0.0),
                                         -angles.get("lean_x", 0.0)])
    z = sk.top_z + (sk.hem_z - sk.top_z) * s
    pts = np.stack([
        radius * np.cos(theta) + sway[0] * s,
        radius * np.sin(theta) + sway[1] * s,
        z,
    ], axis=1)
    return pts + rng.normal(0.0, spec.jitter, pts.shape)


def make_frame(spec: FigureSpec, params: FrameParams, seed: int
               ) -> tuple[Pose, PointCloud]:
    """Render one frame: FK for the pose, lattice-sampled surface points
    for the cloud.  Deterministic per (params, seed); the fold
    coefficients come from the seed when params does not pin them."""
    joints = skeleton(params)
    pose = Pose(joints)
    rng = np.random.default_rng([seed, 0xF1C])
    sk = spec.skirt
    if params.mode_coeffs is not None:
        modes = np.asarray(params.mode_coeffs, dtype=np.float64)
        if len(modes) != sk.n_modes:
            raise ValueError(f"expected {sk.n_modes} mode coefficients")
        if np.abs(modes).max() > sk.mode_amplitude + 1e-12:
            raise ValueError("mode coefficient outside amplitude bound")
    else:
        modes = rng.uniform(-sk.mode_amplitude, sk.mode_amplitude, sk.n_modes)

    j = {name: joints[i] for i, name in enumerate(JOINT_NAMES)}
    up4 = (j["chest"] - j["pelvis"]) / 30.0 * 4.0
    segments = [
        (j["pelvis"] + up4, j["chest"], 11.0),   # torso, cut above the skirt
        (j["chest"], j["head"], 8.0),
        (j["l_shoulder"], j["l_elbow"], 4.5),
        (j["l_elbow"], j["l_wrist"], 4.0),
        (j["r_shoulder"], j["r_elbow"], 4.5),
        (j["r_elbow"], j["r_wrist"], 4.0),
        (j["l_knee"], j["l_ankle"], 5.0),
        (j["r_knee"], j["r_ankle"], 5.0),
    ]
    n_skirt = int(round(spec.n_points * sk.budget_fraction))
    n_body = spec.n_points - n_skirt

    # largest-remainder allocation of body points by lateral area
    areas = np.array([2 * np.pi * r * np.linalg.norm(b - a) for a, b, r in segments])
    quota = n_body * areas / areas.sum()
    counts = np.floor(quota).astype(int)
    frac_order = np.argsort(-(quota - counts))
    for i in range(n_body - counts.sum()):
        counts[frac_order[i]] += 1

    chunks = []
    for (a, b, r), k, off in zip(segments, counts,
                                 np.linspace(0.0, 0.9, len(segments))):
        if k > 0:
            chunks.append(_capsule_points(a, b, r, k, rng, spec.jitter, off))
    chunks.append(_skirt_points(spec, params.angles, modes, n_skirt, rng))
    return pose, PointCloud(np.concatenate(chunks))


def random_frame_params(spec: FigureSpec, u: float,
                        rng: np.random.Generator) -> FrameParams:
    """Draw joint angles; the right-arm swing is a monotone function of
    u, so disjoint u ranges give disjoint pose-parameter ranges (the
    basis of the train/test split)."""
    angles = {}
    for name, (lo, hi) in ANGLE_RANGES.items():
        if name == "swing_r":
            angles[name] = lo + (hi - lo) * float(u)
        else:
            angles[name] = float(rng.uniform(lo, hi))
    return FrameParams(angles)


# --- dataset generation and manifest ---------------------------------------


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    split: str
    pose_path: Path
    cloud_path: Path


@dataclass
class DatasetManifest:
    root: Path
    meta: dict
    records: list[FrameRecord]

    @property
    def skirt_region(self) -> Region:
        return Region.from_dict(self.meta["skirt_region"])

    @property
    def body_region(self) -> Region:
        return Region.from_dict(self.meta["body_region"])

    def split(self, name: str) -> list[FrameRecord]:
        return [r for r in self.records if r.split == name]


def save_pose_file(keypoints: np.ndarray, path) -> None:
    with open(path, "w") as f:
        for row in np.asarray(keypoints):
            f.write("%.9g %.9g %.9g\n" % tuple(row))


def load_pose_file(path) -> np.ndarray:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            tok = line.split()
            if not tok:
                continue
            if len(tok) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 coordinates")
            rows.append([float(v) for v in tok])
    return np.array(rows)


def gen_dataset(spec: FigureSpec, n_frames: int, seed: int,
                split_ratio: float, out_dir) -> DatasetManifest:
    """Write PLY/pose files plus a manifest under out_dir.

    Train and test frames use disjoint ranges of the primary pose
    parameter, not a random split.  Regeneration with the same arguments
    is byte-identical.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if not 0.0 < split_ratio < 1.0:
        raise ValueError("split_ratio must lie in (0, 1)")
    out_dir = Path(out_dir)
    (out_dir / "poses").mkdir(parents=True, exist_ok=True)
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)
    n_train = int(round(n_frames * split_ratio))

    records = []
    for i in range(n_frames):
        rng = np.random.default_rng([seed, 0xDA7A, i])
        if i < n_train:
            split, u = "train", rng.uniform(0.0, split_ratio)
        else:
            split, u = "test", rng.uniform(split_ratio, 1.0)
        params = random_frame_params(spec, u, rng)
        pose, cloud = make_frame(spec, params, seed=int(rng.integers(2 ** 31)))
        pose_path = out_dir / "poses" / f"pose_{i:05d}.txt"
        cloud_path = out_dir / "clouds" / f"frame_{i:05d}.ply"
        save_pose_file(pose.keypoints, pose_path)
        save_ply(cloud, cloud_path)
        records.append(FrameRecord(i, split, pose_path, cloud_path))

    meta = {
        "type": "meta",
        "generator": "pointfold.synthdata",
        "seed": seed,
        "n_frames": n_frames,
        "split_ratio": split_ratio,
        "spec": asdict(spec),
        "skirt_region": SKIRT_REGION.to_dict(),
        "body_region": BODY_REGION.to_dict(),
    }
    with open(out_dir / "manifest.jsonl", "w") as f:
        f.write(json.dumps(meta, sort_keys=True) + "\n")
        for r in records:
            f.write(json.dumps({
                "type": "frame",
                "id": r.frame_id,
                "split": r.split,
                "pose": str(r.pose_path.relative_to(out_dir)),
                "cloud": str(r.cloud_path.relative_to(out_dir)),
            }, sort_keys=True) + "\n")
    return DatasetManifest(out_dir, meta, records)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    records = []
    meta = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: bad manifest record: {e}")
            if doc.get("type") == "meta":
                meta = doc
            elif doc.get("type") == "frame":
                records.append(FrameRecord(int(doc["id"]), doc["split"],
                                           root / doc["pose"], root / doc["cloud"]))
            else:
                raise ValueError(f"{path}:{lineno}: unknown record type")
    if meta is None:
        raise ValueError(f"{path}: manifest has no meta record")
    return DatasetManifest(root, meta, records)
