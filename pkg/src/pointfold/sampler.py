"""Ancestral sampling plus the completion and pose-editing applications.

All operations work in the normalized unit-ball space the model was
trained in.  Generated clouds inherit whatever world transform the
caller attaches afterwards (evaluation pairs them with the ground-truth
frame's transform; the CLI records the pose normalization it applied).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pointfold.denoiser import DenoiserParams, forward, forward_batch
from pointfold.geometry import PointCloud, Pose, save_ply
from pointfold.schedule import Schedule, q_sample


@dataclass(frozen=True)
class SampleRequest:
    pose: Pose
    n_points: int
    seed: int
    trace_every: int | None = None

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if self.trace_every is not None and self.trace_every < 1:
            raise ValueError("trace_every must be >= 1")


def _rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x5A11, stream])


def _reverse_step(x, eps_hat, t, sched, z):
    """One DDPM reverse update with sigma_t = sqrt(beta_t)."""
    beta = sched.beta(t)
    ab = sched.alpha_bar(t)
    x = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
    if z is not None:
        x = x + np.sqrt(beta) * z
    return x


def _check_finite(x, t):
    if not np.isfinite(x).all():
        raise RuntimeError(f"non-finite sample state at step {t}")


def sample(params: DenoiserParams, sched: Schedule, req: SampleRequest,
           trace_dir=None) -> PointCloud:
    """Draw a point cloud for the requested pose by denoising Gaussian
    noise over the full horizon.  Deterministic per req.seed.  If
    trace_dir is given, every trace_every-th intermediate state is
    written there as a numbered PLY."""
    rng = _rng_for(req.seed, 0)
    x = rng.standard_normal((req.n_points, 3))
    if trace_dir is not None:
        Path(trace_dir).mkdir(parents=True, exist_ok=True)

    def maybe_trace(t):
        if (trace_dir is not None and req.trace_every
                and t % req.trace_every == 0):
            save_ply(PointCloud(x), Path(trace_dir) / f"state_{t:05d}.ply")

    maybe_trace(sched.T)
    for t in range(sched.T, 0, -1):
        eps_hat = forward(params, PointCloud(x), t, req.pose)
        z = rng.standard_normal((req.n_points, 3)) if t > 1 else None
        x = _reverse_step(x, eps_hat, t, sched, z)
        _check_finite(x, t)
        maybe_trace(t - 1)
    return PointCloud(x)


def sample_batch(params: DenoiserParams, sched: Schedule, pose: Pose,
                 n_points: int, seeds: list[int]) -> list[PointCloud]:
    """Draw one cloud per seed for a shared pose in a single batched
    reverse pass.  Element i is bitwise equal to
    sample(..., SampleRequest(pose, n_points, seeds[i]))."""
    rngs = [_rng_for(s, 0) for s in seeds]
    x = np.stack([r.standard_normal((n_points, 3)) for r in rngs])
    for t in range(sched.T, 0, -1):
        eps_hat = forward_batch(params, x, t, pose)
        z = (np.stack([r.standard_normal((n_points, 3)) for r in rngs])
             if t > 1 else None)
        x = _reverse_step(x, eps_hat, t, sched, z)
        _check_finite(x, t)
    return [PointCloud(x[i]) for i in range(len(seeds))]


def complete(params: DenoiserParams, sched: Schedule, partial: PointCloud,
             pose: Pose, k: int, seed: int) -> PointCloud:
    """Denoise k fresh Gaussian points over the full horizon with the
    partial cloud's points frozen as clean context tokens.  The partial
    points appear verbatim in the output (first), followed by the k
    generated points."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return partial
    rng = _rng_for(seed, 1)
    x = rng.standard_normal((k, 3))
    ctx = partial.points
    for t in range(sched.T, 0, -1):
        eps_hat = forward(params, PointCloud(x), t, pose, context=ctx)
        z = rng.standard_normal((k, 3)) if t > 1 else None
        x = _reverse_step(x, eps_hat, t, sched, z)
        _check_finite(x, t)
    return PointCloud(np.concatenate([partial.points, x]),
                      partial.world_scale, partial.world_offset)


def pose_edit(params: DenoiserParams, sched: Schedule, source: PointCloud,
              target_pose: Pose, t_edit: int = 100, seed: int = 0) -> PointCloud:
    """Partially noise the source cloud to step t_edit, then denoise it
    conditioned on the target pose."""
    if not 1 <= t_edit <= sched.T:
        raise ValueError(f"t_edit {t_edit} outside [1, {sched.T}]")
    rng = _rng_for(seed, 2)
    noised = q_sample(source, t_edit, rng.standard_normal(source.points.shape), sched)
    x = noised.points
    for t in range(t_edit, 0, -1):
        eps_hat = forward(params, PointCloud(x), t, target_pose)
        z = rng.standard_normal(x.shape) if t > 1 else None
        x = _reverse_step(x, eps_hat, t, sched, z)
        _check_finite(x, t)
    return PointCloud(x, source.world_scale, source.world_offset)
