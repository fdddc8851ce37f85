"""Noise-prediction training: loss, Adam updates, the loop, checkpoints.

All randomness is counter-based: every step derives its own generator
from (seed, step), so an interrupted run resumed from a checkpoint
continues bitwise identically to an uninterrupted one.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from pointfold import autodiff as ad
from pointfold.denoiser import (DenoiserConfig, DenoiserParams, _taped_forward,
                                init_params)
from pointfold.geometry import PointCloud, Pose
from pointfold.schedule import Schedule, ScheduleSpec

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CKPT_MAGIC = b"PTFOLD\x00\x01"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    learning_rate: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    n_points: int = 512
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    checkpoint_every: int = 1000
    completion_ratio: float = 0.0  # fraction of items trained as completion

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1 or self.n_points < 1:
            raise ValueError("counts must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.completion_ratio <= 1.0:
            raise ValueError("completion_ratio must lie in [0, 1]")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: DenoiserParams) -> "AdamState":
        return cls({k: np.zeros_like(t) for k, t in params.tensors.items()},
                   {k: np.zeros_like(t) for k, t in params.tensors.items()}, 0)


def adam_update(tensors: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One Adam step over a name -> array dict; mutates state, returns the
    updated tensors.  Iteration order is the fixed dict order."""
    state.step += 1
    s = state.step
    out = {}
    for name, p in tensors.items():
        g = grads[name]
        state.m[name] = ADAM_BETA1 * state.m[name] + (1 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1 - ADAM_BETA2) * g * g
        mhat = state.m[name] / (1 - ADAM_BETA1 ** s)
        vhat = state.v[name] / (1 - ADAM_BETA2 ** s)
        out[name] = p - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return out


def _item_loss(params, cloud, pose, sched, rng, completion_ratio):
    """Loss and gradients for one (cloud, pose) pair; draws t, eps, and
    optionally a completion split from rng."""
    n = cloud.n
    t = int(rng.integers(1, sched.T + 1))
    as_completion = completion_ratio > 0 and rng.random() < completion_ratio
    if as_completion and n >= 4:
        frac = rng.uniform(0.1, 0.6)
        k = max(1, int(round(frac * n)))
        idx = rng.permutation(n)
        noisy_idx, ctx_idx = idx[:k], idx[k:]
        target = cloud.points[noisy_idx]
        context = cloud.points[ctx_idx]
        eps = rng.standard_normal((k, 3))
        ab = sched.alpha_bar(t)
        noisy = PointCloud(np.sqrt(ab) * target + np.sqrt(1 - ab) * eps,
                           cloud.world_scale, cloud.world_offset)
        out, pv, order = _taped_forward(params, noisy, t, pose, context)
    else:
        eps = rng.standard_normal((n, 3))
        ab = sched.alpha_bar(t)
        noisy = PointCloud(np.sqrt(ab) * cloud.points + np.sqrt(1 - ab) * eps,
                           cloud.world_scale, cloud.world_offset)
        out, pv, order = _taped_forward(params, noisy, t, pose, None)
    loss_var = ad.mean_square_error(out, eps[order])
    ad.backward(loss_var)
    grads = {name: (v.grad if v.grad is not None else np.zeros_like(v.data))
             for name, v in pv.items()}
    return float(loss_var.data), grads


def loss(params: DenoiserParams, batch: list[tuple[PointCloud, Pose]],
         sched: Schedule, rng: np.random.Generator,
         completion_ratio: float = 0.0) -> tuple[float, dict[str, np.ndarray]]:
    """Mean noise-prediction error over a batch plus parameter gradients.

    Per item a step t is drawn uniformly from [1, T] and eps from N(0, I);
    the loss is the squared error between eps and the prediction, averaged
    over points, coordinates and the batch.
    """
    if not batch:
        raise ValueError("empty batch")
    total = 0.0
    acc: dict[str, np.ndarray] | None = None
    for cloud, pose in batch:
        item_loss, grads = _item_loss(params, cloud, pose, sched, rng,
                                      completion_ratio)
        total += item_loss
        if acc is None:
            acc = grads
        else:
            for k in acc:
                acc[k] += grads[k]
    b = len(batch)
    for k in acc:
        acc[k] /= b
    return total / b, acc


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x5EED, step])


def _batch_indices(n_items: int, cfg: TrainConfig, step: int) -> np.ndarray:
    """Epoch-shuffled batch for a given 1-based step, reconstructible from
    the step index alone."""
    bpe = -(-n_items // cfg.batch_size)  # batches per epoch
    epoch, pos = divmod(step - 1, bpe)
    perm = np.random.default_rng([cfg.seed, 0xE40C, epoch]).permutation(n_items)
    return perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]


def train_step(params: DenoiserParams, opt_state: AdamState,
               batch: list[tuple[PointCloud, Pose]],
               cfg: TrainConfig, sched: Schedule | None = None,
               ) -> tuple[DenoiserParams, AdamState, float]:
    """One optimization step; randomness is keyed by (cfg.seed, the step
    counter in opt_state), so the update is a pure function of its inputs."""
    if sched is None:
        sched = cfg.schedule.build()
    rng = _step_rng(cfg.seed, opt_state.step + 1)
    loss_val, grads = loss(params, batch, sched, rng, cfg.completion_ratio)
    if not np.isfinite(loss_val):
        raise RuntimeError(f"non-finite loss at step {opt_state.step + 1}")
    new_tensors = adam_update(params.tensors, grads, opt_state, cfg.learning_rate)
    return (DenoiserParams(params.config, params.seed, new_tensors),
            opt_state, loss_val)


@dataclass
class Checkpoint:
    config: TrainConfig
    params: DenoiserParams
    opt_state: AdamState
    step: int

    def save(self, path) -> None:
        save_checkpoint(self, path)


def _config_blob(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.config
    doc = {
        "format_version": CKPT_VERSION,
        "denoiser": asdict(cfg.denoiser),
        "schedule": cfg.schedule.to_dict(),
        "train": {
            "total_steps": cfg.total_steps,
            "learning_rate": cfg.learning_rate,
            "batch_size": cfg.batch_size,
            "seed": cfg.seed,
            "n_points": cfg.n_points,
            "checkpoint_every": cfg.checkpoint_every,
            "completion_ratio": cfg.completion_ratio,
        },
        "step": ckpt.step,
        "init_seed": ckpt.params.seed,
        "adam_step": ckpt.opt_state.step,
        "rng": {"seed": cfg.seed, "step": ckpt.step},  # streams are counter-based
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary little-endian: magic, u32 version, length-prefixed config
    JSON (key-sorted), then a tensor table of (name, rank, dims, f64
    payload) entries in a fixed order."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    blob = _config_blob(ckpt)
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    entries = []
    for name in sorted(ckpt.params.tensors):
        entries.append((f"param/{name}", ckpt.params.tensors[name]))
    for name in sorted(ckpt.opt_state.m):
        entries.append((f"adam_m/{name}", ckpt.opt_state.m[name]))
    for name in sorted(ckpt.opt_state.v):
        entries.append((f"adam_v/{name}", ckpt.opt_state.v[name]))
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    off = 0

    def take(n):
        nonlocal off
        chunk = raw[off:off + n]
        if len(chunk) != n:
            raise ValueError(f"truncated checkpoint {path}")
        off += n
        return chunk

    if take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack("<Q", take(8))
    doc = json.loads(take(blob_len))
    (n_entries,) = struct.unpack("<I", take(4))
    tables: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
        table, key = name.split("/", 1)
        tables[table][key] = arr

    den_cfg = DenoiserConfig(**doc["denoiser"])
    cfg = TrainConfig(schedule=ScheduleSpec.from_dict(doc["schedule"]),
                      denoiser=den_cfg, **doc["train"])
    params = DenoiserParams(den_cfg, doc["init_seed"], tables["param"])
    opt = AdamState(tables["adam_m"], tables["adam_v"], doc["adam_step"])
    return Checkpoint(cfg, params, opt, doc["step"])


def load_training_set(manifest, cfg: TrainConfig) -> list[tuple[PointCloud, Pose]]:
    """Load, subsample and normalize the train-split frames of a manifest
    (see pointfold.synthdata for the manifest format)."""
    from pointfold.geometry import load_ply, normalize, subsample
    from pointfold.synthdata import load_pose_file

    items = []
    for rec in manifest.records:
        if rec.split != "train":
            continue
        try:
            cloud = load_ply(rec.cloud_path)
            pose = Pose(load_pose_file(rec.pose_path))
        except OSError as e:
            raise RuntimeError(f"failed to read frame {rec.frame_id}: {e}") from e
        if cloud.n < cfg.n_points:
            raise ValueError(
                f"{rec.cloud_path}: cloud has {cloud.n} points, need {cfg.n_points}")
        sub_seed = (cfg.seed * 1000003 + int(rec.frame_id)) & 0x7FFFFFFF
        cloud = subsample(cloud, cfg.n_points, seed=sub_seed)
        cloud, pose = normalize(cloud, pose)
        items.append((cloud, pose))
    if not items:
        raise ValueError("manifest contains no train-split frames")
    return items


def train(manifest, cfg: TrainConfig, out_dir,
          resume: Checkpoint | None = None,
          log_every: int = 1) -> Checkpoint:
    """Run the training loop; writes loss.csv and periodic checkpoints
    under out_dir and returns the final checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = load_training_set(manifest, cfg)
    sched = cfg.schedule.build()

    if resume is not None:
        params = resume.params
        opt = resume.opt_state
        start = resume.step
    else:
        params = init_params(cfg.denoiser, seed=cfg.seed)
        opt = AdamState.fresh(params)
        start = 0

    log_path = out_dir / "loss.csv"
    mode = "a" if (resume is not None and log_path.exists()) else "w"
    with open(log_path, mode, newline="") as logf:
        writer = csv.writer(logf)
        if mode == "w":
            writer.writerow(["step", "loss"])
        for step in range(start + 1, cfg.total_steps + 1):
            idx = _batch_indices(len(items), cfg, step)
            batch = [items[i] for i in idx]
            params, opt, loss_val = train_step(params, opt, batch, cfg, sched)
            if step % log_every == 0:
                writer.writerow([step, repr(loss_val)])
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                Checkpoint(cfg, params, opt, step).save(
                    out_dir / f"ckpt_{step:07d}.bin")
    final = Checkpoint(cfg, params, opt, cfg.total_steps)
    final.save(out_dir / "ckpt_final.bin")
    return final
