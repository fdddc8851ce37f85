"""Command-line entry point: one executable, subcommand per pipeline stage.

Every subcommand writes its outputs under a user-given directory and
echoes the fully resolved configuration (plus the seeds used) there, so
the tuple (config, seeds) on disk reproduces every byte of output.
Errors exit nonzero with a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import csv
import sys
from pathlib import Path

import click
import numpy as np

from pointfold import config as cfgmod
from pointfold import metrics, sampler, schedule as schedmod, synthdata, training
from pointfold.geometry import PointCloud, Pose, load_ply, normalize, save_ply, subsample


def _fail(exc: BaseException) -> "NoReturn":  # noqa: F821
    click.echo(f"error: {exc}", err=True)
    sys.exit(1)


def _load_cfg(config_path, sets):
    return cfgmod.load_config(config_path, list(sets))


_config_opt = click.option("--config", "config_path", type=click.Path(exists=True),
                           default=None, help="YAML config file.")
_set_opt = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                        help="Override a config value by dotted path.")
_workers_opt = click.option("--workers", type=int, default=None,
                            help="Parallelism bound; 1 (default) is the "
                                 "bitwise-reference single-threaded mode.")


@click.group()
def main():
    """Pose-conditioned point-cloud diffusion pipeline."""


def _apply_workers(cfg, workers):
    if workers is not None:
        if workers < 1:
            raise ValueError("workers must be >= 1")
        cfg["workers"] = workers
    return cfg


@main.command("gen-data")
@_config_opt
@_set_opt
@_workers_opt
@click.option("--out", "out_dir", required=True, type=click.Path())
def gen_data(config_path, sets, workers, out_dir):
    """Generate the synthetic articulated-figure dataset."""
    try:
        cfg = _apply_workers(_load_cfg(config_path, sets), workers)
        d = cfg["data"]
        spec = cfgmod.figure_spec(cfg)
        synthdata.gen_dataset(spec, d["n_frames"], d["seed"],
                              d["split_ratio"], out_dir)
        cfgmod.write_resolved(cfg, out_dir)
    except Exception as e:
        _fail(e)
    click.echo(f"wrote {d['n_frames']} frames under {out_dir}")


@main.command()
@_config_opt
@_set_opt
@_workers_opt
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--resume", "resume_path", type=click.Path(exists=True),
              default=None, help="Checkpoint to continue from.")
def train(config_path, sets, workers, manifest_path, out_dir, resume_path):
    """Train the noise-prediction model on a generated dataset."""
    try:
        cfg = _apply_workers(_load_cfg(config_path, sets), workers)
        manifest = synthdata.load_manifest(manifest_path)
        tc = cfgmod.train_config(cfg)
        resume = training.load_checkpoint(resume_path) if resume_path else None
        if resume is not None and resume.config != tc:
            raise ValueError("resume checkpoint config differs from requested config")
        cfgmod.write_resolved(cfg, out_dir)
        ckpt = training.train(manifest, tc, out_dir, resume=resume,
                              log_every=cfg["train"]["log_every"])
    except Exception as e:
        _fail(e)
    click.echo(f"trained to step {ckpt.step}; final checkpoint in {out_dir}")


def _normalized_pose(pose_path, scale):
    """Center a world-space pose file and scale it into the unit ball.

    Returns (pose, world_scale, world_offset) such that model-space
    output maps back to cm via p*scale + offset.
    """
    kp = synthdata.load_pose_file(pose_path)
    center = kp.mean(axis=0)
    centered = kp - center
    if scale is None:
        scale = float(np.linalg.norm(centered, axis=1).max())
        if scale == 0:
            raise ValueError(f"{pose_path}: degenerate pose with zero extent")
    return Pose(centered / scale), scale, center


@main.command()
@_config_opt
@_set_opt
@_workers_opt
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--pose", "pose_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="First sample seed.")
@click.option("--n-points", type=int, default=None)
@click.option("--n-seeds", type=int, default=1, show_default=True)
@click.option("--scale", type=float, default=None,
              help="cm per model unit; default fits the pose to the unit ball.")
@click.option("--trace-every", type=int, default=None,
              help="Also write every k-th intermediate state as PLY.")
def sample(config_path, sets, workers, ckpt_path, pose_path, out_dir, seed,
           n_points, n_seeds, scale, trace_every):
    """Draw point clouds for a pose from a trained checkpoint."""
    try:
        cfg = _apply_workers(_load_cfg(config_path, sets), workers)
        if seed is not None:
            cfg["sample"]["seed"] = seed
        if n_points is not None:
            cfg["sample"]["n_points"] = n_points
        cfg["sample"]["n_seeds"] = n_seeds
        if trace_every is not None:
            cfg["sample"]["trace_every"] = trace_every
        ckpt = training.load_checkpoint(ckpt_path)
        sched = ckpt.config.schedule.build()
        pose, wscale, woffset = _normalized_pose(pose_path, scale)
        out_dir = Path(out_dir)
        cfgmod.write_resolved(cfg, out_dir)
        base = cfg["sample"]["seed"]
        for s in range(base, base + n_seeds):
            req = sampler.SampleRequest(pose, cfg["sample"]["n_points"], s,
                                        trace_every=cfg["sample"]["trace_every"])
            trace_dir = out_dir / f"trace_{s:05d}" if trace_every else None
            cloud = sampler.sample(ckpt.params, sched, req, trace_dir=trace_dir)
            cloud = PointCloud(cloud.points, wscale, woffset)
            save_ply(cloud, out_dir / f"sample_{s:05d}.ply")
    except Exception as e:
        _fail(e)
    click.echo(f"wrote {n_seeds} sample(s) under {out_dir}")


@main.command()
@_config_opt
@_set_opt
@_workers_opt
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--partial", "partial_path", required=True, type=click.Path(exists=True))
@click.option("--pose", "pose_path", required=True, type=click.Path(exists=True))
@click.option("-k", "--k", "k", required=True, type=int,
              help="Number of points to generate.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def complete(config_path, sets, workers, ckpt_path, partial_path, pose_path,
             k, seed, out_dir):
    """Extend a partial cloud with k generated points for a pose."""
    try:
        cfg = _apply_workers(_load_cfg(config_path, sets), workers)
        cfg["sample"]["seed"] = seed
        ckpt = training.load_checkpoint(ckpt_path)
        sched = ckpt.config.schedule.build()
        partial = load_ply(partial_path)
        pose = Pose(synthdata.load_pose_file(pose_path))
        partial_n, pose_n = normalize(partial, pose)
        out = sampler.complete(ckpt.params, sched, partial_n, pose_n, k, seed)
        out_dir = Path(out_dir)
        cfgmod.write_resolved(cfg, out_dir)
        save_ply(out, out_dir / "completed.ply")
    except Exception as e:
        _fail(e)
    click.echo(f"wrote completed cloud ({out.n} points) under {out_dir}")


@main.command("edit-pose")
@_config_opt
@_set_opt
@_workers_opt
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--source", "source_path", required=True, type=click.Path(exists=True))
@click.option("--target-pose", "pose_path", required=True, type=click.Path(exists=True))
@click.option("--t-edit", type=int, default=None,
              help="Noising depth; default from config (100).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def edit_pose(config_path, sets, workers, ckpt_path, source_path, pose_path,
              t_edit, seed, out_dir):
    """Re-pose a source cloud by partial noising + pose-conditioned denoising."""
    try:
        cfg = _apply_workers(_load_cfg(config_path, sets), workers)
        if t_edit is not None:
            cfg["sample"]["t_edit"] = t_edit
        cfg["sample"]["seed"] = seed
        ckpt = training.load_checkpoint(ckpt_path)
        sched = ckpt.config.schedule.build()
        source = load_ply(source_path)
        pose = Pose(synthdata.load_pose_file(pose_path))
        source_n, pose_n = normalize(source, pose)
        out = sampler.pose_edit(ckpt.params, sched, source_n, pose_n,
                                t_edit=cfg["sample"]["t_edit"], seed=seed)
        out_dir = Path(out_dir)
        cfgmod.write_resolved(cfg, out_dir)
        save_ply(out, out_dir / "edited.ply")
    except Exception as e:
        _fail(e)
    click.echo(f"wrote edited cloud under {out_dir}")


def _write_metric_rows(out_path, rows):
    """rows: (label, cham, m2s, s2m); appends aggregate mean/stddev."""
    arr = np.array([[r[1], r[2], r[3]] for r in rows], dtype=np.float64)
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "chamfer_cm", "m2s_cm", "s2m_cm"])
        for r in rows:
            w.writerow([r[0], repr(r[1]), repr(r[2]), repr(r[3])])
        w.writerow(["mean", *[repr(float(v)) for v in arr.mean(axis=0)]])
        w.writerow(["stddev", *[repr(float(v)) for v in arr.std(axis=0)]])
    return arr.mean(axis=0)


def _eval_dirs(pred_dir, target_dir):
    preds = sorted(Path(pred_dir).glob("*.ply"))
    if not preds:
        raise ValueError(f"no PLY files in {pred_dir}")
    rows = []
    for p in preds:
        t = Path(target_dir) / p.name
        if not t.exists():
            raise ValueError(f"no matching target for {p.name} in {target_dir}")
        a, b = load_ply(p), load_ply(t)
        m2s = metrics.directional_distance(a, b)
        s2m = metrics.directional_distance(b, a)
        rows.append((p.name, 0.5 * (m2s + s2m), m2s, s2m))
    return rows


def _eval_checkpoint(ckpt_path, manifest_path, split, n_seeds, seed, limit):
    """Per-frame metrics, each averaged over n_seeds independent draws."""
    ckpt = training.load_checkpoint(ckpt_path)
    sched = ckpt.config.schedule.build()
    tc = ckpt.config
    manifest = synthdata.load_manifest(manifest_path)
    records = manifest.split(split)
    if not records:
        raise ValueError(f"manifest has no {split!r} frames")
    if limit:
        records = records[:limit]
    rows = []
    for rec in records:
        cloud = load_ply(rec.cloud_path)
        pose = Pose(synthdata.load_pose_file(rec.pose_path))
        sub_seed = (seed * 1000003 + int(rec.frame_id)) & 0x7FFFFFFF
        cloud = subsample(cloud, tc.n_points, seed=sub_seed)
        gt, pose_n = normalize(cloud, pose)
        seeds = [seed + 1000 * int(rec.frame_id) + s for s in range(n_seeds)]
        draws = sampler.sample_batch(ckpt.params, sched, pose_n, tc.n_points, seeds)
        vals = []
        for d in draws:
            d = PointCloud(d.points, gt.world_scale, gt.world_offset)
            m2s = metrics.directional_distance(d, gt)
            s2m = metrics.directional_distance(gt, d)
            vals.append((0.5 * (m2s + s2m), m2s, s2m))
        mean = np.mean(vals, axis=0)
        rows.append((f"frame_{rec.frame_id:05d}", *map(float, mean)))
    return rows


@main.command("eval")
@_config_opt
@_set_opt
@_workers_opt
@click.option("--pred-dir", type=click.Path(exists=True), default=None)
@click.option("--target-dir", type=click.Path(exists=True), default=None)
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True), default=None)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), default=None)
@click.option("--split", default="test", show_default=True)
@click.option("--n-seeds", type=int, default=None,
              help="Draws per pose to average over (default from config, 10).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--limit", type=int, default=None, help="Evaluate only the first N frames.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def eval_cmd(config_path, sets, workers, pred_dir, target_dir, ckpt_path,
             manifest_path, split, n_seeds, seed, limit, out_dir):
    """Chamfer/M2S/S2M metrics: directory-vs-directory, or checkpoint
    samples against held-out ground truth (mean over several seeds)."""
    try:
        cfg = _apply_workers(_load_cfg(config_path, sets), workers)
        if n_seeds is None:
            n_seeds = cfg["sample"]["n_seeds"]
        cfg["sample"]["n_seeds"] = n_seeds
        cfg["sample"]["seed"] = seed
        if pred_dir and target_dir:
            rows = _eval_dirs(pred_dir, target_dir)
        elif ckpt_path and manifest_path:
            rows = _eval_checkpoint(ckpt_path, manifest_path, split,
                                    n_seeds, seed, limit)
        else:
            raise ValueError("need either --pred-dir/--target-dir or "
                             "--checkpoint/--manifest")
        out_dir = Path(out_dir)
        cfgmod.write_resolved(cfg, out_dir)
        mean = _write_metric_rows(out_dir / "metrics.csv", rows)
    except Exception as e:
        _fail(e)
    click.echo(f"chamfer {mean[0]:.6g} cm  m2s {mean[1]:.6g} cm  "
               f"s2m {mean[2]:.6g} cm  ({len(rows)} frames)")


@main.command()
@click.option("--kind", default="quartic_scaled", show_default=True)
@click.option("--T", "horizon", type=int, default=1000, show_default=True)
@click.option("--beta-max", type=float, default=None)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="CSV destination; stdout when omitted.")
def schedule(kind, horizon, beta_max, out_path):
    """Emit a noise schedule as CSV: t, beta, alpha_bar, snr."""
    try:
        sched = schedmod.make_schedule(kind, horizon, beta_max)
    except Exception as e:
        _fail(e)
    dest = open(out_path, "w", newline="") if out_path else sys.stdout
    try:
        w = csv.writer(dest)
        w.writerow(["t", "beta", "alpha_bar", "snr"])
        for t in range(1, sched.T + 1):
            w.writerow([t, repr(sched.beta(t)), repr(sched.alpha_bar(t)),
                        repr(schedmod.snr(sched, t))])
    finally:
        if out_path:
            dest.close()


if __name__ == "__main__":
    main()
