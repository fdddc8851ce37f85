"""End-to-end acceptance suite: twelve criteria, one test each.

Criteria 6, 9 and 10 compare against thresholds fixed by a committed
pilot run of the identical seeded experiments (see PILOT_* constants);
the experiments in ``experiments.py`` are deterministic, so the suite
reproduces the pilot numbers bit for bit.

Run order matters only for wall time; the long tests (6, 7) train real
models and dominate the runtime (~1 h on one CPU core).
"""

import math
import subprocess
import sys

import numpy as np
import pytest
from scipy import stats

import experiments as ex
from pointfold import metrics as mt
from pointfold import training as tr
from pointfold.denoiser import DenoiserConfig, backward, forward, init_params
from pointfold.geometry import PointCloud, Pose
from pointfold.schedule import make_schedule

# thresholds fixed by the pre-registered pilot run (committed before this
# suite was finalized); pilot observations noted inline
PILOT_C6_CHAMFER_CM = 10.5      # pilot mean 8.402, max 8.955 over 8 frames
PILOT_C9_COMPLETION_CM = 16.5   # pilot mean 13.744 over 4 frames; the
                                # 32-vs-32 disjoint-subset floor of the
                                # same ground-truth cloud is already 13.1
PILOT_C10_IDENTITY_CM = 8.5     # pilot mean 6.720, max 7.138 over 5 frames


CRITERION_LINES = []


def _report(criterion, ok, detail):
    status = "PASS" if ok else "FAIL"
    line = f"[criterion {criterion:2d}] {status}: {detail}"
    print(line)
    CRITERION_LINES.append(line)
    assert ok, f"criterion {criterion}: {detail}"


# --- shared trained models (session scope, built once) ----------------------


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    manifest = ex.gen_overfit_dataset(root / "data")
    ckpt = tr.train(manifest, ex.overfit_train_config(), root / "run")
    rows = (root / "run" / "loss.csv").read_text().strip().splitlines()[1:]
    losses = [float(r.split(",")[1]) for r in rows]
    return manifest, ckpt, losses


@pytest.fixture(scope="session")
def completion_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("completion")
    manifest = ex.gen_overfit_dataset(root / "data")
    cfg = ex.overfit_train_config(completion_ratio=0.5)
    return manifest, tr.train(manifest, cfg, root / "run")


@pytest.fixture(scope="session")
def generalization_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    manifest = ex.gen_toy_dataset(root / "data")
    cfg = ex.generalization_train_config()
    return manifest, tr.train(manifest, cfg, root / "run")


# --- criteria ---------------------------------------------------------------


def test_criterion_01_schedule_correctness():
    paper = make_schedule("quartic_paper", 1000)
    exact = 1.0
    for t in range(1, 1001):
        exact *= 1.0 - t ** 4 / 10000.0 ** 4
    ok = paper.beta(1000) == 1e-4 and abs(paper.alpha_bar(1000) - exact) < 1e-6
    scaled = make_schedule("quartic_scaled", 1000)
    # terminal noising within 5% of the target, measured in the exponent
    expo = -math.log(scaled.alpha_bar(1000))
    ok = ok and abs(expo - 10.0) / 10.0 < 0.05
    _report(1, ok, f"beta_1000={paper.beta(1000)!r}, "
                   f"alpha_bar_1000={paper.alpha_bar(1000):.6f}, "
                   f"-ln(alpha_bar)={expo:.4f}")


def test_criterion_02_quartic_dominates_matched_linear():
    q = make_schedule("quartic_scaled", 1000)
    l = make_schedule("linear", 1000)  # matched on terminal alpha_bar
    diff = q.alpha_bars - l.alpha_bars
    ok = (diff[:-1] > 0).all() and abs(diff[-1]) <= 1e-12
    _report(2, ok, f"min diff t<T = {diff[:-1].min():.3e}, "
                   f"|diff| at T = {abs(diff[-1]):.1e}")


def test_criterion_03_forward_diffusion_moments():
    sched = make_schedule("quartic_scaled", 100, beta_max=0.3)
    n = 100_000
    rng = np.random.default_rng(0)
    x0 = 1.3
    x = np.full(n, x0)
    ok, details = True, []
    for t in range(1, 51):
        x = np.sqrt(1 - sched.beta(t)) * x \
            + np.sqrt(sched.beta(t)) * rng.standard_normal(n)
        if t in (10, 50):
            ab = sched.alpha_bar(t)
            mean_err = abs(x.mean() - np.sqrt(ab) * x0)
            mean_tol = 3 * np.sqrt(1 - ab) / np.sqrt(n)
            var_err = abs(x.var() - (1 - ab))
            var_tol = 3 * (1 - ab) * np.sqrt(2.0 / n)
            ok = ok and mean_err < mean_tol and var_err < var_tol
            details.append(f"t={t}: |dmean|={mean_err:.2e}<{mean_tol:.2e}, "
                           f"|dvar|={var_err:.2e}<{var_tol:.2e}")
    _report(3, ok, "; ".join(details))


def test_criterion_04_gradient_check_every_parameter():
    cfg = DenoiserConfig(layers=2, heads=2, head_dim=8, model_dim=16,
                         n_freqs=3, mlp_ratio=2)
    params = init_params(cfg, seed=1)
    rng = np.random.default_rng(0)
    # randomize the zero-initialized head so gradients reach the trunk
    params.tensors["head.w"] = rng.normal(0, 0.1, (16, 3))
    params.tensors["head.b"] = rng.normal(0, 0.1, (3,))
    cloud = PointCloud(rng.normal(0, 0.5, (8, 3)))
    pose = Pose(rng.normal(0, 0.5, (5, 3)))
    upstream = rng.normal(0, 1, (8, 3))
    grads = backward(params, cloud, 3, pose, upstream)

    def loss():
        return float(np.sum(forward(params, cloud, 3, pose) * upstream))

    h = 1e-5
    worst, worst_name = 0.0, ""
    for name, arr in params.tensors.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = loss()
            flat[i] = old - h
            fm = loss()
            flat[i] = old
            fd = (fp - fm) / (2 * h)
            an = grads[name].reshape(-1)[i]
            rel = abs(fd - an) / max(1e-6, abs(fd), abs(an))
            if rel > worst:
                worst, worst_name = rel, name
    _report(4, worst < 1e-4,
            f"worst relative error {worst:.2e} ({worst_name}) over "
            f"{sum(a.size for a in params.tensors.values())} parameters")


def test_criterion_05_permutation_equivariance_bitwise():
    cfg = DenoiserConfig(layers=2, heads=2, head_dim=8, model_dim=16,
                         n_freqs=3, mlp_ratio=2)
    params = init_params(cfg, seed=2)
    rng = np.random.default_rng(1)
    params.tensors["head.w"] = rng.normal(0, 0.1, (16, 3))
    cloud = PointCloud(rng.normal(0, 0.5, (40, 3)))
    pose = Pose(rng.normal(0, 0.5, (16, 3)))
    base = forward(params, cloud, 7, pose)
    ok = True
    for _ in range(20):
        perm = rng.permutation(cloud.n)
        out = forward(params, PointCloud(cloud.points[perm]), 7, pose)
        ok = ok and np.array_equal(out, base[perm])
    _report(5, ok, "forward(perm(X)) == perm(forward(X)) bitwise, 20 perms")


def test_criterion_06_overfit(overfit_run):
    manifest, ckpt, losses = overfit_run
    initial, final = losses[0], float(np.mean(losses[-50:]))
    chams = [ex.sample_chamfer(ckpt, rec, n_seeds=3)[0]
             for rec in manifest.split("train")]
    mean_cham = float(np.mean(chams))
    ok = final <= 0.1 * initial and mean_cham <= PILOT_C6_CHAMFER_CM
    _report(6, ok, f"loss {initial:.4f} -> {final:.5f} "
                   f"({initial / final:.0f}x); sample chamfer "
                   f"{mean_cham:.3f} cm <= {PILOT_C6_CHAMFER_CM} cm")


def test_criterion_07_toy_generalization(generalization_run):
    manifest, ckpt = generalization_run
    cfg = ckpt.config
    baseline = ex.mean_train_cloud(manifest, cfg)
    model_c, base_c = [], []
    for rec in manifest.split("test"):
        model_c.append(ex.sample_chamfer(ckpt, rec, n_seeds=10)[0])
        base_c.append(ex.baseline_chamfer(baseline, rec, cfg))
    m, b = float(np.mean(model_c)), float(np.mean(base_c))
    _report(7, m < b, f"model {m:.3f} cm < pose-agnostic baseline {b:.3f} cm "
                      f"(400 held-out poses x 10 seeds)")


def test_criterion_08_skirt_diversity(generalization_run):
    # Known red at this compute scale: each draw carries ~4.5 cm of
    # residual off-surface noise (the smallest noise level the model
    # learns to predict), which dominates the pairwise-Chamfer diversity
    # of BOTH regions, so the ratio sits near 1.2 while the underlying
    # data's ratio is ~7.  Capacity (2x width / 1.5x depth), finer
    # frequency features, 2x training and larger fold amplitudes were all
    # probed and move the ratio by < 0.1.  The threshold is asserted as
    # stated rather than weakened.
    manifest, ckpt = generalization_run
    recs = manifest.split("test")[:10]
    skirt, body = ex.region_diversity(ckpt, manifest, recs, n_seeds=5)
    ok = skirt > 0 and skirt >= 3.0 * body
    _report(8, ok, f"skirt diversity {skirt:.3f} cm >= 3x body {body:.3f} cm "
                   f"(ratio {skirt / body:.2f}; sample noise floor ~4.5 cm "
                   f"dominates both regions at this model scale)")


def test_criterion_09_completion(completion_run):
    manifest, ckpt = completion_run
    chams, preserved_all = [], True
    for rec in manifest.split("train")[:4]:
        c, preserved = ex.completion_experiment(ckpt, rec, mask_fraction=0.25)
        chams.append(c)
        preserved_all = preserved_all and preserved
    mean_c = float(np.mean(chams))
    ok = preserved_all and mean_c <= PILOT_C9_COMPLETION_CM
    _report(9, ok, f"masked-region chamfer {mean_c:.3f} cm <= "
                   f"{PILOT_C9_COMPLETION_CM} cm; partial points preserved "
                   f"bitwise: {preserved_all}")


def test_criterion_10_pose_editing(generalization_run):
    manifest, ckpt = generalization_run
    recs = manifest.split("test")
    ids = [ex.identity_edit_chamfer(ckpt, rec, t_edit=100, seed=s)
           for s, rec in enumerate(recs[:5])]
    mean_id = float(np.mean(ids))
    edits, fresh = ex.full_depth_edit_vs_fresh(ckpt, recs[0], n_seeds=10)
    p = float(stats.mannwhitneyu(edits, fresh, alternative="two-sided").pvalue)
    ok = mean_id <= PILOT_C10_IDENTITY_CM and p > 0.01
    _report(10, ok, f"identity edit chamfer {mean_id:.3f} cm <= "
                    f"{PILOT_C10_IDENTITY_CM} cm; full-depth edit vs fresh "
                    f"Mann-Whitney p = {p:.3f} > 0.01")


def test_criterion_11_metrics_vs_brute_force():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        na, nb = rng.integers(2, 501, size=2)
        a = rng.normal(0, 1, (na, 3))
        b = rng.normal(0, 1, (nb, 3))
        d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
        m2s_o, s2m_o = d.min(axis=1).mean(), d.min(axis=0).mean()
        ca, cb = PointCloud(a), PointCloud(b)
        worst = max(worst,
                    abs(mt.directional_distance(ca, cb) - m2s_o),
                    abs(mt.directional_distance(cb, ca) - s2m_o),
                    abs(mt.chamfer(ca, cb) - 0.5 * (m2s_o + s2m_o)))
    _report(11, worst < 1e-12,
            f"max |kd-tree - brute force| = {worst:.2e} over 100 pairs")


def test_criterion_12_pipeline_determinism(tmp_path):
    """Identical config + seeds => byte-identical checkpoints, samples,
    and CSVs, via two independent CLI pipeline runs."""
    sets = ["--set", "data.n_frames=6", "--set", "data.n_points=64",
            "--set", "train.total_steps=4", "--set", "train.n_points=32",
            "--set", "train.batch_size=2", "--set", "train.checkpoint_every=0",
            "--set", "denoiser.model_dim=16", "--set", "denoiser.heads=2",
            "--set", "denoiser.head_dim=8", "--set", "denoiser.layers=1",
            "--set", "denoiser.n_freqs=3", "--set", "denoiser.mlp_ratio=2",
            "--set", "schedule.T=10", "--set", "schedule.beta_max=0.2"]

    def run(root):
        def cli(*args):
            r = subprocess.run([sys.executable, "-m", "pointfold", *args],
                               capture_output=True, text=True)
            assert r.returncode == 0, r.stderr
        cli("gen-data", "--out", str(root / "data"), *sets)
        cli("train", "--manifest", str(root / "data/manifest.jsonl"),
            "--out", str(root / "run"), *sets)
        cli("sample", "--checkpoint", str(root / "run/ckpt_final.bin"),
            "--pose", str(root / "data/poses/pose_00000.txt"),
            "--seed", "7", "--n-points", "16", "--out", str(root / "samp"))
        cli("eval", "--pred-dir", str(root / "data/clouds"),
            "--target-dir", str(root / "data/clouds"),
            "--out", str(root / "ev"))

    a, b = tmp_path / "a", tmp_path / "b"
    run(a)
    run(b)
    compared = ["run/ckpt_final.bin", "run/loss.csv", "samp/sample_00007.ply",
                "ev/metrics.csv", "data/manifest.jsonl",
                "data/clouds/frame_00000.ply"]
    mismatches = [rel for rel in compared
                  if (a / rel).read_bytes() != (b / rel).read_bytes()]
    _report(12, not mismatches,
            f"byte-identical artifacts across two runs: {compared}"
            + (f"; MISMATCH {mismatches}" if mismatches else ""))
