"""Noise-prediction transformer conditioned on skeletal keypoints.

Per-point tokens go through interleaved self-attention (over the point
set) and cross-attention (onto pose-keypoint tokens) blocks, each
sub-block pre-normalized with a residual connection, followed by a GELU
MLP.  The final linear head maps every token to a 3-vector of predicted
noise and is zero-initialized.

Point tokens are internally sorted into a canonical lexicographic order
before any attention and unsorted afterwards, which makes permutation
equivariance hold bitwise, not just numerically.

Two execution paths share the same parameter set: a plain-numpy forward
(optionally batched over leading axes, used for sampling) and a taped
forward used by ``backward`` to produce exact reverse-mode gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from pointfold import autodiff as ad
from pointfold.encoding import posenc, timestep_embed
from pointfold.geometry import PointCloud, Pose

ATTENTION_MODES = ("self_only", "cross_only", "self_plus_cross")


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 8
    heads: int = 4
    head_dim: int = 128
    model_dim: int = 512
    n_freqs: int = 7
    mlp_ratio: int = 4
    attention_mode: str = "self_plus_cross"

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.heads * self.head_dim != self.model_dim:
            raise ValueError(
                f"heads*head_dim must equal model_dim "
                f"({self.heads}*{self.head_dim} != {self.model_dim})"
            )
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")

    @property
    def point_feat_dim(self) -> int:
        # raw coordinates ride along with the frequency features: the
        # encoding alone is only injective inside the unit interval, and
        # noisy inputs routinely leave it
        return 3 + 6 * self.n_freqs

    @property
    def mlp_dim(self) -> int:
        return self.mlp_ratio * self.model_dim


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    """Declared name -> shape map; the single source of truth for the
    parameter set.  Both branches are always allocated; an attention_mode
    that severs one simply leaves its weights unused."""
    d, f, m = cfg.model_dim, cfg.point_feat_dim, cfg.mlp_dim
    shapes: dict[str, tuple[int, ...]] = {
        "in_point.w": (f, d),
        "in_point.b": (d,),
        "in_pose.w": (f, d),
        "in_pose.b": (d,),
        "time.w": (d, d),
        "time.b": (d,),
    }
    for i in range(cfg.layers):
        for branch in ("self", "cross"):
            p = f"layer{i}.{branch}"
            shapes[f"{p}.ln_attn.gamma"] = (d,)
            shapes[f"{p}.ln_attn.beta"] = (d,)
            shapes[f"{p}.wq"] = (d, d)
            shapes[f"{p}.wk"] = (d, d)
            shapes[f"{p}.wv"] = (d, d)
            shapes[f"{p}.wo"] = (d, d)
            shapes[f"{p}.wo_b"] = (d,)
            shapes[f"{p}.ln_mlp.gamma"] = (d,)
            shapes[f"{p}.ln_mlp.beta"] = (d,)
            shapes[f"{p}.mlp.w1"] = (d, m)
            shapes[f"{p}.mlp.b1"] = (m,)
            shapes[f"{p}.mlp.w2"] = (m, d)
            shapes[f"{p}.mlp.b2"] = (d,)
    shapes["ln_f.gamma"] = (d,)
    shapes["ln_f.beta"] = (d,)
    shapes["head.w"] = (d, 3)
    shapes["head.b"] = (3,)
    return shapes


def param_count(cfg: DenoiserConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    seed: int
    tensors: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, self.seed,
                              {k: v.copy() for k, v in self.tensors.items()})


def init_params(cfg: DenoiserConfig, seed: int) -> DenoiserParams:
    """Scaled-normal init (std 1/sqrt(fan_in)) for weight matrices, zeros
    for biases, ones for norm gains; the output head is zeroed so a fresh
    model predicts zero noise."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("head."):
            tensors[name] = np.zeros(shape)
        elif name.endswith(".gamma"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
    return DenoiserParams(cfg, seed, tensors)


# --- plain-numpy path -------------------------------------------------------


def _point_feats(pts, n_freqs):
    """Raw coordinates concatenated with their frequency features."""
    pts = np.asarray(pts, dtype=np.float64)
    return np.concatenate([pts, posenc(pts, n_freqs)], axis=-1)


def _gelu(x):
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def _layer_norm(x, gamma, beta, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv * gamma + beta


def _split_heads(x, heads):
    # (..., M, D) -> (..., H, M, hd)
    *lead, m, d = x.shape
    x = x.reshape(*lead, m, heads, d // heads)
    return np.swapaxes(x, -2, -3)


def _merge_heads(x):
    # (..., H, M, hd) -> (..., M, D)
    x = np.swapaxes(x, -2, -3)
    *lead, m, h, hd = x.shape
    return x.reshape(*lead, m, h * hd)


def _attn_arrays(q_in, kv_in, t, prefix, heads):
    q = _split_heads(q_in @ t[prefix + ".wq"], heads)
    k = _split_heads(kv_in @ t[prefix + ".wk"], heads)
    v = _split_heads(kv_in @ t[prefix + ".wv"], heads)
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    w = e / e.sum(axis=-1, keepdims=True)
    return _merge_heads(w @ v) @ t[prefix + ".wo"] + t[prefix + ".wo_b"]


def attention(q_tokens: np.ndarray, kv_tokens: np.ndarray, params: DenoiserParams,
              layer: int, branch: str) -> np.ndarray:
    """Multi-head scaled dot-product attention with a given layer's
    weights.  ``branch`` is "self" or "cross"; self-attention is the same
    operation with kv_tokens = q_tokens."""
    cfg = params.config
    d = cfg.model_dim
    if q_tokens.shape[-1] != d or kv_tokens.shape[-1] != d:
        raise ValueError(f"token width must be model_dim={d}")
    if branch not in ("self", "cross"):
        raise ValueError(f"branch must be 'self' or 'cross', got {branch!r}")
    if not 0 <= layer < cfg.layers:
        raise ValueError(f"layer {layer} outside [0, {cfg.layers})")
    return _attn_arrays(q_tokens, kv_tokens, params.tensors,
                        f"layer{layer}.{branch}", cfg.heads)


def _net_arrays(t, cfg, x_feats, time_vec, pose_tokens):
    """Shared trunk on plain arrays.  x_feats: (..., N, 6L) encoded
    points; time_vec: (..., D) or (..., N, D); pose_tokens: (J, 6L)."""
    h = x_feats @ t["in_point.w"] + t["in_point.b"]
    h = h + (time_vec if time_vec.ndim == h.ndim else time_vec[..., None, :])
    ptok = pose_tokens @ t["in_pose.w"] + t["in_pose.b"]
    mode = cfg.attention_mode
    for i in range(cfg.layers):
        if mode != "cross_only":
            p = f"layer{i}.self"
            hn = _layer_norm(h, t[p + ".ln_attn.gamma"], t[p + ".ln_attn.beta"])
            h = h + _attn_arrays(hn, hn, t, p, cfg.heads)
            hn = _layer_norm(h, t[p + ".ln_mlp.gamma"], t[p + ".ln_mlp.beta"])
            h = h + _gelu(hn @ t[p + ".mlp.w1"] + t[p + ".mlp.b1"]) @ t[p + ".mlp.w2"] + t[p + ".mlp.b2"]
        if mode != "self_only":
            p = f"layer{i}.cross"
            hn = _layer_norm(h, t[p + ".ln_attn.gamma"], t[p + ".ln_attn.beta"])
            h = h + _attn_arrays(hn, ptok, t, p, cfg.heads)
            hn = _layer_norm(h, t[p + ".ln_mlp.gamma"], t[p + ".ln_mlp.beta"])
            h = h + _gelu(hn @ t[p + ".mlp.w1"] + t[p + ".mlp.b1"]) @ t[p + ".mlp.w2"] + t[p + ".mlp.b2"]
    h = _layer_norm(h, t["ln_f.gamma"], t["ln_f.beta"])
    return h @ t["head.w"] + t["head.b"]


def _canonical_order(points):
    """Stable lexicographic order by (x, y, z); makes reductions over the
    point set independent of input ordering."""
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


def _check_inputs(params, points, t, pose, T=None):
    if not np.isfinite(points).all():
        raise ValueError("non-finite input points")
    if t < 0 or (T is not None and t > T):
        raise ValueError(f"step {t} out of range")


def _time_vec(tensors, cfg, t):
    emb = timestep_embed(int(t), cfg.model_dim)
    return emb @ tensors["time.w"] + tensors["time.b"]


def forward(params: DenoiserParams, xt: PointCloud, t: int, pose: Pose,
            context: np.ndarray | None = None) -> np.ndarray:
    """Predicted noise for each point of ``xt``, shape (N, 3).

    ``context`` optionally supplies clean points that join the
    self-attention sequence as frozen tokens carrying a step-0 embedding
    (used for completion); predictions are returned for the noisy points
    only.
    """
    _check_inputs(params, xt.points, t, pose)
    cfg = params.config
    tn = params.tensors
    order = _canonical_order(xt.points)
    pts = xt.points[order]
    feats = _point_feats(pts, cfg.n_freqs)
    tvec = _time_vec(tn, cfg, t)
    if context is not None:
        ctx = np.asarray(context, dtype=np.float64)
        ctx = ctx[_canonical_order(ctx)]
        feats = np.concatenate([feats, _point_feats(ctx, cfg.n_freqs)], axis=0)
        tmat = np.concatenate([
            np.broadcast_to(tvec, (len(pts), cfg.model_dim)),
            np.broadcast_to(_time_vec(tn, cfg, 0), (len(ctx), cfg.model_dim)),
        ], axis=0)
        out = _net_arrays(tn, cfg, feats, tmat, _point_feats(pose.keypoints, cfg.n_freqs))
        out = out[: len(pts)]
    else:
        out = _net_arrays(tn, cfg, feats, tvec, _point_feats(pose.keypoints, cfg.n_freqs))
    eps_hat = np.empty_like(out)
    eps_hat[order] = out
    return eps_hat


def forward_batch(params: DenoiserParams, xs: np.ndarray, t: int,
                  pose: Pose) -> np.ndarray:
    """Batched forward over (B, N, 3) noisy points sharing one step and
    pose.  Each batch item follows exactly the single-item code path
    (per-slice BLAS calls), so slice b equals forward() on xs[b]."""
    xs = np.asarray(xs, dtype=np.float64)
    _check_inputs(params, xs, t, pose)
    cfg = params.config
    tn = params.tensors
    b, n, _ = xs.shape
    orders = np.stack([_canonical_order(x) for x in xs])
    sorted_pts = np.take_along_axis(xs, orders[:, :, None], axis=1)
    feats = _point_feats(sorted_pts.reshape(-1, 3), cfg.n_freqs).reshape(b, n, -1)
    out = _net_arrays(tn, cfg, feats, _time_vec(tn, cfg, t),
                      _point_feats(pose.keypoints, cfg.n_freqs))
    eps_hat = np.empty_like(out)
    np.put_along_axis(eps_hat, orders[:, :, None], out, axis=1)
    return eps_hat


# --- taped path -------------------------------------------------------------


def _attn_vars(q_in, kv_in, pv, prefix, heads):
    m = q_in.shape[0]
    p = kv_in.shape[0]
    hd = q_in.shape[1] // heads

    def split(x, rows):
        return ad.transpose(ad.reshape(x, (rows, heads, hd)), (1, 0, 2))

    q = split(ad.matmul(q_in, pv[prefix + ".wq"]), m)
    k = split(ad.matmul(kv_in, pv[prefix + ".wk"]), p)
    v = split(ad.matmul(kv_in, pv[prefix + ".wv"]), p)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(hd))
    w = ad.softmax(scores, axis=-1)
    o = ad.reshape(ad.transpose(ad.matmul(w, v), (1, 0, 2)), (m, heads * hd))
    return ad.add(ad.matmul(o, pv[prefix + ".wo"]), pv[prefix + ".wo_b"])


def _net_vars(pv, cfg, x_feats, time_rows, pose_feats):
    def ln(x, prefix):
        return ad.layer_norm(x, pv[prefix + ".gamma"], pv[prefix + ".beta"])

    def mlp(x, p):
        hidden = ad.gelu(ad.add(ad.matmul(x, pv[p + ".mlp.w1"]), pv[p + ".mlp.b1"]))
        return ad.add(ad.matmul(hidden, pv[p + ".mlp.w2"]), pv[p + ".mlp.b2"])

    h = ad.add(ad.matmul(ad.Var(x_feats), pv["in_point.w"]), pv["in_point.b"])
    h = ad.add(h, time_rows)
    ptok = ad.add(ad.matmul(ad.Var(pose_feats), pv["in_pose.w"]), pv["in_pose.b"])
    mode = cfg.attention_mode
    for i in range(cfg.layers):
        if mode != "cross_only":
            p = f"layer{i}.self"
            hn = ln(h, p + ".ln_attn")
            h = ad.add(h, _attn_vars(hn, hn, pv, p, cfg.heads))
            h = ad.add(h, mlp(ln(h, p + ".ln_mlp"), p))
        if mode != "self_only":
            p = f"layer{i}.cross"
            hn = ln(h, p + ".ln_attn")
            h = ad.add(h, _attn_vars(hn, ptok, pv, p, cfg.heads))
            h = ad.add(h, mlp(ln(h, p + ".ln_mlp"), p))
    h = ln(h, "ln_f")
    return ad.add(ad.matmul(h, pv["head.w"]), pv["head.b"])


def _taped_forward(params, xt, t, pose, context=None):
    """Build the computation graph; returns (prediction Var for the noisy
    points, name -> param Var)."""
    cfg = params.config
    pv = {name: ad.Var(arr) for name, arr in params.tensors.items()}
    order = _canonical_order(xt.points)
    pts = xt.points[order]
    feats = _point_feats(pts, cfg.n_freqs)
    temb = timestep_embed(int(t), cfg.model_dim)[None, :]
    tvec = ad.add(ad.matmul(ad.Var(temb), pv["time.w"]), pv["time.b"])
    n_noisy = len(pts)
    if context is not None:
        ctx = np.asarray(context, dtype=np.float64)
        ctx = ctx[_canonical_order(ctx)]
        feats = np.concatenate([feats, _point_feats(ctx, cfg.n_freqs)], axis=0)
        temb0 = timestep_embed(0, cfg.model_dim)[None, :]
        tvec0 = ad.add(ad.matmul(ad.Var(temb0), pv["time.w"]), pv["time.b"])
        time_rows = ad.concat(
            [ad.matmul(ad.Var(np.ones((n_noisy, 1))), tvec),
             ad.matmul(ad.Var(np.ones((len(ctx), 1))), tvec0)],
            axis=0,
        )
    else:
        time_rows = tvec
    out = _net_vars(pv, cfg, feats, time_rows, _point_feats(pose.keypoints, cfg.n_freqs))
    if context is not None:
        out = ad.take_rows(out, 0, n_noisy)
    return out, pv, order


def backward(params: DenoiserParams, xt: PointCloud, t: int, pose: Pose,
             upstream: np.ndarray,
             context: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of <forward(...), upstream> w.r.t. every parameter."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != xt.points.shape:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match points {xt.points.shape}")
    _check_inputs(params, xt.points, t, pose)
    out, pv, order = _taped_forward(params, xt, t, pose, context)
    out.grad = upstream[order]
    ad.backward(out)
    return {name: (v.grad if v.grad is not None else np.zeros_like(v.data))
            for name, v in pv.items()}
