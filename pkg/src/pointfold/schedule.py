"""Noise schedules, closed-form forward diffusion, and diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pointfold.geometry import PointCloud

KINDS = ("linear", "cubic", "quartic_paper", "quartic_scaled")

DEFAULT_T = 1000
DEFAULT_BETA_MAX = 0.05


@dataclass(frozen=True)
class Schedule:
    """Diffusion horizon with per-step rates.

    betas[t-1] is the rate at step t (1-based steps throughout).
    alpha_bars is the running product of (1 - beta), strictly decreasing.
    """

    kind: str
    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.T,):
            raise ValueError(f"betas must have shape ({self.T},)")
        if not ((betas > 0).all() and (betas < 1).all()):
            raise ValueError("betas must lie strictly in (0, 1)")
        if (np.diff(betas) < 0).any():
            raise ValueError("betas must be nondecreasing")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for a in (betas, alphas, alpha_bars):
            a.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")


def _matched_linear_coeff(betas_ref: np.ndarray, T: int) -> float:
    """Slope c for beta_t = c*t/T such that the terminal surviving signal
    fraction matches the reference schedule.

    Matching is done on sum(log(1-beta)) (equivalently on alpha_bar_T)
    rather than on sum(beta): with plain sum matching the second-order
    terms make the linear schedule end slightly *more* noised, which
    breaks the signal-preservation comparison at the last few steps.
    """
    target = np.sum(np.log1p(-betas_ref))
    t = np.arange(1, T + 1) / T
    lo, hi = 1e-12, 1.0 - 1e-9

    def gap(c):
        return np.sum(np.log1p(-c * t)) - target

    for _ in range(200):  # bisection; gap is monotone in c
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def make_schedule(kind: str, T: int = DEFAULT_T, beta_max: float | None = None,
                  endpoints: tuple[float, float] | None = None) -> Schedule:
    """Build a schedule of the given kind.

    quartic_paper:  beta_t = (t/10000)^4, exactly as published.
    quartic_scaled: beta_t = beta_max * (t/T)^4 (training default); the
                    default beta_max of 0.05 fully noises the data by T.
    cubic:          beta_max * (t/T)^3.
    linear:         beta_t = c*t/T with c chosen so the terminal
                    alpha_bar matches the quartic_scaled schedule of the
                    same T/beta_max (controlled comparisons), unless
                    explicit (start, end) endpoints are given.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")
    if T < 1:
        raise ValueError("T must be >= 1")
    t = np.arange(1, T + 1, dtype=np.float64)
    if kind == "quartic_paper":
        # t^4 and 10000^4 are both exact in f64, so one division gives
        # correctly rounded rates (notably beta_1000 = 1e-4 exactly)
        betas = t ** 4 / 10000.0 ** 4
    else:
        if beta_max is None:
            beta_max = DEFAULT_BETA_MAX
        if not 0 < beta_max < 1:
            raise ValueError(f"beta_max must lie in (0, 1), got {beta_max}")
        if kind == "quartic_scaled":
            betas = beta_max * (t / T) ** 4
        elif kind == "cubic":
            betas = beta_max * (t / T) ** 3
        else:  # linear
            if endpoints is not None:
                start, end = endpoints
                betas = np.linspace(start, end, T)
            else:
                ref = beta_max * (t / T) ** 4
                betas = _matched_linear_coeff(ref, T) * t / T
    return Schedule(kind=kind, T=T, betas=betas)


@dataclass(frozen=True)
class ScheduleSpec:
    """Serializable recipe for make_schedule."""

    kind: str = "quartic_scaled"
    T: int = DEFAULT_T
    beta_max: float | None = None
    endpoints: tuple[float, float] | None = None

    def build(self) -> Schedule:
        return make_schedule(self.kind, self.T, self.beta_max, self.endpoints)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_max": self.beta_max,
            "endpoints": list(self.endpoints) if self.endpoints else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleSpec":
        ep = d.get("endpoints")
        return cls(kind=d["kind"], T=int(d["T"]), beta_max=d.get("beta_max"),
                   endpoints=tuple(ep) if ep else None)


def q_sample(x0: PointCloud, t: int, eps: np.ndarray, sched: Schedule) -> PointCloud:
    """Closed-form forward diffusion:
    x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.points.shape:
        raise ValueError(f"eps shape {eps.shape} does not match cloud {x0.points.shape}")
    ab = sched.alpha_bar(t)
    pts = np.sqrt(ab) * x0.points + np.sqrt(1.0 - ab) * eps
    return PointCloud(pts, x0.world_scale, x0.world_offset)


def snr(sched: Schedule, t: int) -> float:
    """Signal-to-noise ratio alpha_bar / (1 - alpha_bar) at step t."""
    ab = sched.alpha_bar(t)
    return ab / (1.0 - ab)
