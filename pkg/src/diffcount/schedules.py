"""Noise schedules and the forward (noising) process.

A discrete variance-preserving schedule is the table of per-step noise
rates beta_t for t = 1..T, together with alpha_t = 1 - beta_t and the
cumulative products alpha_bar_t = prod_{j<=t} alpha_j (alpha_bar_0 = 1).
The forward marginal is

    x_t = sqrt(alpha_bar_t) * x_0 + sqrt(1 - alpha_bar_t) * eps,
    eps ~ N(0, I),

so alpha_bar_t controls the signal-to-noise ratio at step t.

For solvers that move between non-integer times the schedule also exposes
a continuous view: log(alpha_bar) is interpolated piecewise-linearly on
the integer knots 0..T, which keeps alpha_bar(t) exact at every integer t
and strictly decreasing in between.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NoiseSchedule",
    "InvalidScheduleError",
    "build_schedule",
    "diffuse",
    "training_loss",
    "uniform_weight",
    "schedule_to_csv",
]


class InvalidScheduleError(ValueError):
    """Schedule parameters outside their valid range."""


#: Weighting function pi(t) for the training objective; the default is
#: the constant weight pi(t) = 1.
WeightFn = Callable[[np.ndarray], np.ndarray]


def uniform_weight(t: np.ndarray) -> np.ndarray:
    return np.ones_like(np.asarray(t, dtype=float))


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta/alpha/alpha_bar table for T diffusion steps."""

    kind: str
    T: int
    betas: np.ndarray        # (T,), betas[i] is beta_{i+1}
    alphas: np.ndarray       # (T,)
    alpha_bars: np.ndarray   # (T+1,), alpha_bars[0] = 1
    _log_alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_log_alpha_bars", np.log(self.alpha_bars))

    def beta(self, t: int) -> float:
        """beta_t for integer t in 1..T."""
        if not 1 <= t <= self.T:
            raise IndexError(f"t={t} outside 1..{self.T}")
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise IndexError(f"t={t} outside 1..{self.T}")
        return float(self.alphas[t - 1])

    def alpha_bar(self, t) -> np.ndarray | float:
        """alpha_bar at integer or fractional time, scalar or array.

        Fractional times use piecewise-linear interpolation of
        log(alpha_bar), which matches the discrete table exactly at the
        integer knots.
        """
        tau = np.asarray(t, dtype=float)
        if np.any(tau < 0) or np.any(tau > self.T):
            raise IndexError(f"time {t} outside [0, {self.T}]")
        out = np.exp(np.interp(tau, np.arange(self.T + 1), self._log_alpha_bars))
        return float(out) if np.isscalar(t) or out.ndim == 0 else out

    def sigma(self, t) -> np.ndarray | float:
        """sqrt(1 - alpha_bar(t)), the forward-marginal noise scale."""
        ab = self.alpha_bar(t)
        return np.sqrt(1.0 - ab)

    def log_snr_half(self, t) -> np.ndarray | float:
        """lambda(t) = 0.5 * log(alpha_bar / (1 - alpha_bar)).

        Strictly decreasing in t; diverges to +inf as t -> 0.
        """
        ab = self.alpha_bar(t)
        return 0.5 * (np.log(ab) - np.log1p(-ab))

    def time_of_log_snr_half(self, lam: float, lo: float, hi: float) -> float:
        """Invert log_snr_half on [lo, hi] by bisection (lo < hi)."""
        if not 0.0 <= lo < hi <= self.T:
            raise ValueError(f"invalid bracket [{lo}, {hi}]")
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if self.log_snr_half(mid) > lam:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def beta_continuous(self, tau) -> np.ndarray | float:
        """Continuous noise-rate curve beta(tau).

        Piecewise-linear interpolation through the knots (t, beta_t) for
        t = 1..T, extended by the endpoint values on [0, 1) and used by
        the continuous-time analysis (transition operators). For the
        linear kind this is the exact linear function on [1, T].
        """
        tau = np.asarray(tau, dtype=float)
        out = np.interp(tau, np.arange(1, self.T + 1), self.betas)
        return float(out) if out.ndim == 0 else out


def build_schedule(kind: str, T: int, beta_min: float = 1e-4,
                   beta_max: float = 0.02) -> NoiseSchedule:
    """Construct a noise schedule.

    kind="linear" spaces beta_t evenly from beta_min to beta_max.
    kind="cosine" derives beta_t from the squared-cosine alpha_bar curve
    (offset s = 0.008) with beta clipped to (0, 0.999]; the beta bounds
    are ignored for this kind.
    """
    if T < 1:
        raise InvalidScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise InvalidScheduleError(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")

    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=float)
        f = np.cos((steps / T + s) / (1 + s) * np.pi / 2) ** 2
        alpha_bar = f / f[0]
        betas = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-12, 0.999)
    else:
        raise InvalidScheduleError(f"unknown schedule kind {kind!r}")

    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(kind=kind, T=T, betas=betas, alphas=alphas,
                         alpha_bars=alpha_bars)


def diffuse(x0: np.ndarray, t, eps: np.ndarray,
            schedule: NoiseSchedule) -> np.ndarray:
    """Forward-noise x0 to time t with the given noise draw.

    Computes sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
    t may be a scalar applied to the whole batch or an integer array with
    one entry per leading row of x0.
    """
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > schedule.T):
        raise IndexError(f"t={t} outside 0..{schedule.T}")
    ab = schedule.alpha_bars[t_arr]
    if t_arr.ndim > 0:
        # per-sample times broadcast over trailing dimensions
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def training_loss(model, batch, schedule: NoiseSchedule,
                  weight: WeightFn = uniform_weight,
                  rng: np.random.Generator | None = None,
                  seed: int | None = None) -> float:
    """Monte-Carlo estimate of the denoising objective over one batch.

    For each item draws t uniform on {1..T} and eps ~ N(0, I), then
    averages pi(t) * ||eps_hat(x_t, t) - eps||^2 over the batch. The
    squared norm sums over all tensor components. Draw order is fixed
    (all t first, then all eps) so a run is reproducible from the rng
    state alone.
    """
    x0 = np.asarray(batch, dtype=float)
    if x0.ndim == 1:
        x0 = x0[None, :]
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    if rng is None:
        rng = np.random.default_rng(seed)
    n = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    x_t = diffuse(x0, t, eps, schedule)
    eps_hat = model.predict_noise(x_t, t)
    if eps_hat.shape != eps.shape:
        raise ValueError(
            f"model output shape {eps_hat.shape} != noise shape {eps.shape}")
    sq = np.sum((eps_hat - eps) ** 2, axis=tuple(range(1, x0.ndim)))
    return float(np.mean(weight(t) * sq))


def schedule_to_csv(schedule: NoiseSchedule, path) -> None:
    """Dump the schedule table (t, beta, alpha, alpha_bar) for inspection."""
    rows = ["t,beta,alpha,alpha_bar"]
    for t in range(1, schedule.T + 1):
        rows.append(f"{t},{schedule.betas[t-1]:.12g},{schedule.alphas[t-1]:.12g},"
                    f"{schedule.alpha_bars[t]:.12g}")
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
