"""Noise schedule and forward / reverse diffusion operators.

Timesteps are 0-indexed: ``t`` runs over ``0 .. T-1``.  The DDIM helpers
additionally accept ``t = -1`` for the clean state, where the cumulative
retention is taken to be exactly 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .tensor import Tensor, no_grad

Predictor = Callable[[Tensor, np.ndarray], Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float
    beta_end: float

    def alpha_bar(self, t) -> np.ndarray:
        """Cumulative retention at ``t`` (float64), with ``alpha_bar(-1) == 1``."""
        t = np.asarray(t)
        if np.any(t < -1) or np.any(t >= self.T):
            raise IndexError(f"timestep {t} outside [-1, {self.T - 1}]")
        ab = self.alpha_bars.astype(np.float64)
        return np.where(t < 0, 1.0, ab[np.clip(t, 0, None)])

    def posterior_variance(self, t: int, t_prev: int | None = None) -> float:
        """Variance of q(x_{t_prev} | x_t, x_0); ``t_prev`` defaults to ``t - 1``."""
        t_prev = t - 1 if t_prev is None else t_prev
        ab_t = float(self.alpha_bar(t))
        ab_p = float(self.alpha_bar(t_prev))
        beta_eff = 1.0 - ab_t / ab_p
        return (1.0 - ab_p) / (1.0 - ab_t) * beta_eff


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64).astype(np.float32)
    alphas = np.float32(1.0) - betas
    alpha_bars = np.cumprod(alphas.astype(np.float64)).astype(np.float32)
    return NoiseSchedule(T, betas, alphas, alpha_bars, float(beta_start), float(beta_end))


def _check_t(sched: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 0) or np.any(t >= sched.T):
        raise IndexError(f"timestep out of range [0, {sched.T - 1}]: {t}")
    return t


def _per_item(coef: np.ndarray, ndim: int) -> np.ndarray:
    # scalar -> scalar, [N] -> [N, 1, 1, ...]
    return coef if coef.ndim == 0 else coef.reshape(coef.shape + (1,) * (ndim - 1))


def q_sample(x0, t, eps=None, sched: NoiseSchedule | None = None, rng=None) -> Tensor:
    """Draw x_t ~ q(x_t | x_0) as ``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``.

    ``t`` may be a single timestep or one per item along the first axis.
    When ``eps`` is omitted it is drawn from ``rng`` (a numpy Generator).
    """
    if sched is None:
        raise UsageError("q_sample needs a NoiseSchedule")
    t = _check_t(sched, t)
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    if eps is None:
        if rng is None:
            raise UsageError("q_sample needs eps or an rng to draw it from")
        eps = Tensor(rng.standard_normal(x0.shape, dtype=np.float32))
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if eps.shape != x0.shape:
        raise DimensionError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    ab = sched.alpha_bars.astype(np.float64)[t]
    a = _per_item(np.sqrt(ab), x0.ndim).astype(x0.data.dtype)
    s = _per_item(np.sqrt(1.0 - ab), x0.ndim).astype(x0.data.dtype)
    return x0 * a + eps * s


def predict_x0(x_t, eps_hat, t, sched: NoiseSchedule) -> np.ndarray:
    """Invert the marginal: ``(x_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)``."""
    xt = np.asarray(getattr(x_t, "data", x_t), dtype=np.float64)
    e = np.asarray(getattr(eps_hat, "data", eps_hat), dtype=np.float64)
    ab = sched.alpha_bar(t)
    return (xt - np.sqrt(1.0 - ab) * e) / np.sqrt(ab)


def _as64(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def ddpm_reverse_step(x_t, eps_hat, t: int, sched: NoiseSchedule, rng=None,
                      t_prev: int | None = None) -> Tensor:
    """One ancestral step x_t -> x_{t_prev} with fixed posterior variance.

    ``t_prev`` defaults to ``t - 1``.  Larger jumps use the respaced schedule
    ``beta' = 1 - ab_t / ab_{t_prev}``.  Stepping to the clean state adds no
    noise.
    """
    return Tensor(_ddpm(_as64(x_t), _as64(eps_hat), t, sched, rng, t_prev))


def _ddpm(xt, e, t, sched, rng, t_prev) -> np.ndarray:
    if xt.shape != e.shape:
        raise DimensionError(f"x_t shape {xt.shape} != eps_hat shape {e.shape}")
    _check_t(sched, t)
    t_prev = t - 1 if t_prev is None else t_prev
    if not -1 <= t_prev < t:
        raise UsageError(f"ddpm step needs -1 <= t_prev < t, got t={t}, t_prev={t_prev}")
    ab_t = float(sched.alpha_bar(t))
    ab_p = float(sched.alpha_bar(t_prev))
    alpha_eff = ab_t / ab_p
    beta_eff = 1.0 - alpha_eff
    mu = (xt - beta_eff / np.sqrt(1.0 - ab_t) * e) / np.sqrt(alpha_eff)
    if t_prev < 0:
        return mu
    if rng is None:
        raise UsageError("ddpm_reverse_step needs an rng for t > 0")
    sigma = np.sqrt(sched.posterior_variance(t, t_prev))
    return mu + sigma * rng.standard_normal(xt.shape)


def ddim_step(x_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule) -> Tensor:
    """Deterministic (eta = 0) DDIM move from ``t`` to ``t_prev``.

    ``t_prev < t`` denoises, ``t_prev > t`` inverts.  Either endpoint may be
    -1, the clean state.
    """
    if t == t_prev:
        raise UsageError(f"ddim_step needs t != t_prev (both {t})")
    xt, e = _as64(x_t), _as64(eps_hat)
    if xt.shape != e.shape:
        raise DimensionError(f"x_t shape {xt.shape} != eps_hat shape {e.shape}")
    return Tensor(_ddim(xt, e, t, t_prev, sched))


def _ddim(xt: np.ndarray, e: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    ab_t = sched.alpha_bar(t)
    ab_p = sched.alpha_bar(t_prev)
    x0_hat = (xt - np.sqrt(1.0 - ab_t) * e) / np.sqrt(ab_t)
    return np.sqrt(ab_p) * x0_hat + np.sqrt(1.0 - ab_p) * e


def uniform_grid(T: int, steps: int = 50) -> list[int]:
    """Ascending grid of ``steps`` roughly uniform timesteps from 0 to T-1."""
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    steps = min(steps, T)
    return sorted({int(round(v)) for v in np.linspace(0, T - 1, steps)})


def _check_grid(grid: Sequence[int], sched: NoiseSchedule, ascending: bool) -> list[int]:
    grid = [int(t) for t in grid]
    if not grid:
        raise UsageError("empty timestep grid")
    diffs = np.diff(grid)
    if (ascending and np.any(diffs <= 0)) or (not ascending and np.any(diffs >= 0)):
        order = "ascending" if ascending else "descending"
        raise UsageError(f"timestep grid must be strictly {order}: {grid}")
    _check_t(sched, grid)
    return grid


def _call(predictor: Predictor, x: np.ndarray, t: int) -> np.ndarray:
    with no_grad():
        out = predictor(Tensor(x), np.full(x.shape[0], t, dtype=np.int64))
    return np.asarray(getattr(out, "data", out), dtype=np.float64)


def stochastic_encode(x0, predictor: Predictor, grid: Sequence[int], sched: NoiseSchedule) -> Tensor:
    """Deterministically invert ``x0`` to its latent code at ``grid[-1]``.

    Starts from the clean state and applies one inverting DDIM step per grid
    entry.  The noise prediction at the clean state is taken at timestep 0.
    """
    grid = _check_grid(grid, sched, ascending=True)
    x = _as64(x0)
    cur = -1
    for t in grid:
        eps = _call(predictor, x, max(cur, 0))
        x = _ddim(x, eps, cur, t, sched)
        cur = t
    return Tensor(x)


def sample_from_noise(x_T, predictor: Predictor, grid: Sequence[int], sched: NoiseSchedule,
                      mode: str = "ddim", rng=None, clip: bool = True) -> Tensor:
    """Run the reverse chain from ``x_T`` at ``grid[0]`` down to clean data.

    ``grid`` is strictly descending; after its last entry a final step to the
    clean state is taken.  ``mode`` is ``"ddim"`` (deterministic) or
    ``"ddpm"`` (ancestral).
    """
    if mode not in ("ddim", "ddpm"):
        raise UsageError(f"unknown sampler mode {mode!r}")
    grid = _check_grid(grid, sched, ascending=False)
    x = _as64(x_T)
    for i, t in enumerate(grid):
        t_prev = grid[i + 1] if i + 1 < len(grid) else -1
        eps = _call(predictor, x, t)
        if mode == "ddim":
            x = _ddim(x, eps, t, t_prev, sched)
        else:
            x = _ddpm(x, eps, t, sched, rng, t_prev)
    if clip:
        x = np.clip(x, -1.0, 1.0)
    return Tensor(x)


def psnr(x, ref, data_range: float = 2.0, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio in dB for images spanning ``data_range``."""
    a, b = _as64(x), _as64(ref)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return float(min(cap, 10.0 * np.log10(data_range ** 2 / mse)))
