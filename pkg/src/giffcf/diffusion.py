"""Smoothing/noise schedules, forward corruption and the deterministic reverse step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from giffcf.graph import ItemGraph, apply_adjacency


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear smoothing schedule ``tau_t = t/T`` and geometric noise ``sigma_t = sigma_T rho^(T-t)``.

    ``rho`` is kept even when ``sigma_T == 0``: it is the weight of the
    refining term in the reverse update.
    """

    T: int = 3
    alpha: float = 1.5
    sigma_T: float = 0.0
    rho: float = 1.0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.sigma_T < 0:
            raise ValueError("sigma_T must be nonnegative")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")

    @property
    def taus(self) -> np.ndarray:
        return np.arange(self.T + 1, dtype=np.float64) / self.T

    @property
    def sigmas(self) -> np.ndarray:
        return self.sigma_T * self.rho ** (self.T - np.arange(self.T + 1, dtype=np.float64))

    def with_rho(self, rho: float) -> "DiffusionSchedule":
        return DiffusionSchedule(self.T, self.alpha, self.sigma_T, rho)


class LatentSignal(NamedTuple):
    values: np.ndarray
    t: int


def _filtered(x, ax, ta):
    """``(1 - ta) x + ta A x`` given a precomputed ``A x``."""
    return x + ta * (ax - x)


def smooth(g: ItemGraph, sched: DiffusionSchedule, x, t) -> np.ndarray:
    """``F_t x``; ``t`` may be one step for all rows or one step per row."""
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t)
    ta = sched.alpha * sched.taus[t]
    if ta.ndim == 1:
        ta = ta[:, None]
    if np.all(ta == 0):
        return x.copy()
    return _filtered(x, apply_adjacency(g, x), ta)


def forward_sample(g: ItemGraph, sched: DiffusionSchedule, x, t, rng: np.random.Generator | None = None) -> LatentSignal:
    """Draw ``z_t = F_t x + sigma_t * eps``.

    No randomness is consumed when ``sigma_t`` is zero, so ``rng`` may be
    ``None`` in the noise-free setting.
    """
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > sched.T):
        raise ValueError(f"timestep out of range 0..{sched.T}: {t}")
    z = smooth(g, sched, x, t_arr)
    sig = sched.sigmas[t_arr]
    if np.any(sig > 0):
        if rng is None:
            raise ValueError("a generator is required when sigma_t > 0")
        if sig.ndim == 1:
            sig = sig[:, None]
        z = z + sig * rng.standard_normal(z.shape)
    return LatentSignal(z, int(t) if t_arr.ndim == 0 else t_arr)


def reverse_step(g: ItemGraph, sched: DiffusionSchedule, z_t: LatentSignal, x_hat) -> LatentSignal:
    """Deterministic transition ``z_{t-1} = F_{t-1} x_hat + rho (z_t - F_t x_hat)``."""
    t = int(z_t.t)
    if t < 1:
        raise ValueError("reverse_step needs t >= 1")
    x_hat = np.asarray(x_hat, dtype=np.float64)
    ax = apply_adjacency(g, x_hat)
    tau = sched.taus
    prev = _filtered(x_hat, ax, sched.alpha * tau[t - 1])
    cur = _filtered(x_hat, ax, sched.alpha * tau[t])
    return LatentSignal(prev + sched.rho * (z_t.values - cur), t - 1)


def decompose_update(g: ItemGraph, sched: DiffusionSchedule, z_t: LatentSignal, x_hat):
    """Split the reverse update into ``(refine, sharpen)`` so that
    ``z_{t-1} = z_t + refine + sharpen``.

    refine  = (1 - rho) (F_t x_hat - z_t)
    sharpen = (tau_t - tau_{t-1}) alpha (I - A) x_hat
    """
    t = int(z_t.t)
    if t < 1:
        raise ValueError("decompose_update needs t >= 1")
    x_hat = np.asarray(x_hat, dtype=np.float64)
    ax = apply_adjacency(g, x_hat)
    tau = sched.taus
    refine = (1.0 - sched.rho) * (_filtered(x_hat, ax, sched.alpha * tau[t]) - z_t.values)
    sharpen = (tau[t] - tau[t - 1]) * sched.alpha * (x_hat - ax)
    return refine, sharpen
