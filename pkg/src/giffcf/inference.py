"""Reverse sampling from the smoothed history, and top-K ranking."""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from giffcf.denoiser import DenoiserParams, denoise
from giffcf.diffusion import DiffusionSchedule, LatentSignal, reverse_step
from giffcf.graph import ItemGraph, apply_adjacency


class NumericalError(FloatingPointError):
    pass


# (z_t, c, t, Ac) -> x_hat
DenoiseFn = Callable[[np.ndarray, np.ndarray, int, np.ndarray], np.ndarray]


def _model_fn(p: DenoiserParams) -> DenoiseFn:
    def fn(z, c, t, ac):
        return denoise(p, None, z, c, t, ac=ac).x_hat
    return fn


def infer(p, g: ItemGraph, sched: DiffusionSchedule, c, trajectory: bool = False):
    """Map history ``c`` to preference scores ``z_0``.

    Starts from ``z_T = F_T c`` and applies ``T`` deterministic reverse steps.
    ``p`` is either trained :class:`DenoiserParams` or any callable
    ``(z_t, c, t, Ac) -> x_hat`` (e.g. an oracle in tests). With
    ``trajectory=True`` the list ``[z_T, ..., z_0]`` is returned instead.
    """
    fn = p if callable(p) else _model_fn(p)
    c = np.asarray(c, dtype=np.float64)
    ac = apply_adjacency(g, c)
    ta = sched.alpha * sched.taus[sched.T]
    z = LatentSignal(c + ta * (ac - c), sched.T)
    path = [z.values]
    for t in range(sched.T, 0, -1):
        x_hat = fn(z.values, c, t, ac)
        _check_finite(x_hat, f"denoiser output at t={t}")
        z = reverse_step(g, sched, z, x_hat)
        _check_finite(z.values, f"latent at t={z.t}")
        path.append(z.values)
    return path if trajectory else z.values


def _check_finite(values, what):
    bad = ~np.isfinite(np.atleast_2d(values))
    if bad.any():
        row, item = np.argwhere(bad)[0]
        raise NumericalError(f"non-finite {what}: {int(bad.sum())} entries, first at row {row}, item {item}")


class TopK(NamedTuple):
    items: list
    scores: list
    truncated: bool


def mask_history(scores, history) -> np.ndarray:
    """Copy of ``scores`` with history items set to ``-inf``."""
    out = np.array(scores, dtype=np.float64, copy=True)
    out[np.asarray(history) > 0] = -np.inf
    return out


def recommend_topk(scores, history, k: int) -> TopK:
    """Top-``k`` unseen items, ties broken by ascending item index."""
    if k < 1:
        raise ValueError("k must be at least 1")
    masked = mask_history(scores, history) if history is not None else np.asarray(scores, dtype=np.float64)
    order = np.argsort(-masked, kind="stable")
    n_open = int(np.sum(np.isfinite(masked)))
    top = order[:min(k, n_open)]
    return TopK(top.tolist(), masked[top].tolist(), k > n_open)


def rank_block(scores: np.ndarray, k: int, exclude=None) -> np.ndarray:
    """Row-wise top-``k`` item indices of a score block.

    ``exclude`` is an optional sparse matrix of items to mask per row.
    Ties go to the lower item index.
    """
    scores = np.array(scores, dtype=np.float64, copy=True)
    if exclude is not None:
        rows, cols = exclude.nonzero()
        scores[rows, cols] = -np.inf
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]
