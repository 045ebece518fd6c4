"""Two-stage denoiser with hand-written reverse-mode gradients and Adam.

Stage 1 embeds the normalized latent and history with a shared item
embedding ``W``, mixes them per embedding dimension together with a timestep
channel, and decodes with ``W^T``. Stage 2 mixes, per item, the decoded score
with the history, its smoothed version and a scalar timestep channel.

Everything is batched: signals are ``(batch, n_items)`` blocks, one user per
row, and the loss is the batch mean of per-user squared errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.special import expit

from giffcf.graph import apply_adjacency
from giffcf.seeding import derive_rng

EPS_NORM = 1e-12
Z_NORMS = ("item_count", "l2")


def swish(x):
    return x * expit(x)


def swish_grad(x):
    s = expit(x)
    return s + x * s * (1.0 - s)


def sinusoidal(t, dim: int) -> np.ndarray:
    """``[sin(t f_k), cos(t f_k)]`` with frequencies ``f_k`` geometric from 1 down to 1e-4."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(1e4) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        out = np.concatenate([out, np.zeros((len(t), 1))], axis=1)
    return out


@dataclass
class MLP:
    """One hidden layer with Swish, linear output, applied over the last axis."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def forward(self, x):
        a = x @ self.w1 + self.b1
        h = swish(a)
        return h @ self.w2 + self.b2, (x, a, h)

    def backward(self, dout, cache):
        x, a, h = cache
        lead = tuple(range(dout.ndim - 1))
        dw2 = np.tensordot(h, dout, axes=(lead, lead))
        db2 = dout.sum(axis=lead)
        da = (dout @ self.w2.T) * swish_grad(a)
        dw1 = np.tensordot(x, da, axes=(lead, lead))
        db1 = da.sum(axis=lead)
        return da @ self.w1.T, MLP(dw1, db1, dw2, db2)

    @classmethod
    def glorot(cls, rng, n_in, n_hidden, n_out) -> "MLP":
        return cls(_glorot(rng, n_in, n_hidden), np.zeros(n_hidden), _glorot(rng, n_hidden, n_out), np.zeros(n_out))


def _glorot(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass(frozen=True)
class DenoiserConfig:
    n_items: int
    d: int = 200
    d_time: int = 64
    hidden_mult: int = 1
    z_norm: str = "item_count"
    use_latent: bool = True
    use_precond: bool = True
    use_postcond: bool = True

    def __post_init__(self):
        if self.z_norm not in Z_NORMS:
            raise ValueError(f"z_norm must be one of {Z_NORMS}, got {self.z_norm!r}")
        if min(self.n_items, self.d, self.d_time, self.hidden_mult) < 1:
            raise ValueError("sizes must be positive")

    @property
    def hidden(self) -> int:
        return 2 * self.hidden_mult


@dataclass
class DenoiserParams:
    W: np.ndarray
    embed_mixer: MLP
    score_mixer: MLP
    time_enc1: MLP
    time_enc2: MLP
    config: DenoiserConfig = field(compare=False)

    def tensors(self) -> dict:
        """Flat ``name -> array`` view, in a fixed order."""
        out = {"W": self.W}
        for part in ("embed_mixer", "score_mixer", "time_enc1", "time_enc2"):
            mlp = getattr(self, part)
            for f in fields(MLP):
                out[f"{part}.{f.name}"] = getattr(mlp, f.name)
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, config: DenoiserConfig) -> "DenoiserParams":
        parts = {}
        for part in ("embed_mixer", "score_mixer", "time_enc1", "time_enc2"):
            parts[part] = MLP(*(np.asarray(tensors[f"{part}.{f.name}"], dtype=np.float64) for f in fields(MLP)))
        return cls(np.asarray(tensors["W"], dtype=np.float64), config=config, **parts)

    def map(self, fn, *others) -> "DenoiserParams":
        """Apply ``fn`` tensor-wise across this and other same-shaped params."""
        mine = self.tensors()
        theirs = [o.tensors() for o in others]
        return DenoiserParams.from_tensors({k: fn(v, *(t[k] for t in theirs)) for k, v in mine.items()}, self.config)

    def copy(self) -> "DenoiserParams":
        return self.map(np.copy)

    def zeros_like(self) -> "DenoiserParams":
        return self.map(np.zeros_like)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors().values())


def init_params(config: DenoiserConfig, seed: int = 0) -> DenoiserParams:
    """Glorot-uniform weights, zero biases."""
    rng = derive_rng(seed, "denoiser_init")
    n, d, p, h = config.n_items, config.d, config.d_time, config.hidden
    W = _glorot(rng, n, d)
    embed = MLP.glorot(rng, 3, h, 1)
    score = MLP.glorot(rng, 4, h, 1)
    t1 = MLP.glorot(rng, p, p, d)
    t2 = MLP.glorot(rng, p, p, 1)
    return DenoiserParams(W, embed, score, t1, t2, config)


@dataclass
class DenoiseOutput:
    x_hat: np.ndarray
    x_mid: np.ndarray


def _prepare(p: DenoiserParams, z, c, ac, t):
    cfg = p.config
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    ac = np.atleast_2d(np.asarray(ac, dtype=np.float64))
    for name, arr in (("z_t", z), ("c", c), ("Ac", ac)):
        if arr.shape[1] != cfg.n_items:
            raise ValueError(f"{name} has {arr.shape[1]} items, expected {cfg.n_items}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contains non-finite values")
    t = np.broadcast_to(np.asarray(t), (z.shape[0],))
    return z, c, ac, t


def _forward(p: DenoiserParams, z, c, ac, t):
    cfg = p.config
    B = z.shape[0]
    c_hat = c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), EPS_NORM)
    if cfg.z_norm == "item_count":
        z_hat = z / cfg.n_items
    else:
        z_hat = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), EPS_NORM)
    e_z = z_hat @ p.W if cfg.use_latent else np.zeros((B, cfg.d))
    e_c = c_hat @ p.W if cfg.use_precond else np.zeros((B, cfg.d))
    phi = sinusoidal(t, cfg.d_time)
    e_t, t1_cache = p.time_enc1.forward(phi)
    s_t, t2_cache = p.time_enc2.forward(phi)

    stage1_in = np.stack([e_z, e_c, e_t], axis=-1)
    m, embed_cache = p.embed_mixer.forward(stage1_in)
    # channel slices are strided; BLAS needs contiguous operands to be fast
    m = np.ascontiguousarray(m[..., 0])
    x_mid = m @ p.W.T

    post = 1.0 if cfg.use_postcond else 0.0
    stage2_in = np.stack(
        [x_mid, post * ac, post * c, np.broadcast_to(s_t, x_mid.shape)], axis=-1
    )
    x_hat, score_cache = p.score_mixer.forward(stage2_in)
    cache = dict(
        c_hat=c_hat, z_hat=z_hat, m=m, t1=t1_cache, t2=t2_cache, embed=embed_cache, score=score_cache
    )
    return x_hat[..., 0], x_mid, cache


def _smoothed_history(g, c, ac):
    if ac is not None:
        return ac
    if g is None:
        raise ValueError("need either the item graph or a precomputed Ac")
    return apply_adjacency(g, c)


def denoise(p: DenoiserParams, g, z_t, c, t, ac=None) -> DenoiseOutput:
    """Predict clean interactions from latent ``z_t`` and history ``c`` at step ``t``.

    ``ac`` (the combined adjacency applied to ``c``) is computed from ``g``
    unless given. Inputs may be single vectors or ``(batch, n_items)``
    blocks; outputs follow the input rank.
    """
    single = np.ndim(z_t) == 1
    ac = _smoothed_history(g, c, ac)
    z, c2, ac2, tt = _prepare(p, z_t, c, ac, t)
    x_hat, x_mid, _ = _forward(p, z, c2, ac2, tt)
    if single:
        return DenoiseOutput(x_hat[0], x_mid[0])
    return DenoiseOutput(x_hat, x_mid)


def loss_and_grad(p: DenoiserParams, g, z_t, c, t, x, ac=None):
    """Batch-mean squared error ``||x_hat - x||^2`` and its exact gradients."""
    ac = _smoothed_history(g, c, ac)
    z, c2, ac2, tt = _prepare(p, z_t, c, ac, t)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = z.shape[0]
    cfg = p.config
    x_hat, x_mid, k = _forward(p, z, c2, ac2, tt)
    resid = x_hat - x
    loss = float(np.sum(resid * resid) / B)

    d_xhat = (2.0 / B) * resid
    d_stage2, g_score = p.score_mixer.backward(d_xhat[..., None], k["score"])
    d_xmid = np.ascontiguousarray(d_stage2[..., 0])
    d_st = d_stage2[..., 3].sum(axis=1, keepdims=True)

    # decoder path of the shared embedding
    gW = d_xmid.T @ k["m"]
    d_m = d_xmid @ p.W
    d_stage1, g_embed = p.embed_mixer.backward(d_m[..., None], k["embed"])
    # encoder paths
    if cfg.use_latent:
        gW += k["z_hat"].T @ np.ascontiguousarray(d_stage1[..., 0])
    if cfg.use_precond:
        gW += k["c_hat"].T @ np.ascontiguousarray(d_stage1[..., 1])
    _, g_t1 = p.time_enc1.backward(d_stage1[..., 2], k["t1"])
    _, g_t2 = p.time_enc2.backward(d_st, k["t2"])

    grads = DenoiserParams(gW, g_embed, g_score, g_t1, g_t2, cfg)
    return loss, grads


@dataclass
class AdamState:
    m: DenoiserParams
    v: DenoiserParams
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, p: DenoiserParams) -> "AdamState":
        return cls(p.zeros_like(), p.zeros_like())


def adam_step(p: DenoiserParams, grads: DenoiserParams, state: AdamState, lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam applied tensor-wise. Returns new ``(params, state)``.

    A non-finite gradient leaves everything untouched except ``state.skipped``.
    """
    if not grads.all_finite():
        return p, replace(state, skipped=state.skipped + 1)
    step = state.step + 1
    m = state.m.map(lambda m_, g: beta1 * m_ + (1 - beta1) * g, grads)
    v = state.v.map(lambda v_, g: beta2 * v_ + (1 - beta2) * g * g, grads)
    c1 = 1 - beta1 ** step
    c2 = 1 - beta2 ** step
    new = p.map(lambda w, m_, v_: w - lr * (m_ / c1) / (np.sqrt(v_ / c2) + eps), m, v)
    return new, AdamState(m, v, step, state.skipped)
