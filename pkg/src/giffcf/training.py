"""Minibatch training with history dropout, validation-driven early stopping, checkpoints."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from giffcf.binfmt import format_kv, parse_kv, read_sections, write_sections
from giffcf.dataio import dropout_history
from giffcf.denoiser import (
    AdamState,
    DenoiserConfig,
    DenoiserParams,
    adam_step,
    init_params,
    loss_and_grad,
)
from giffcf.diffusion import DiffusionSchedule, forward_sample
from giffcf.graph import GraphConfig, ItemGraph, apply_adjacency
from giffcf.seeding import derive_rng

log = logging.getLogger(__name__)

MODEL_MAGIC = b"GIFFMODL"
LOG_COLUMNS = ("epoch", "train_loss", "val_recall@20", "wall_seconds")


@dataclass(frozen=True)
class TrainConfig:
    # batch size, lr, rho and omega were picked by validation Recall@20 on
    # MovieLens-1M; the others are the usual GiffCF settings
    batch_size: int = 16
    lr: float = 1e-3
    dropout_rate: float = 0.5
    T: int = 3
    alpha: float = 1.5
    sigma_T: float = 0.0
    rho: float = 0.1
    d: int = 200
    d_time: int = 64
    omega: float = 0.3
    beta: float = 0.5
    gamma: float = 0.5
    delta: float = 0.5
    max_epochs: int = 300
    patience: int = 10
    eval_cutoffs: tuple = (20,)
    seed: int = 0
    w_t: float = 1.0
    z_norm: str = "item_count"

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.w_t != 1.0:
            raise ValueError("w_t is fixed at 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be positive and max_epochs nonnegative")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if 20 not in self.eval_cutoffs:
            object.__setattr__(self, "eval_cutoffs", tuple(sorted({*self.eval_cutoffs, 20})))
        # schedule/denoiser validation happens in their own constructors
        self.schedule()
        self.denoiser_config(max(self.d, 1))

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.T, self.alpha, self.sigma_T, self.rho)

    def graph_config(self) -> GraphConfig:
        return GraphConfig(self.beta, self.gamma, self.delta, self.d, self.omega)

    def denoiser_config(self, n_items: int) -> DenoiserConfig:
        return DenoiserConfig(n_items, self.d, self.d_time, z_norm=self.z_norm)

    def to_text(self) -> str:
        return format_kv(asdict(self))

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        """Build from string or typed values; unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        kw = {}
        for key, raw in values.items():
            default = known[key].default
            kw[key] = _coerce(raw, default)
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_dict(parse_kv(text))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _coerce(raw, default):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else type(default)(raw)
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    return type(default)(raw)


@dataclass
class TrainState:
    params: DenoiserParams
    adam: AdamState
    skipped_batches: int = 0


def train_step(state: TrainState, g: ItemGraph, sched: DiffusionSchedule, x, cfg: TrainConfig,
               rng: np.random.Generator, ax=None):
    """One gradient step on a ``(batch, n_items)`` block of user rows.

    Each row gets its own dropout mask and timestep. ``ax`` optionally holds
    the adjacency applied to ``x`` (it does not change between epochs).
    Returns ``(mean loss, new state)``; a non-finite loss leaves the
    parameters untouched and bumps ``skipped_batches``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    B = x.shape[0]
    c = dropout_history(x, cfg.dropout_rate, rng)
    t = rng.integers(1, sched.T + 1, size=B)
    if ax is None:
        ax = apply_adjacency(g, x)
    ta = (sched.alpha * sched.taus[t])[:, None]
    z = x + ta * (ax - x)
    sig = sched.sigmas[t]
    if np.any(sig > 0):
        z = z + sig[:, None] * rng.standard_normal(z.shape)
    ac = apply_adjacency(g, c)
    with np.errstate(over="ignore", invalid="ignore"):  # a blown-up batch is skipped below
        loss, grads = loss_and_grad(state.params, None, z, c, t, x, ac=ac)
    if not np.isfinite(loss):
        return loss, replace(state, skipped_batches=state.skipped_batches + 1)
    params, adam = adam_step(state.params, grads, state.adam, lr=cfg.lr)
    return loss, TrainState(params, adam, state.skipped_batches)


@dataclass
class FitResult:
    params: DenoiserParams
    best_epoch: int
    best_val: float
    log: list = field(default_factory=list)  # rows of (epoch, loss, val_recall, wall)
    state: TrainState | None = None


def val_recall20(params, g, sched, data, batch_size: int = 1024) -> float:
    from giffcf.inference import infer
    from giffcf.metrics import evaluate

    def scorer(users):
        return infer(params, g, sched, data.rows(users, "train"))

    return evaluate(scorer, data, "val", (20,), batch_size=batch_size)[("recall", 20)]


def fit(data, g: ItemGraph, cfg: TrainConfig, log_path=None, checkpoint_path=None,
        params: DenoiserParams | None = None) -> FitResult:
    """Epoch-shuffled sweeps over training users with early stopping on validation Recall@20.

    When ``log_path`` is given every epoch is appended to it as it finishes;
    ``checkpoint_path`` receives the best-so-far model.
    """
    sched = cfg.schedule()
    if params is None:
        params = init_params(cfg.denoiser_config(data.n_items), cfg.seed)
    state = TrainState(params, AdamState.zeros(params))
    users = np.flatnonzero(data.user_degrees > 0)
    if len(users) == 0:
        raise ValueError("no users with training interactions")
    X = data.rows(np.arange(data.n_users), "train")
    AX = apply_adjacency(g, X)
    if log_path is not None:
        _start_log(log_path)

    best = FitResult(state.params.copy(), 0, -np.inf, [], state)
    since_best = 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        rng = derive_rng(cfg.seed, "train_epoch", epoch)
        order = rng.permutation(users)
        losses, sizes = [], []
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            loss, state = train_step(state, g, sched, X[rows], cfg, rng, ax=AX[rows])
            if np.isfinite(loss):
                losses.append(loss)
                sizes.append(len(rows))
        mean_loss = float(np.average(losses, weights=sizes)) if losses else float("nan")
        val = val_recall20(state.params, g, sched, data)
        wall = time.perf_counter() - t0
        row = (epoch, mean_loss, val, wall)
        best.log.append(row)
        if log_path is not None:
            _append_log(log_path, row)
        log.info("epoch %d loss %.5f val_recall@20 %.5f (%.1fs)", epoch, mean_loss, val, wall)
        if val > best.best_val:
            best.params, best.best_epoch, best.best_val = state.params.copy(), epoch, val
            since_best = 0
            if checkpoint_path is not None:
                save_model(checkpoint_path, best.params, state.adam, cfg, epoch)
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    best.state = state
    return best


def _start_log(path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not path.exists() or path.stat().st_size == 0:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_COLUMNS)


def _append_log(path, row) -> None:
    epoch, loss, val, wall = row
    with open(path, "a", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerow([epoch, repr(loss), repr(val), f"{wall:.3f}"])


def read_log(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
            raise ValueError(f"{path}: unexpected log header {reader.fieldnames}")
        return [(int(r["epoch"]), float(r["train_loss"]), float(r["val_recall@20"]), float(r["wall_seconds"]))
                for r in reader]


def save_model(path, params: DenoiserParams, adam: AdamState | None, cfg: TrainConfig, epoch: int = 0) -> None:
    """Parameters, Adam moments and step, plus the training config echo."""
    meta = dict(asdict(params.config), epoch=epoch, adam_step=adam.step if adam else 0,
                adam_skipped=adam.skipped if adam else 0)
    sections = {"denoiser": format_kv(meta), "train_config": cfg.to_text()}
    for name, arr in params.tensors().items():
        sections[f"param.{name}"] = arr
    if adam is not None:
        for name, arr in adam.m.tensors().items():
            sections[f"adam_m.{name}"] = arr
        for name, arr in adam.v.tensors().items():
            sections[f"adam_v.{name}"] = arr
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_sections(path, MODEL_MAGIC, sections)


@dataclass
class ModelCheckpoint:
    params: DenoiserParams
    adam: AdamState | None
    config: TrainConfig
    epoch: int


def load_model(path) -> ModelCheckpoint:
    s = read_sections(path, MODEL_MAGIC)
    meta = parse_kv(s["denoiser"])
    dcfg = DenoiserConfig(
        int(meta["n_items"]), int(meta["d"]), int(meta["d_time"]), int(meta["hidden_mult"]), meta["z_norm"],
        meta["use_latent"] == "True", meta["use_precond"] == "True", meta["use_postcond"] == "True",
    )

    def group(prefix):
        return {k[len(prefix):]: v for k, v in s.items() if k.startswith(prefix)}

    params = DenoiserParams.from_tensors(group("param."), dcfg)
    adam = None
    if any(k.startswith("adam_m.") for k in s):
        adam = AdamState(DenoiserParams.from_tensors(group("adam_m."), dcfg),
                         DenoiserParams.from_tensors(group("adam_v."), dcfg),
                         int(meta["adam_step"]), int(meta["adam_skipped"]))
    return ModelCheckpoint(params, adam, TrainConfig.from_text(s["train_config"]), int(meta["epoch"]))
