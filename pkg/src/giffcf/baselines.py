"""Training-free graph-filter scorers: LinkProp, GF-CF and the GiffCF adjacency alone.

Scores may differ from the textbook formulas by positive constants; only the
induced ranking matters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from itertools import product

import numpy as np

from giffcf.graph import ConfigError, GraphConfig, ItemGraph, apply_adjacency, build_item_graph, inv_power, truncated_eig

log = logging.getLogger(__name__)

KINDS = ("linkprop", "gfcf_he", "gfcf_idl", "gfcf_blend", "giffcf_adjacency")
# small grid for LinkProp exponents (beta = delta keeps the similarity symmetric)
LINKPROP_GRID = {"beta": (0.0, 0.25, 0.5), "gamma": (0.5, 1.0)}


@dataclass(frozen=True)
class FilterSpec:
    kind: str
    beta: float = 0.5
    gamma: float = 0.5
    delta: float = 0.5
    d: int = 200
    omega: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown filter kind {self.kind!r}; expected one of {KINDS}")
        if self.kind.startswith("gfcf") and (self.beta, self.gamma, self.delta) != (0.5, 1.0, 0.5):
            raise ConfigError("GF-CF filters use beta=delta=1/2, gamma=1")
        if self.omega < 0 or self.d < 1:
            raise ConfigError("omega must be nonnegative and d positive")

    @classmethod
    def gfcf(cls, kind: str = "gfcf_blend", d: int = 200, omega: float = 0.3) -> "FilterSpec":
        return cls(kind, 0.5, 1.0, 0.5, d, omega)

    @property
    def needs_eigs(self) -> bool:
        return self.kind == "gfcf_idl" or (self.kind == "gfcf_blend" and self.omega > 0)

    @property
    def graph_config(self) -> GraphConfig:
        omega = self.omega if self.kind == "giffcf_adjacency" else 0.0
        return GraphConfig(self.beta, self.gamma, self.delta, self.d, omega)


class GraphFilter:
    """A :class:`FilterSpec` bound to the graph artifacts it needs."""

    def __init__(self, spec: FilterSpec, graph: ItemGraph, item_degrees: np.ndarray, seed: int = 0):
        cfg = graph.config
        if (cfg.beta, cfg.gamma, cfg.delta) != (spec.beta, spec.gamma, spec.delta):
            raise ConfigError("graph exponents do not match the filter spec")
        if spec.kind == "giffcf_adjacency" and cfg.omega != spec.omega:
            raise ConfigError("graph omega does not match the filter spec")
        self.spec = spec
        self.graph = graph
        deg = np.asarray(item_degrees, dtype=np.float64)
        self._d_half = np.sqrt(deg)
        self._d_neg_half = inv_power(deg, 0.5)
        self.U = None
        if spec.needs_eigs:
            if graph.eigvecs.shape[1] >= spec.d:
                self.U = graph.eigvecs[:, :spec.d]
            else:
                self.U, _ = truncated_eig(graph.A_lp, spec.d, seed=seed)

    def idl(self, x) -> np.ndarray:
        """``D_I^{1/2} U U^T D_I^{-1/2} x`` on the eigenbasis of the graph."""
        if self.U is None:
            raise ConfigError("this filter has no ideal low-pass component")
        return ((x * self._d_neg_half) @ self.U) @ self.U.T * self._d_half

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        kind = self.spec.kind
        if kind == "giffcf_adjacency":
            return apply_adjacency(self.graph, x)
        if kind in ("linkprop", "gfcf_he"):
            return self.graph.link_propagate(x)
        if kind == "gfcf_idl":
            return self.idl(x)
        y = self.graph.link_propagate(x)
        if self.spec.omega > 0:
            y = y + self.spec.omega * self.idl(x)
        return y


def build_filter(spec: FilterSpec, data, seed: int = 0, graph: ItemGraph | None = None) -> GraphFilter:
    if graph is None:
        cfg = spec.graph_config
        if not cfg.needs_eigs and cfg.d > data.n_items:
            cfg = replace(cfg, d=data.n_items)  # d is unused without the projector
        graph = build_item_graph(data, cfg, seed=seed)
    return GraphFilter(spec, graph, data.item_degrees, seed=seed)


def filter_scores(spec: FilterSpec, data, c, graph: ItemGraph | None = None) -> np.ndarray:
    """Apply the filter of ``spec`` to history ``c`` (vector or row block)."""
    return build_filter(spec, data, graph=graph)(c)


def tune_linkprop(data, grid: dict | None = None, seed: int = 0, split: str = "val"):
    """Pick LinkProp exponents by Recall@20 on ``split``.

    Returns ``(best spec, {spec: recall})``. ``delta`` is tied to ``beta``.
    """
    from giffcf.metrics import evaluate

    grid = grid or LINKPROP_GRID
    results = {}
    for beta, gamma in product(grid["beta"], grid["gamma"]):
        spec = FilterSpec("linkprop", beta, gamma, beta)
        f = build_filter(spec, data, seed=seed)
        rep = evaluate(lambda u: f(data.rows(u)), data, split, (20,))
        results[spec] = rep[("recall", 20)]
        log.info("linkprop beta=delta=%g gamma=%g: recall@20 %.4f", beta, gamma, results[spec])
    best = max(results, key=lambda s: (results[s], -s.beta, -s.gamma))
    return best, results
