"""Item-item graph: link-propagation similarity, spectral pieces, smoothing filters.

Signals are either a single length-``n_items`` vector or a ``(batch, n_items)``
block with one user per row. Nothing here allocates an ``n_items x n_items``
dense array.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from giffcf.binfmt import format_kv, parse_kv, read_sections, write_sections
from giffcf.seeding import derive_rng

log = logging.getLogger(__name__)

GRAPH_MAGIC = b"GIFFGRPH"


class ConfigError(ValueError):
    """Invalid hyper-parameter combination."""


class EigenSolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class GraphConfig:
    beta: float = 0.5
    gamma: float = 0.5
    delta: float = 0.5
    d: int = 200
    omega: float = 0.0

    def validate(self, n_items: int | None = None) -> "GraphConfig":
        if min(self.beta, self.gamma, self.delta) < 0:
            raise ConfigError("beta, gamma, delta must be nonnegative")
        if self.omega < 0:
            raise ConfigError("omega must be nonnegative")
        if self.d < 1:
            raise ConfigError("d must be at least 1")
        if self.omega > 0 and self.beta != self.delta:
            raise ConfigError("ideal low-pass term needs a symmetric similarity (beta == delta) when omega > 0")
        if n_items is not None and self.d > n_items:
            raise ConfigError(f"d={self.d} exceeds n_items={n_items}")
        return self

    @property
    def needs_eigs(self) -> bool:
        return self.omega > 0


def inv_power(values, p: float) -> np.ndarray:
    """Elementwise ``v ** -p`` with ``0 ** -p`` defined as 0."""
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros_like(values)
    nz = values > 0
    out[nz] = values[nz] ** (-p)
    return out


def similarity_factors(train: sp.csr_matrix, beta: float, gamma: float, delta: float):
    """Return ``(inner, outer)`` with ``A = outer.T @ inner``.

    ``inner = D_U^-gamma X D_I^-beta`` and ``outer = X D_I^-delta``; both keep
    the sparsity of the interaction matrix.
    """
    du = np.diff(train.indptr).astype(np.float64)
    di = np.bincount(train.indices, minlength=train.shape[1]).astype(np.float64)
    inner = (sp.diags(inv_power(du, gamma)) @ train @ sp.diags(inv_power(di, beta))).tocsr()
    outer = (train @ sp.diags(inv_power(di, delta))).tocsr()
    inner.sort_indices()
    outer.sort_indices()
    return inner, outer


def build_similarity(data, cfg: GraphConfig) -> sp.csr_matrix:
    """``D_I^-delta X^T D_U^-gamma X D_I^-beta`` on the train split, as sparse CSR."""
    inner, outer = similarity_factors(data.train, cfg.beta, cfg.gamma, cfg.delta)
    a = (outer.T.tocsr() @ inner).tocsr()
    a.sort_indices()
    return a


class NormEstimate(NamedTuple):
    value: float
    converged: bool
    iterations: int


def spectral_norm(A, tol: float = 1e-10, max_iter: int = 500, seed: int = 0, refine: bool = True) -> NormEstimate:
    """Largest singular value by power iteration on ``A^T A``.

    Stops when the relative change of the ``A^T A`` Rayleigh quotient drops
    below ``tol``. If that has not happened after ``max_iter`` products the
    estimate is refined by Lanczos; ``converged=False`` is reported only when
    that also fails, or when ``refine=False``.
    """
    n = A.shape[1]
    v = derive_rng(seed, "spectral_norm").uniform(0.5, 1.5, n)
    v /= np.linalg.norm(v)
    prev = 0.0
    for it in range(1, max_iter + 1):
        w = A.T @ (A @ v)
        lam = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            raise ValueError("spectral norm of a zero matrix is undefined")
        v = w / nrm
        if it > 1 and abs(lam - prev) <= tol * abs(lam):
            return NormEstimate(float(np.sqrt(lam)), True, it)
        prev = lam
    if not refine:
        log.warning("power iteration did not converge in %d iterations", max_iter)
        return NormEstimate(float(np.sqrt(prev)), False, max_iter)
    # nearly tied top singular values: finish with Lanczos on A^T A, which
    # separates them in far fewer products
    log.info("power iteration stalled after %d iterations, refining with Lanczos", max_iter)
    gram = spla.LinearOperator((n, n), matvec=lambda x: A.T @ (A @ x), matmat=lambda X: A.T @ (A @ X), dtype=np.float64)
    try:
        _, vals = truncated_eig(gram, 1, tol=tol, seed=seed)
    except EigenSolverError:
        log.warning("power iteration did not converge in %d iterations", max_iter)
        return NormEstimate(float(np.sqrt(prev)), False, max_iter)
    return NormEstimate(float(np.sqrt(max(vals[0], prev))), True, max_iter)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip columns so each one's largest-magnitude entry is positive."""
    if vecs.size == 0:
        return vecs
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def truncated_eig(A, d: int, tol: float = 1e-10, seed: int = 0, max_restarts: int = 3, check_every: int | None = None):
    """Top-``d`` algebraically largest eigenpairs of a symmetric matrix.

    Lanczos with full (twice-applied) reorthogonalization and a seeded start
    vector. A zero Krylov vector before the wanted pairs have converged
    triggers a restart with a fresh vector orthogonal to the basis so far.

    Returns ``(eigvecs, eigvals)`` with ``eigvals`` descending and
    ``eigvecs`` of shape ``(n, d)``.
    """
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    if not 1 <= d <= n:
        raise ValueError(f"need 1 <= d <= n, got d={d}, n={n}")
    rng = derive_rng(seed, "lanczos")
    check_every = check_every or max(5, d // 8)

    cap = min(n, max(2 * d + 20, 64))
    Q = np.empty((n, cap))
    alphas: list[float] = []
    betas: list[float] = []  # betas[k] couples q_k and q_{k+1}
    scale = 0.0
    restarts = 0

    def fresh(k):
        q = rng.standard_normal(n)
        for _ in range(2):
            q -= Q[:, :k] @ (Q[:, :k].T @ q)
        nrm = np.linalg.norm(q)
        if nrm < 1e-8:
            raise EigenSolverError("could not draw a start vector outside the current Krylov basis")
        return q / nrm

    def ritz(k):
        vals, vecs = sla.eigh_tridiagonal(np.asarray(alphas[:k]), np.asarray(betas[:k - 1]))
        order = np.argsort(vals)[::-1][:d]
        return vals[order], vecs[:, order]

    q = fresh(0)
    k = 0
    beta_prev = 0.0
    while True:
        if k == cap:
            cap = min(n, 2 * cap)
            Q = np.concatenate([Q, np.empty((n, cap - Q.shape[1]))], axis=1)
        Q[:, k] = q
        w = np.asarray(A @ q).ravel()
        alpha = float(q @ w)
        w -= alpha * q
        if k > 0:
            w -= beta_prev * Q[:, k - 1]
        for _ in range(2):
            w -= Q[:, :k + 1] @ (Q[:, :k + 1].T @ w)
        beta = float(np.linalg.norm(w))
        alphas.append(alpha)
        k += 1
        scale = max(scale, abs(alpha), beta)
        if k == n:
            break
        broke = beta <= 1e-12 * max(scale, 1e-300)
        if broke:
            # invariant subspace: restart to pick up eigenvalues the start
            # vector could not reach (e.g. repeated ones)
            if restarts == max_restarts:
                if k >= d:
                    break
                raise EigenSolverError(
                    f"Lanczos broke down {restarts + 1} times after {k} vectors; "
                    f"only {k} < d={d} directions are reachable from the start vectors"
                )
            restarts += 1
            log.debug("Lanczos breakdown at step %d, restart %d", k, restarts)
            betas.append(0.0)
            beta_prev = 0.0
            q = fresh(k)
        else:
            if k >= d and k % check_every == 0:
                vals, vecs = ritz(k)
                resid = np.abs(beta * vecs[-1, :])
                if np.all(resid <= tol * max(scale, np.max(np.abs(vals)))):
                    break
            betas.append(beta)
            beta_prev = beta
            q = w / beta

    vals, vecs = ritz(k)
    U = Q[:, :k] @ vecs
    # one Rayleigh-Ritz cleanup against roundoff in the accumulated basis
    U, _ = np.linalg.qr(U)
    AU = np.asarray(A @ U)
    H = U.T @ AU
    H = 0.5 * (H + H.T)
    hv, hs = np.linalg.eigh(H)
    order = np.argsort(hv)[::-1]
    vals, U = hv[order], U @ hs[:, order]
    return _fix_signs(U), vals


@dataclass
class ItemGraph:
    """Similarity ``A_lp`` plus the pieces of the combined unit-norm adjacency.

    The combined operator is
    ``A = (A_lp / ||A_lp||_2 + omega * U U^T) / (1 + omega)``.
    ``inner``/``outer`` are optional factors with ``A_lp = outer.T @ inner``;
    when present, products cost O(nnz(X)) per signal instead of O(nnz(A_lp)).
    """

    A_lp: sp.csr_matrix
    spectral_norm: float
    eigvecs: np.ndarray
    eigvals: np.ndarray
    config: GraphConfig
    inner: sp.csr_matrix | None = None
    outer: sp.csr_matrix | None = None
    norm_converged: bool = True
    _outer_t: sp.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.outer is not None and self._outer_t is None:
            self._outer_t = self.outer.T.tocsr()

    @property
    def n_items(self) -> int:
        return self.A_lp.shape[0]

    @property
    def omega(self) -> float:
        return self.config.omega

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_items or x.ndim > 2:
            raise ValueError(f"signal has shape {x.shape}, expected (..., {self.n_items})")
        return x

    def link_propagate(self, x) -> np.ndarray:
        """``A_lp x`` for a vector, or row-wise for a block."""
        x = self._check(x)
        if self.inner is not None:
            # A_lp = outer^T inner, so (A_lp x^T)^T = (outer^T (inner x^T))^T
            return np.asarray(self._outer_t @ (self.inner @ x.T)).T
        return np.asarray(self.A_lp @ x.T).T

    def project(self, x) -> np.ndarray:
        """Ideal low-pass projection ``U (U^T x)``."""
        x = self._check(x)
        if self.eigvecs.shape[1] == 0:
            return np.zeros_like(x)
        return (x @ self.eigvecs) @ self.eigvecs.T

    def save(self, path) -> None:
        cfg = asdict(self.config)
        cfg.update(n_items=self.n_items, spectral_norm=self.spectral_norm, norm_converged=int(self.norm_converged))
        sections = {
            "config": format_kv(cfg),
            "A_indptr": self.A_lp.indptr.astype(np.int64),
            "A_indices": self.A_lp.indices.astype(np.int64),
            "A_data": self.A_lp.data,
            "eigvals": self.eigvals,
            "eigvecs": self.eigvecs,
        }
        for name in ("inner", "outer"):
            mat = getattr(self, name)
            if mat is not None:
                sections[f"{name}_shape"] = np.asarray(mat.shape, dtype=np.int64)
                sections[f"{name}_indptr"] = mat.indptr.astype(np.int64)
                sections[f"{name}_indices"] = mat.indices.astype(np.int64)
                sections[f"{name}_data"] = mat.data
        write_sections(path, GRAPH_MAGIC, sections)

    @classmethod
    def load(cls, path) -> "ItemGraph":
        s = read_sections(path, GRAPH_MAGIC)
        kv = parse_kv(s["config"])
        n = int(kv["n_items"])
        cfg = GraphConfig(float(kv["beta"]), float(kv["gamma"]), float(kv["delta"]), int(kv["d"]), float(kv["omega"]))
        A = sp.csr_matrix((s["A_data"], s["A_indices"], s["A_indptr"]), shape=(n, n))
        factors = {}
        for name in ("inner", "outer"):
            if f"{name}_data" in s:
                shape = tuple(int(v) for v in s[f"{name}_shape"])
                factors[name] = sp.csr_matrix((s[f"{name}_data"], s[f"{name}_indices"], s[f"{name}_indptr"]), shape=shape)
        return cls(
            A,
            float(kv["spectral_norm"]),
            s["eigvecs"].reshape(n, -1),
            s["eigvals"],
            cfg,
            norm_converged=bool(int(kv.get("norm_converged", 1))),
            **factors,
        )


def build_item_graph(data, cfg: GraphConfig, seed: int = 0, eig_tol: float = 1e-10) -> ItemGraph:
    """Similarity, its spectral norm, and (when ``omega > 0``) the top-``d`` eigenpairs."""
    cfg.validate(data.n_items)
    inner, outer = similarity_factors(data.train, cfg.beta, cfg.gamma, cfg.delta)
    A = (outer.T.tocsr() @ inner).tocsr()
    A.sort_indices()
    if A.nnz == 0:
        raise ValueError("similarity matrix is empty")
    norm = spectral_norm(A, seed=seed)
    if cfg.needs_eigs:
        vecs, vals = truncated_eig(A, cfg.d, tol=eig_tol, seed=seed)
    else:
        vecs, vals = np.zeros((data.n_items, 0)), np.zeros(0)
    return ItemGraph(A, norm.value, vecs, vals, cfg, inner=inner, outer=outer, norm_converged=norm.converged)


def apply_adjacency(g: ItemGraph, x) -> np.ndarray:
    """Combined adjacency ``(A_lp x / ||A_lp|| + omega U U^T x) / (1 + omega)``."""
    y = g.link_propagate(x) / g.spectral_norm
    if g.omega > 0:
        y = y + g.omega * g.project(x)
    return y / (1.0 + g.omega)


def forward_filter(g: ItemGraph, alpha: float, tau, x) -> np.ndarray:
    """``F x = (1 - tau*alpha) x + tau*alpha A x``.

    ``tau`` may be a scalar or, for a ``(batch, n_items)`` block, one value per row.
    """
    x = g._check(x)
    ta = alpha * np.asarray(tau, dtype=np.float64)
    if ta.ndim == 1:
        ta = ta[:, None]
    if np.all(ta == 0):
        return x.copy()
    return (1.0 - ta) * x + ta * apply_adjacency(g, x)
