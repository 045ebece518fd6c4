import numpy as np
import pytest
import scipy.sparse as sp

from giffcf.dataio import InteractionDataset
from giffcf.graph import GraphConfig, ItemGraph, build_item_graph, spectral_norm, truncated_eig


def random_symmetric(n, density, rng):
    m = sp.random(n, n, density=density, random_state=rng, data_rvs=rng.standard_normal)
    return sp.csr_matrix(m + m.T)


def graph_from_matrix(A, omega=0.0, d=None, seed=0):
    """ItemGraph around an arbitrary symmetric matrix (no interaction factors)."""
    A = sp.csr_matrix(A, dtype=np.float64)
    n = A.shape[0]
    norm = spectral_norm(A, seed=seed).value
    if omega > 0:
        vecs, vals = truncated_eig(A, d, seed=seed)
    else:
        vecs, vals = np.zeros((n, 0)), np.zeros(0)
    return ItemGraph(A, norm, vecs, vals, GraphConfig(0.5, 0.5, 0.5, d or 1, omega))


def dense_adjacency(g):
    """Combined adjacency as an explicit dense matrix (test oracle only)."""
    A = g.A_lp.toarray() / g.spectral_norm
    if g.omega > 0:
        A = A + g.omega * g.eigvecs @ g.eigvecs.T
    return A / (1.0 + g.omega)


def planted_dataset(n_users=20, n_items=30, n_blocks=3, p_in=0.6, seed=0, val_frac=0.0):
    """Users and items split into blocks; users mostly interact inside their block."""
    rng = np.random.default_rng(seed)
    ublock = np.arange(n_users) % n_blocks
    iblock = np.arange(n_items) % n_blocks
    prob = np.where(ublock[:, None] == iblock[None, :], p_in, 0.02)
    X = rng.random((n_users, n_items)) < prob
    X[np.arange(n_users), ublock] = True  # nonempty history
    train, val = [], []
    for u, i in zip(*np.nonzero(X)):
        (val if rng.random() < val_frac and i != ublock[u] else train).append((u, i))
    return InteractionDataset.from_pairs(n_users, n_items, train, val, [])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_data():
    # users: 0 -> {0, 1}, 1 -> {1, 2}, 2 -> {2, 3}, 3 -> {0, 3, 4}
    train = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (3, 0), (3, 3), (3, 4)]
    val = [(0, 2), (1, 3)]
    test = [(0, 4), (2, 0), (3, 1)]
    return InteractionDataset.from_pairs(4, 5, train, val, test)


@pytest.fixture
def planted():
    return planted_dataset(60, 40, seed=1, val_frac=0.2)


@pytest.fixture
def planted_graph(planted):
    return build_item_graph(planted, GraphConfig(d=6, omega=0.2))


# -- acceptance reporting ------------------------------------------------------

_CRITERIA = {}


class CriterionLog:
    """Collects one verdict per acceptance criterion for the end-of-run summary."""

    def record(self, number, ok, detail):
        _CRITERIA[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        return bool(ok)


@pytest.fixture
def criterion():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
