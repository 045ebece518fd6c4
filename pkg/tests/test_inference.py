import numpy as np
import pytest

from giffcf.denoiser import DenoiserConfig, denoise, init_params
from giffcf.diffusion import DiffusionSchedule, smooth
from giffcf.graph import apply_adjacency
from giffcf.inference import NumericalError, infer, mask_history, rank_block, recommend_topk


def oracle(x):
    return lambda z, c, t, ac: x


@pytest.mark.parametrize("rho", [0.1, 0.5, 1.0])
def test_oracle_round_trip(planted_graph, rng, rho):
    x = (rng.random((10, planted_graph.n_items)) < 0.3).astype(float)
    sched = DiffusionSchedule(rho=rho)
    # prior built from x itself, so the oracle denoiser must reproduce it exactly
    z0 = infer(oracle(x), planted_graph, sched, x)
    np.testing.assert_allclose(z0, x, atol=1e-12)


def test_single_step_closed_form(planted_graph, rng):
    n = planted_graph.n_items
    p = init_params(DenoiserConfig(n, 4, 8), 1)
    c = (rng.random(n) < 0.3).astype(float)
    sched = DiffusionSchedule(T=1, alpha=1.5, rho=1.0)
    z1 = smooth(planted_graph, sched, c, 1)
    xh = denoise(p, planted_graph, z1, c, 1).x_hat
    expected = z1 + 1.5 * (xh - apply_adjacency(planted_graph, xh))
    np.testing.assert_allclose(infer(p, planted_graph, sched, c), expected, atol=1e-12)


def test_zero_history_zero_network(planted_graph):
    n = planted_graph.n_items
    p = init_params(DenoiserConfig(n, 4, 8)).zeros_like()
    traj = infer(p, planted_graph, DiffusionSchedule(), np.zeros(n), trajectory=True)
    assert len(traj) == 4
    for z in traj:
        np.testing.assert_array_equal(z, 0.0)


def test_infer_deterministic_and_batched(planted, planted_graph):
    p = init_params(DenoiserConfig(planted.n_items, 4, 8), 2)
    sched = DiffusionSchedule(rho=0.5)
    block = planted.rows(np.arange(5))
    a = infer(p, planted_graph, sched, block)
    b = infer(p, planted_graph, sched, block)
    assert a.tobytes() == b.tobytes()
    for r in range(5):
        np.testing.assert_allclose(infer(p, planted_graph, sched, block[r]), a[r], atol=1e-12)


def test_infer_non_finite_aborts(planted_graph):
    n = planted_graph.n_items

    def bad(z, c, t, ac):
        out = np.zeros_like(z)
        out[..., 3] = np.inf
        return out

    with pytest.raises(NumericalError, match="item 3"):
        infer(bad, planted_graph, DiffusionSchedule(), np.ones(n))


def test_topk_examples():
    s = np.array([0.1, 0.9, 0.5])
    assert recommend_topk(s, np.zeros(3), 2).items == [1, 2]
    assert recommend_topk(np.ones(5), np.zeros(5), 3).items == [0, 1, 2]
    assert recommend_topk(s, np.array([0, 1, 0]), 2).items == [2, 0]


def test_topk_truncated_flag():
    top = recommend_topk(np.array([0.3, 0.2, 0.1]), np.array([1, 0, 1]), 3)
    assert top.items == [1]
    assert top.truncated
    assert not recommend_topk(np.array([0.3, 0.2]), np.zeros(2), 2).truncated
    with pytest.raises(ValueError):
        recommend_topk(np.ones(3), np.zeros(3), 0)


def test_topk_rank_only(rng):
    s = rng.standard_normal(50)
    h = (rng.random(50) < 0.2).astype(float)
    base = recommend_topk(s, h, 10).items
    for f in (np.exp, lambda v: 3 * v + 7, np.tanh, lambda v: v**3):
        assert recommend_topk(f(s), h, 10).items == base


def test_mask_history():
    m = mask_history([1.0, 2.0, 3.0], [0, 1, 0])
    assert m[1] == -np.inf and m[0] == 1.0


def test_rank_block_ties_and_mask():
    import scipy.sparse as sp

    scores = np.array([[1.0, 1.0, 2.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
    excl = sp.csr_matrix(np.array([[0, 0, 1, 0], [1, 0, 0, 0]]))
    np.testing.assert_array_equal(rank_block(scores, 3, excl), [[0, 1, 3], [1, 2, 3]])
