import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attsim import similarity as S
from attsim import tensor as T
from attsim.gradcheck import check_gradients
from attsim.tensor import ShapeError, Tensor


def f64(*arrays):
    return [Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64) for a in arrays]


def test_pool_avg_and_max():
    x = [[1, 3], [2, 2]]
    assert S.pool(Tensor(x), "avg").data.tolist() == [2, 2]
    assert S.pool(Tensor(x), "max").data.tolist() == [3, 2]


def test_pool_avg_row_mean_oracle():
    x = np.random.default_rng(0).normal(size=(8, 5))
    ref = [sum(row) / len(row) for row in x.tolist()]
    np.testing.assert_allclose(S.pool(Tensor(x), "avg").data, ref, rtol=1e-6)


def test_sim_pooled_identical_inputs():
    x = Tensor(np.random.default_rng(1).normal(size=(6, 4)))
    assert S.sim_pooled(x, x, dist="cosine").item() == pytest.approx(1.0, abs=1e-6)
    assert S.sim_pooled(x, x, dist="neg_euclidean").item() == 0.0


def test_sim_pooled_inner_dot_oracle():
    rng = np.random.default_rng(2)
    xq, xj = rng.normal(size=(6, 3)), rng.normal(size=(6, 5))
    pq, pj = xq.mean(axis=1), xj.mean(axis=1)
    ref = sum(a * b for a, b in zip(pq, pj))
    got = S.sim_pooled(*f64(xq, xj), dist="inner").item()
    assert got == pytest.approx(ref, rel=1e-12)


def test_cosine_zero_vector_errors():
    with pytest.raises(ValueError, match="zero vector"):
        S.sim_pooled(Tensor(np.zeros((3, 2))), Tensor(np.ones((3, 2))), dist="cosine")


def test_second_order_hand():
    mat = S.second_order(Tensor(np.eye(2)), Tensor([[2, 0], [0, 5]]))
    assert mat.data.tolist() == [[2, 0], [0, 5]]
    assert S.reduce_second_order(mat, "mean").item() == 1.75
    assert S.reduce_second_order(mat, "sum").item() == 7.0


def test_second_order_orthogonal_columns():
    xq = np.array([[1.0, 2.0], [0, 0], [0, 0]])
    xj = np.array([[0, 0, 0], [1.0, 0, 3.0], [0, 4.0, 1.0]])
    assert not S.second_order(Tensor(xq), Tensor(xj)).data.any()


def test_second_order_triple_loop():
    rng = np.random.default_rng(3)
    xq, xj = rng.normal(size=(4, 3)), rng.normal(size=(4, 5))
    ref = np.zeros((3, 5))
    for t in range(3):
        for s in range(5):
            for m in range(4):
                ref[t, s] += xq[m, t] * xj[m, s]
    np.testing.assert_allclose(S.second_order(*f64(xq, xj)).data, ref, rtol=1e-12)


def test_second_order_channel_mismatch():
    with pytest.raises(ShapeError):
        S.second_order(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 2))))


def test_attentional_hand():
    args = (Tensor(np.eye(2)), Tensor([[2, 0], [0, 5]]), Tensor([1, 0]), Tensor([1, 0]))
    assert S.sim_attentional(*args).item() == 2.0
    assert S.sim_attentional_trace(*args).item() == 2.0


def test_attentional_uniform_equals_avg_pooled():
    rng = np.random.default_rng(4)
    xq, xj = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    att = S.sim_attentional(*f64(xq, xj, np.full(3, 1 / 3), np.full(4, 1 / 4))).item()
    pooled = S.sim_pooled(*f64(xq, xj), pooling="avg", dist="inner").item()
    assert att == pytest.approx(pooled, rel=1e-12)


def test_attentional_matches_trace_oracle():
    rng = np.random.default_rng(5)
    xq, xj, aq, aj = rng.normal(size=(6, 4)), rng.normal(size=(6, 7)), rng.random(4), rng.random(7)
    ref = np.trace(aq[None, :] @ xq.T @ xj @ aj[:, None])
    got = S.sim_attentional(*f64(xq, xj, aq, aj)).item()
    assert abs(got - ref) <= 1e-9 * abs(ref)


def test_attentional_length_mismatch():
    with pytest.raises(ShapeError, match="A_q"):
        S.sim_attentional(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 2))), Tensor(np.ones(3)), Tensor(np.ones(2)))


def test_one_hot_selects_entry():
    rng = np.random.default_rng(6)
    xq, xj = rng.normal(size=(4, 3)), rng.normal(size=(4, 5))
    mat = xq.T @ xj
    for s in range(3):
        for t in range(5):
            aq, aj = np.eye(3)[s], np.eye(5)[t]
            assert S.sim_attentional_trace(*f64(xq, xj, aq, aj)).item() == pytest.approx(mat[s, t], rel=1e-12)
            assert S.sim_attentional(*f64(xq, xj, aq, aj)).item() == pytest.approx(mat[s, t], rel=1e-12)


def test_factorized_path_is_cheaper():
    m, tq, tj = 16, 12, 9
    rng = np.random.default_rng(7)
    args = f64(rng.normal(size=(m, tq)), rng.normal(size=(m, tj)), rng.random(tq), rng.random(tj))
    with T.count_multiplies() as fast:
        S.sim_attentional(*args)
    with T.count_multiplies() as slow:
        S.sim_attentional_trace(*args)
    assert fast[0] <= m * (tq + tj) + m
    assert slow[0] >= m * tq * tj


def test_weighted_second_order_with_rank_one():
    rng = np.random.default_rng(8)
    xq, xj, aq, aj = rng.normal(size=(3, 4)), rng.normal(size=(3, 2)), rng.random(4), rng.random(2)
    w = S.rank_one_weight(*f64(aq, aj))
    assert w.shape == (2, 4)
    ref = np.trace(xq.T @ xj @ np.outer(aj, aq))
    assert S.sim_weighted_second_order(*f64(xq, xj), w).item() == pytest.approx(ref, rel=1e-12)


def test_weighted_second_order_shape_check():
    with pytest.raises(ShapeError):
        S.sim_weighted_second_order(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))), Tensor(np.ones((4, 2))))


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**32 - 1),
    st.sampled_from(["inner", "cosine", "euclidean"]),
)
def test_symmetry_and_factorization(m, tq, tj, seed, dist):
    rng = np.random.default_rng(seed)
    xq, xj = rng.normal(size=(m, tq)), rng.normal(size=(m, tj))
    aq, aj = rng.random(tq) + 0.01, rng.random(tj) + 0.01
    fwd = S.sim_attentional(*f64(xq, xj, aq, aj), dist=dist).item()
    rev = S.sim_attentional(*f64(xj, xq, aj, aq), dist=dist).item()
    assert fwd == pytest.approx(rev, rel=1e-12, abs=1e-12)
    if dist == "inner":
        trace = S.sim_attentional_trace(*f64(xq, xj, aq, aj)).item()
        assert abs(trace - fwd) <= 1e-9 * max(abs(trace), 1e-300)


def test_batched_attentional_matches_loop():
    rng = np.random.default_rng(9)
    xq, xj = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 6))
    aq, aj = rng.random((3, 4)), rng.random((3, 6))
    batched = S.sim_attentional(*f64(xq, xj, aq, aj), dist="cosine").data
    for i in range(3):
        assert batched[i] == pytest.approx(S.sim_attentional(*f64(xq[i], xj[i], aq[i], aj[i]), dist="cosine").item())


@pytest.mark.parametrize(
    "fn",
    [
        lambda xq, xj, aq, aj: S.sim_pooled(xq, xj, "avg", "inner"),
        lambda xq, xj, aq, aj: S.sim_pooled(xq, xj, "max", "cosine"),
        lambda xq, xj, aq, aj: S.sim_pooled(xq, xj, "avg", "euclidean"),
        lambda xq, xj, aq, aj: S.sim_second_order(xq, xj, "mean"),
        lambda xq, xj, aq, aj: S.sim_attentional(xq, xj, aq, aj, "inner"),
        lambda xq, xj, aq, aj: S.sim_attentional(xq, xj, aq, aj, "cosine"),
        lambda xq, xj, aq, aj: S.sim_attentional(xq, xj, aq, aj, "euclidean"),
        lambda xq, xj, aq, aj: S.sim_attentional_trace(xq, xj, aq, aj),
    ],
)
def test_similarity_gradients(fn):
    rng = np.random.default_rng(10)
    arrays = [rng.normal(size=(4, 3)), rng.normal(size=(4, 5)), rng.random(3), rng.random(5)]
    assert max(check_gradients(fn, arrays)) < 1e-3


def test_head_dispatch_and_validation():
    rng = np.random.default_rng(11)
    xq, xj = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))
    head = S.SimilarityHead(kind="attentional", distance="euclidean")
    assert head.distance == "neg_euclidean"
    with pytest.raises(ValueError):
        S.similarity(head, xq, xj)
    with pytest.raises(ValueError):
        S.SimilarityHead(kind="relation")
    assert S.similarity(S.SimilarityHead(kind="second_order"), xq, xj).shape == ()
