import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from codec.aggregate import (
    ChannelContributionMatrix,
    Degenerate,
    channel_sum,
    class_average,
    contribution_matrices,
    ei_split_sum,
    foev,
    hoyer_sparsity,
    is_degenerate,
    mean_hoyer,
    pearson,
    pearson_columns,
    pos_neg_correlation,
)


def loop_hoyer(v):
    v = [abs(float(a)) for a in np.ravel(v)]
    n = len(v)
    l1 = sum(v)
    l2 = sum(a * a for a in v) ** 0.5
    return (n ** 0.5 - l1 / l2) / (n ** 0.5 - 1)


def test_hoyer_extremes():
    assert hoyer_sparsity([0, 0, 5, 0]) == pytest.approx(1.0)
    assert hoyer_sparsity([2, 2, 2, 2]) == pytest.approx(0.0)
    assert hoyer_sparsity([-3, 0, 0]) == pytest.approx(1.0)
    assert is_degenerate(hoyer_sparsity(np.zeros(4)))
    with pytest.raises(ValueError):
        hoyer_sparsity([1.0])


vectors = hnp.arrays(np.float64, st.integers(2, 30), elements=st.floats(-1e3, 1e3, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(vectors)
def test_hoyer_bounds_and_oracle(v):
    h = hoyer_sparsity(v)
    if np.abs(v).sum() < 1e-100:
        return
    assert -1e-12 <= h <= 1 + 1e-12
    assert h == pytest.approx(loop_hoyer(v), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(vectors, st.floats(0.1, 100))
def test_hoyer_scale_invariant(v, c):
    if np.abs(v).max() < 1e-6:
        return
    assert hoyer_sparsity(v * c) == pytest.approx(hoyer_sparsity(v), abs=1e-9)


def test_channel_sum_and_split(rng):
    t = rng.normal(size=(4, 3, 5))
    np.testing.assert_allclose(channel_sum(t), [t[c].sum() for c in range(4)])
    pos, neg = ei_split_sum(t)
    np.testing.assert_allclose(pos, [t[c][t[c] > 0].sum() for c in range(4)])
    np.testing.assert_allclose(neg, [t[c][t[c] < 0].sum() for c in range(4)])
    np.testing.assert_allclose(channel_sum(t, axes=(1,)), t.sum(axis=1))
    with pytest.raises(ValueError):
        channel_sum(t, axes=(0,))
    np.testing.assert_allclose(channel_sum(t, channel_axis=2), t.sum(axis=(0, 1)))


def test_ei_identity_is_bit_exact(rng):
    tensors = [rng.normal(size=(5, 4, 4)) * rng.uniform(0.01, 100) for _ in range(20)]
    net, pos, neg = contribution_matrices(tensors)
    assert np.array_equal(pos + neg, net)
    assert (pos >= 0).all() and (neg <= 0).all()
    np.testing.assert_allclose(net, [channel_sum(t) for t in tensors], rtol=1e-12, atol=1e-12)


def test_single_signed_tensor(rng):
    t = np.abs(rng.normal(size=(3, 2, 2)))
    net, pos, neg = contribution_matrices([t])
    assert (neg == 0).all()
    np.testing.assert_array_equal(net, pos)


def test_mean_hoyer_skips_zero_rows():
    m = np.array([[1.0, 0, 0], [0, 0, 0], [1.0, 1.0, 1.0]])
    assert mean_hoyer(m) == pytest.approx(0.5)
    assert is_degenerate(mean_hoyer(np.zeros((2, 3))))


def test_pearson_against_numpy(rng):
    a, b = rng.normal(size=(2, 40))
    assert pearson(a, b) == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)
    assert is_degenerate(pearson(np.ones(5), a[:5]))
    x = rng.normal(size=(30, 4))
    y = rng.normal(size=(30, 3))
    y[:, 1] = 2.0
    r, bad_x, bad_y = pearson_columns(x, y)
    for i in range(4):
        for j in (0, 2):
            assert r[i, j] == pytest.approx(np.corrcoef(x[:, i], y[:, j])[0, 1], abs=1e-12)
    assert (r[:, 1] == 0).all() and bad_y.tolist() == [False, True, False] and not bad_x.any()


def test_pos_neg_correlation(rng):
    pos = np.abs(rng.normal(size=(10, 6)))
    assert pos_neg_correlation(pos, -2 * pos) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        pos_neg_correlation(pos, pos[:, :3])


def test_class_average_warns_on_missing(rng):
    m = rng.normal(size=(6, 3))
    labels = np.array([0, 0, 2, 2, 2, 0])
    with pytest.warns(UserWarning):
        means, present = class_average(m, labels, 3)
    assert present.tolist() == [0, 2]
    np.testing.assert_allclose(means[1], m[labels == 2].mean(axis=0))


def test_foev_against_svd(rng):
    m = rng.normal(size=(40, 3)) @ rng.normal(size=(3, 8)) + 0.01 * rng.normal(size=(40, 8))
    rep = foev(m)
    s = np.linalg.svd(m - m.mean(axis=0), compute_uv=False)
    np.testing.assert_allclose(rep.fractions[: s.size], s ** 2 / (s ** 2).sum(), atol=1e-10)
    assert rep.fractions.sum() == pytest.approx(1.0)
    assert np.all(np.diff(rep.fractions) <= 1e-15)
    assert rep.n_components_95 <= 3


def test_foev_degenerate():
    assert isinstance(foev(np.ones((5, 3))), Degenerate)
    with pytest.raises(ValueError):
        foev(np.ones((1, 3)))


def test_matrix_type():
    m = ChannelContributionMatrix(np.zeros((2, 3)), "t", "actgrad", {"kind": "top1_logit"}, "positive")
    assert m.n_channels == 3 and m.meta()["sign_mode"] == "positive"
    with pytest.raises(ValueError):
        ChannelContributionMatrix(np.zeros((2, 3)), "t", "actgrad", sign_mode="abs")
