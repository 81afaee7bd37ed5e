import itertools

import numpy as np
import pytest

from codec.autodiff import forward
from codec.modes import (
    aggregate_class_modes,
    class_correlations,
    class_masks,
    cluster_cells,
    instantaneous_rf,
    max_class_corr_stats,
    mode_firing_correlation,
    sparse_mode_events,
    superclass_masks,
    top_mode_for_class,
)
from codec.zoo import build_retina_model


class _Dict:
    def __init__(self, dictionary):
        self.dictionary = dictionary


def test_masks():
    labels = np.array([0, 2, 1, 2])
    m = class_masks(labels)
    assert m.tolist() == [[1, 0, 0], [0, 0, 1], [0, 1, 0], [0, 0, 1]]
    assert class_masks(labels, 4).shape == (4, 4)
    s = superclass_masks(labels, [[0, 1], [2]])
    assert s.tolist() == [[1, 0], [0, 1], [1, 0], [0, 1]]


def test_class_correlations_against_loop(rng):
    labels = rng.integers(0, 3, size=60)
    z = rng.normal(size=(60, 5))
    z[:, 4] = 1.0
    ccm = class_correlations(z, class_masks(labels, 3))
    masks = class_masks(labels, 3)
    for i in range(4):
        for c in range(3):
            assert ccm.values[i, c] == pytest.approx(np.corrcoef(z[:, i], masks[:, c])[0, 1], abs=1e-12)
    assert ccm.degenerate_modes.tolist() == [False] * 4 + [True]
    assert (ccm.values[4] == 0).all()
    with pytest.raises(ValueError):
        class_correlations(z[:10], masks)


def test_top_mode_and_ties():
    from codec.modes import ClassCorrelationMatrix
    v = np.array([[0.5, 0.1], [0.5, 0.9], [0.2, 0.9]])
    ccm = ClassCorrelationMatrix(v, np.zeros(3, bool), np.zeros(2, bool))
    assert top_mode_for_class(ccm, 0) == 0
    assert top_mode_for_class(ccm, 1) == 1
    assert top_mode_for_class(ccm, 0, n=2) == [0, 1]


def test_max_stats_skip_degenerate():
    from codec.modes import ClassCorrelationMatrix
    v = np.array([[0.5, 0.1], [0.0, 0.0], [0.1, 0.3]])
    ccm = ClassCorrelationMatrix(v, np.array([False, True, False]), np.zeros(2, bool))
    stats = max_class_corr_stats(ccm)
    assert stats.per_mode_max.tolist() == [0.5, 0.3]
    assert stats.mean == pytest.approx(0.4)
    assert stats.n_above == 2
    assert stats.histogram.sum() == 2


def test_aggregate_class_modes():
    from codec.modes import ClassCorrelationMatrix
    d = np.arange(12.0).reshape(4, 3)
    ccm = ClassCorrelationMatrix(np.array([[0.3], [0.1], [0.25]]), np.zeros(3, bool), np.zeros(1, bool))
    np.testing.assert_array_equal(aggregate_class_modes(ccm, _Dict(d), 0), d[:, 0] + d[:, 2])
    np.testing.assert_array_equal(aggregate_class_modes(ccm, _Dict(d), 0, threshold=0.5), d[:, 0])
    with pytest.raises(ValueError):
        aggregate_class_modes(ccm, _Dict(d), 0, threshold=1.5)


def test_mode_firing_correlation_orientation(rng):
    z = rng.normal(size=(50, 3))
    rates = np.stack([z[:, 1], -z[:, 0], rng.normal(size=50), 2 * z[:, 2]], axis=1)
    r = mode_firing_correlation(z, rates).values
    assert r.shape == (4, 3)
    assert r[0, 1] == pytest.approx(1.0)
    assert r[1, 0] == pytest.approx(-1.0)
    assert r[3, 2] == pytest.approx(1.0)


def brute_force_best_partition(x, ks):
    """Exhaustive silhouette maximum over all labelings (tiny n only)."""
    from sklearn.metrics import silhouette_score
    best = (-2.0, None)
    for k in ks:
        for lab in itertools.product(range(k), repeat=len(x)):
            if len(set(lab)) != k or lab[0] != 0:
                continue
            s = silhouette_score(x, lab)
            if s > best[0]:
                best = (s, k)
    return best


def test_cluster_cells_finds_planted_groups(rng):
    centers = np.array([[1.0, -1, 0.5], [-1, 1, -0.5], [0.2, 0.2, 1.5]])
    labels = np.repeat([0, 1, 2], 3)
    x = centers[labels] + 0.05 * rng.normal(size=(9, 3))
    rep = cluster_cells(x, k_candidates=[2, 3, 4])
    assert rep.k == 3
    from sklearn.metrics import adjusted_rand_score
    assert adjusted_rand_score(labels, rep.labels) == 1.0
    best_score, best_k = brute_force_best_partition(x[[0, 1, 3, 4, 6, 7]], [2, 3])
    small = cluster_cells(x[[0, 1, 3, 4, 6, 7]], k_candidates=[2, 3])
    assert small.k == best_k
    assert small.silhouettes[best_k] == pytest.approx(best_score, abs=1e-12)


def test_cluster_cells_errors():
    with pytest.raises(ValueError):
        cluster_cells(np.ones((2, 3)))
    with pytest.raises(ValueError):
        cluster_cells(np.ones((5, 3)))
    with pytest.raises(ValueError):
        cluster_cells(np.eye(4), k_candidates=[5])


def test_instantaneous_rf_matches_finite_differences(rng):
    model = build_retina_model(4, input_shape=(4, 8, 8), seed=2)
    clip = rng.normal(size=model.input_shape)
    rf = instantaneous_rf(model, clip, cell=2)
    eps = 1e-6
    for idx in [(0, 3, 3), (3, 4, 5), (1, 0, 7)]:
        up, dn = clip.copy(), clip.copy()
        up[idx] += eps
        dn[idx] -= eps
        num = (forward(model, up).output[2] - forward(model, dn).output[2]) / (2 * eps)
        assert rf[idx] == pytest.approx(num, rel=1e-4, abs=1e-9)
    stack = np.stack([clip, clip * 0.5])
    np.testing.assert_array_equal(instantaneous_rf(model, stack, 2, time_index=0), rf)
    with pytest.raises(IndexError):
        instantaneous_rf(model, clip, cell=4)


def test_sparse_mode_events():
    z = np.array([[1.0, 0, 0], [1.0, 1.0, 1.0], [0, 0, 0]])
    rates = np.array([[0.5, 2.0], [3.0, 3.0], [2.0, 0.0]])
    ev = sparse_mode_events(z, rates, max_active=1, min_rate=1.0)
    assert ev == [(0, frozenset({0}), 1), (2, frozenset(), 0)]
    with pytest.raises(ValueError):
        sparse_mode_events(z, rates, 0, 1.0)
