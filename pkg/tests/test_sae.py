import numpy as np
import pytest

from codec.aggregate import is_degenerate
from codec.sae import (
    SAEConfig,
    _init,
    _loss_and_grads,
    load_sae,
    loadings_for,
    r_squared,
    r_squared_of,
    save_sae,
    train_sae,
)


def planted_dictionary(rng, d=16, k=24, n=2048):
    """Non-negative atoms; every row mixes 1-3 atoms with loadings in [0.9, 1]."""
    dictionary = np.abs(rng.normal(size=(d, k))) * (rng.random((d, k)) < 0.3)
    dictionary[rng.integers(0, d, size=k), np.arange(k)] += 1.0
    z = np.zeros((n, k))
    for i in range(n):
        on = rng.choice(k, size=rng.integers(1, 4), replace=False)
        z[i, on] = rng.uniform(0.9, 1.0, size=on.size)
    return z @ dictionary.T, dictionary


def test_encode_is_thresholded(rng):
    data = np.abs(rng.normal(size=(50, 6)))
    sae = _init(6, SAEConfig(), data, rng)
    z = sae.encode(data)
    assert ((z == 0) | (z >= 0.9)).all()
    assert sae.decode(z).shape == data.shape
    with pytest.raises(ValueError):
        sae.encode(np.zeros((2, 5)))
    with pytest.raises(ValueError):
        sae.decode(np.zeros((2, 5)))


def test_dictionary_gradient_matches_finite_differences(rng):
    # with the loadings fixed, the loss is smooth in the dictionary
    data = np.abs(rng.normal(size=(20, 5)))
    sae = _init(5, SAEConfig(l1_dictionary=1e-3), data, rng)
    _, grads = _loss_and_grads(sae, data)
    g_dict = grads[4]
    eps = 1e-6
    for idx in [(0, 0), (2, 7), (4, 14)]:
        old = sae.dictionary[idx]
        sae.dictionary[idx] = old + eps
        up = _loss_and_grads(sae, data)[0]
        sae.dictionary[idx] = old - eps
        dn = _loss_and_grads(sae, data)[0]
        sae.dictionary[idx] = old
        assert g_dict[idx] == pytest.approx((up - dn) / (2 * eps), rel=1e-5, abs=1e-9)


def test_encoder_gradient_on_active_units(rng):
    # away from the threshold the straight-through gradient is the true gradient
    data = np.abs(rng.normal(size=(8, 4)))
    sae = _init(4, SAEConfig(threshold=0.0), data, rng)
    _, grads = _loss_and_grads(sae, data)
    eps = 1e-6
    for idx in [(0, 0), (3, 2)]:
        old = sae.w1[idx]
        sae.w1[idx] = old + eps
        up = _loss_and_grads(sae, data)[0]
        sae.w1[idx] = old - eps
        dn = _loss_and_grads(sae, data)[0]
        sae.w1[idx] = old
        assert grads[0][idx] == pytest.approx((up - dn) / (2 * eps), rel=1e-5, abs=1e-9)


def test_planted_dictionary_recovery():
    rng = np.random.default_rng(0)
    data, true_dict = planted_dictionary(rng)
    sae = train_sae(data, SAEConfig(lr=1e-3, inactive_grad=0.1, epochs=150, seed=0))
    assert r_squared(data, sae) >= 0.95
    # each planted atom has a close learned column
    t = true_dict / np.linalg.norm(true_dict, axis=0)
    learned = sae.dictionary / np.maximum(np.linalg.norm(sae.dictionary, axis=0), 1e-12)
    assert (t.T @ learned).max(axis=1).mean() > 0.8


def test_dictionary_stays_nonnegative(rng):
    data = rng.normal(size=(64, 5))
    sae = train_sae(data, SAEConfig(epochs=5, lr=1e-2, seed=1))
    assert (sae.dictionary >= 0).all()
    free = train_sae(data, SAEConfig(epochs=5, lr=1e-2, seed=1, nonneg_dictionary=False))
    assert (free.dictionary < 0).any()


def test_training_is_deterministic(rng):
    data = np.abs(rng.normal(size=(64, 5)))
    a = train_sae(data, SAEConfig(epochs=4, seed=3))
    b = train_sae(data, SAEConfig(epochs=4, seed=3))
    np.testing.assert_array_equal(a.dictionary, b.dictionary)
    assert [e["loss"] for e in a.log] == [e["loss"] for e in b.log]


def test_r_squared_definition(rng):
    m = rng.normal(size=(10, 3))
    assert r_squared_of(m, m) == 1.0
    assert r_squared_of(m, np.broadcast_to(m.mean(axis=0), m.shape)) == pytest.approx(0.0)
    assert is_degenerate(r_squared_of(np.ones((4, 2)), np.zeros((4, 2))))


def test_config_validation():
    with pytest.raises(ValueError):
        SAEConfig(threshold=-1)
    with pytest.raises(ValueError):
        SAEConfig(lr=0)
    with pytest.raises(ValueError):
        SAEConfig(n_modes=0)
    with pytest.raises(ValueError):
        SAEConfig(inactive_grad=2.0)
    assert SAEConfig().modes_for(8) == 24
    assert SAEConfig(n_modes=5).modes_for(8) == 5
    with pytest.raises(ValueError):
        train_sae(np.zeros(5))


def test_checkpoint_round_trip(tmp_path, rng):
    data = np.abs(rng.normal(size=(32, 4)))
    sae = train_sae(data, SAEConfig(epochs=2, seed=0))
    save_sae(sae, tmp_path / "s.cdec")
    back = load_sae(tmp_path / "s.cdec")
    np.testing.assert_array_equal(back.encode(data), sae.encode(data))
    assert back.config == sae.config
    assert loadings_for(data, back).threshold == 0.9
