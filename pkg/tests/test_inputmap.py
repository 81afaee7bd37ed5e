import numpy as np
import pytest

from codec import envelope
from codec.autodiff import backward, forward
from codec.contrib import ZERO_INPUT, actgrad, hidden_ig, hinput_grad, ig_input
from codec.inputmap import (
    ContributionMap,
    actgrad_decomp_map,
    contribution_map,
    hig_decomp_map,
    inputgrad_map,
    load_map,
    median_filter,
    mode_sensitivity,
    read_pgm,
    render_mask,
    save_map,
    write_pgm,
)
from codec.targets import TargetSpec

TOP1 = TargetSpec("top1_logit")


def fd_tap_jacobian(model, x, tap, eps=1e-6):
    """d h / d x by central differences, shape tap_shape + input_shape."""
    shape = model.tap_shape(tap)
    jac = np.zeros(shape + x.shape)
    for idx in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += eps
        dn[idx] -= eps
        jac[(Ellipsis,) + idx] = (forward(model, up).activation(tap) - forward(model, dn).activation(tap)) / (2 * eps)
    return jac


@pytest.mark.parametrize("tap", ["conv0", "res_out"])
def test_mode_sensitivity_against_dense_jacobian(tiny_cnn, rng, tap):
    x = rng.normal(size=tiny_cnn.input_shape)
    trace = forward(tiny_cnn, x)
    g = backward(trace, TOP1.resolve(trace.output).seed(trace.output))[tap]
    jac = fd_tap_jacobian(tiny_cnn, x, tap)
    channels = [0, 2]
    want = np.einsum("chw,chw...->...", g[channels], jac[channels])
    np.testing.assert_allclose(mode_sensitivity(tiny_cnn, x, tap, channels, TOP1), want, atol=1e-6)


def test_inputgrad_sums_to_hinput_grad(tiny_cnn, rng):
    x = rng.normal(size=tiny_cnn.input_shape)
    hg = hinput_grad(tiny_cnn, x, "conv1", TOP1).values
    m = inputgrad_map(tiny_cnn, x, "conv1", [1, 3], TOP1)
    assert m.total() == pytest.approx(hg[[1, 3]].sum(), abs=1e-12)


def test_hig_decomp_sums_to_tangent_hidden_ig(tiny_cnn, rng):
    x = rng.normal(size=tiny_cnn.input_shape)
    h = hidden_ig(tiny_cnn, x, "conv1", TOP1, steps=8, rule="tangent").values
    m = hig_decomp_map(tiny_cnn, x, "conv1", [0, 1], TOP1, steps=8)
    assert m.total() == pytest.approx(h[[0, 1]].sum(), abs=1e-12)


@pytest.mark.parametrize("tap", ["conv0", "res_out"])
def test_all_channels_at_a_cut_give_input_ig(tiny_cnn, rng, tap):
    x = rng.normal(size=tiny_cnn.input_shape)
    n = tiny_cnn.tap_shape(tap)[0]
    m = hig_decomp_map(tiny_cnn, x, tap, range(n), TOP1, steps=6)
    np.testing.assert_allclose(m.values, ig_input(tiny_cnn, x, TOP1, steps=6), atol=1e-12)


def test_modes_are_linear_in_channels(tiny_cnn, rng):
    x = rng.normal(size=tiny_cnn.input_shape)
    parts = [hig_decomp_map(tiny_cnn, x, "conv1", [c], TOP1, steps=4).values for c in (0, 2)]
    both = hig_decomp_map(tiny_cnn, x, "conv1", [0, 2], TOP1, steps=4).values
    np.testing.assert_allclose(both, parts[0] + parts[1], atol=1e-13)


def test_actgrad_decomp_sums_to_actgrad(tiny_cnn, rng):
    # zero-bias ReLU net: h is positively homogeneous in x, so the path integral is exact
    x = rng.normal(size=tiny_cnn.input_shape)
    a = actgrad(tiny_cnn, x, "conv1", TOP1, ZERO_INPUT).values
    m = actgrad_decomp_map(tiny_cnn, x, "conv1", [2], TOP1, steps=5)
    assert m.total() == pytest.approx(a[2].sum(), abs=1e-12)


def test_dispatch_and_errors(tiny_cnn, rng):
    x = rng.normal(size=tiny_cnn.input_shape)
    assert contribution_map(tiny_cnn, x, "conv0", [0], TOP1, "inputgrad").algorithm == "inputgrad"
    with pytest.raises(ValueError):
        contribution_map(tiny_cnn, x, "conv0", [0], TOP1, "gradcam")
    with pytest.raises(IndexError):
        inputgrad_map(tiny_cnn, x, "conv0", [99], TOP1)
    with pytest.raises(ValueError):
        inputgrad_map(tiny_cnn, x[None], "conv0", [0], TOP1)
    with pytest.raises(ValueError):
        hig_decomp_map(tiny_cnn, x, "conv0", [0], TOP1, steps=0)


def test_median_filter_by_hand():
    a = np.arange(36.0).reshape(6, 6)
    got = median_filter(a, 4)
    # top-left window rows 0-3, cols 0-3
    assert got[0, 0] == np.median(a[:4, :4])
    # bottom-right pixel: window is the corner value replicated
    assert got[5, 5] == 35.0
    # row 4, col 2: rows 4,5,5,5 and cols 2..5
    win = a[[4, 5, 5, 5]][:, 2:6]
    assert got[4, 2] == np.median(win)
    spike = np.zeros((6, 6))
    spike[2, 2] = 100.0
    assert (median_filter(spike, 4) == 0).all()


def test_render_mask_uniform_and_hot_pixel(rng):
    image = rng.normal(size=(3, 8, 8))
    flat = render_mask(np.ones((3, 8, 8)), image)
    assert flat.degenerate and (flat.mask == 1).all()
    blob = np.zeros((3, 8, 8))
    blob[:, 2:6, 2:6] = 1.0
    r = render_mask(blob, image)
    assert not r.degenerate
    assert r.mask.max() == 1.0 and r.mask.min() == 0.0
    assert r.mask[2, 2] == 1.0 and r.mask[7, 7] == 0.0
    std = (image - image.mean(axis=(1, 2), keepdims=True)) / image.std(axis=(1, 2), keepdims=True)
    np.testing.assert_allclose(r.image, std * r.mask[None], atol=1e-12)
    # negative values are ignored in positive mode
    assert render_mask(-blob, image).degenerate
    with pytest.raises(ValueError):
        render_mask(blob, image[:, :4])


def test_pgm_round_trip(tmp_path):
    a = np.arange(0, 256, dtype=np.float64).reshape(16, 16)  # includes whitespace byte values
    write_pgm(tmp_path / "a.pgm", a)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), a.astype(np.uint8))
    write_pgm(tmp_path / "c.pgm", np.full((3, 4), 7.0))
    assert (read_pgm(tmp_path / "c.pgm") == 0).all()


def test_map_file_round_trip(tmp_path, rng):
    m = ContributionMap(rng.normal(size=(2, 4, 4)), "hig-decomp", "conv0", (1, 2), steps=10)
    save_map(m, tmp_path / "m.cdec")
    back = load_map(tmp_path / "m.cdec")
    np.testing.assert_array_equal(back.values, m.values)
    assert back.channels == (1, 2) and back.steps == 10
    envelope.write(tmp_path / "o.cdec", {"artifact": "other"}, [])
    with pytest.raises(envelope.EnvelopeError):
        load_map(tmp_path / "o.cdec")
    with pytest.raises(ValueError):
        ContributionMap(m.values, "lime", "conv0", ())
    assert (m.positive().values >= 0).all()
