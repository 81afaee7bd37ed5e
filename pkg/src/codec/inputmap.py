"""Input-space decompositions of channel (or mode) contributions and mask rendering.

A channel selection at a tap defines a gradient path: the target gradient is
cut at the tap, restricted to the selected channels and propagated back to the
input. Every map here is that restricted input gradient, evaluated at one or
more points, times the input displacement x - x'.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import envelope
from .autodiff import ModelSpec, _apply_channel_mask, _backprop, _check_seed, forward
from .contrib import _PATH_CHUNK, ZERO_INPUT, BaselineSpec, _path_points
from .targets import TargetSpec

MAP_ALGORITHMS = ("inputgrad", "actgrad-decomp", "hig-decomp")
MEDIAN_KERNEL = 4
CONTRAST = 7.0


@dataclass(frozen=True, eq=False)
class ContributionMap:
    """Per-pixel contributions of a channel selection; ``values`` has the input's shape."""

    values: np.ndarray
    algorithm: str
    tap: str
    channels: tuple
    sign: str = "net"
    steps: int | None = None

    def __post_init__(self):
        if self.algorithm not in MAP_ALGORITHMS:
            raise ValueError(f"unknown map algorithm {self.algorithm!r}")
        if self.sign not in ("net", "positive"):
            raise ValueError(f"unknown sign {self.sign!r}")

    def total(self) -> float:
        return float(self.values.sum())

    def positive(self) -> "ContributionMap":
        return ContributionMap(np.maximum(self.values, 0.0), self.algorithm, self.tap, self.channels, "positive", self.steps)


def _keep(model: ModelSpec, tap: str, channels) -> tuple[int, np.ndarray, tuple]:
    idx = model.tap_index(tap) + 1
    n = model.value_shapes[idx][0]
    channels = tuple(int(c) for c in channels)
    keep = np.zeros(n)
    for c in channels:
        if not 0 <= c < n:
            raise IndexError(f"channel {c} out of range for tap {tap!r} with {n} channels")
        keep[c] = 1.0
    return idx, keep, channels


def _restricted_input_grads(trace, idx: int, keep: np.ndarray, seed=None, g_cut=None) -> np.ndarray:
    """Batched input gradients through the kept channels of value ``idx``.

    Either an output ``seed`` (the cut gradient is computed first) or a
    ready-made ``g_cut`` is given.
    """
    if g_cut is None:
        g_cut = _backprop(trace, len(trace.values) - 1, _check_seed(trace, seed))[idx]
        if g_cut is None:
            g_cut = np.zeros_like(trace.values[idx])
    g_cut = _apply_channel_mask(np.broadcast_to(g_cut, trace.values[idx].shape), keep)
    return _backprop(trace, idx, g_cut)[0]


def _prepare(model: ModelSpec, x, target: TargetSpec, baseline: BaselineSpec):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ValueError(f"expected a single input of shape {model.input_shape}, got {x.shape}")
    if baseline.kind == "zero_hidden":
        raise ValueError("input-space maps need an input-space baseline")
    trace = forward(model, x)
    return x, baseline.input_for(x), trace, target.resolve(trace.output)


def mode_sensitivity(model: ModelSpec, x, tap: str, channels, target: TargetSpec) -> np.ndarray:
    """Input gradient of the target through the selected channels only."""
    x, _, trace, resolved = _prepare(model, x, target, ZERO_INPUT)
    idx, keep, _ = _keep(model, tap, channels)
    return _restricted_input_grads(trace, idx, keep, seed=resolved.seed(trace.output))[0]


def inputgrad_map(model: ModelSpec, x, tap: str, channels, target: TargetSpec, baseline: BaselineSpec = ZERO_INPUT) -> ContributionMap:
    """Sensitivity at x times (x - x'); sums to the selected channels' hinput_grad."""
    x, x_base, trace, resolved = _prepare(model, x, target, baseline)
    idx, keep, channels = _keep(model, tap, channels)
    a = _restricted_input_grads(trace, idx, keep, seed=resolved.seed(trace.output))[0]
    return ContributionMap(a * (x - x_base), "inputgrad", tap, channels)


def _path_sum(model, x, x_base, steps, idx, keep, resolved=None, g_fixed=None) -> np.ndarray:
    """Sum over alpha = k/m, k = 1..m, of restricted input gradients."""
    points = _path_points(x, x_base, steps)[1:]
    acc = np.zeros_like(x)
    for start in range(0, steps, _PATH_CHUNK):
        trace = forward(model, points[start:start + _PATH_CHUNK])
        if g_fixed is None:
            seed = resolved.seed(trace.values[-1])
            acc += _restricted_input_grads(trace, idx, keep, seed=seed).sum(axis=0)
        else:
            acc += _restricted_input_grads(trace, idx, keep, g_cut=g_fixed[None]).sum(axis=0)
    return acc


def actgrad_decomp_map(
    model: ModelSpec, x, tap: str, channels, target: TargetSpec, steps: int = 128, baseline: BaselineSpec = ZERO_INPUT
) -> ContributionMap:
    """Spread (h(x) - h(x')) * dy/dh over pixels.

    dy/dh is held at x; h(x) - h(x') is written as the path integral of its
    input Jacobian, approximated on ``steps`` right-endpoint rectangles.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x, x_base, trace, resolved = _prepare(model, x, target, baseline)
    idx, keep, channels = _keep(model, tap, channels)
    g_x = _backprop(trace, len(trace.values) - 1, _check_seed(trace, resolved.seed(trace.output)))[idx][0]
    acc = _path_sum(model, x, x_base, steps, idx, keep, g_fixed=g_x)
    return ContributionMap((x - x_base) * acc / steps, "actgrad-decomp", tap, channels, steps=steps)


def hig_decomp_map(
    model: ModelSpec, x, tap: str, channels, target: TargetSpec, steps: int = 10, baseline: BaselineSpec = ZERO_INPUT
) -> ContributionMap:
    """Integrated gradients restricted to paths through the selected channels.

    Summed over pixels this is ``hidden_ig(..., rule="tangent")`` of those
    channels; summed over all channels of a tap that every path crosses it is
    ``ig_input`` at the same ``steps``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x, x_base, trace, resolved = _prepare(model, x, target, baseline)
    idx, keep, channels = _keep(model, tap, channels)
    acc = _path_sum(model, x, x_base, steps, idx, keep, resolved=resolved)
    return ContributionMap((x - x_base) * acc / steps, "hig-decomp", tap, channels, steps=steps)


def contribution_map(model, x, tap, channels, target, algorithm: str, steps: int = 10, baseline: BaselineSpec = ZERO_INPUT):
    if algorithm == "inputgrad":
        return inputgrad_map(model, x, tap, channels, target, baseline)
    if algorithm == "actgrad-decomp":
        return actgrad_decomp_map(model, x, tap, channels, target, steps, baseline)
    if algorithm == "hig-decomp":
        return hig_decomp_map(model, x, tap, channels, target, steps, baseline)
    raise ValueError(f"unknown map algorithm {algorithm!r}")


# ---------------------------------------------------------------------------
# rendering

def median_filter(a, size: int = MEDIAN_KERNEL) -> np.ndarray:
    """2-d median over the size x size window whose top-left corner is each pixel.

    Pixels past the bottom and right edges replicate the last row and column.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("median_filter expects a 2-d array")
    padded = np.pad(a, ((0, size - 1), (0, size - 1)), mode="edge")
    return np.median(sliding_window_view(padded, (size, size)), axis=(-2, -1))


@dataclass(frozen=True, eq=False)
class RenderedMask:
    image: np.ndarray  # normalized image times mask
    mask: np.ndarray  # (H, W) in [0, 1]
    degenerate: bool = False


def _standardize(image: np.ndarray) -> np.ndarray:
    mean = image.mean(axis=(-2, -1), keepdims=True)
    std = image.std(axis=(-2, -1), keepdims=True)
    return (image - mean) / np.where(std > 0, std, 1.0)


def render_mask(cmap, image, positive_only: bool = True) -> RenderedMask:
    """Contrast-boosted mask from a (C, H, W) map, applied to the standardized image."""
    values = np.asarray(getattr(cmap, "values", cmap), dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if values.ndim == 2:
        values = values[None]
    if image.ndim == 2:
        image = image[None]
    if values.shape[-2:] != image.shape[-2:]:
        raise ValueError(f"map {values.shape} and image {image.shape} are not spatially aligned")
    if positive_only:
        values = np.maximum(values, 0.0)
    m = median_filter(values.mean(axis=0))
    lo, hi = m.min(), m.max()
    if hi == lo:
        mask, degenerate = np.ones_like(m), True
    else:
        mask, degenerate = np.clip((m - lo) / (hi - lo) * CONTRAST, 0.0, 1.0), False
    return RenderedMask(_standardize(image) * mask[None], mask, degenerate)


def to_uint8(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)
    return np.round(scaled * 255.0).astype(np.uint8)


def write_pgm(path, array) -> None:
    """8-bit binary PGM of a 2-d array, min-max scaled."""
    px = to_uint8(array)
    if px.ndim != 2:
        raise ValueError("write_pgm expects a 2-d array")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (px.shape[1], px.shape[0]))
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path} is not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    # pixel bytes may themselves look like whitespace, so count from the end
    if len(data) < w * h:
        raise ValueError(f"{path} is truncated")
    return np.frombuffer(data[len(data) - w * h:], dtype=np.uint8).reshape(h, w)


def save_map(cmap: ContributionMap, path, meta: dict | None = None):
    header = {
        "artifact": "contribution_map",
        "algorithm": cmap.algorithm,
        "tap": cmap.tap,
        "channels": list(cmap.channels),
        "sign": cmap.sign,
        "steps": cmap.steps,
        "meta": meta or {},
    }
    return envelope.write(path, header, [("values", cmap.values)])


def load_map(path) -> ContributionMap:
    header, blocks = envelope.read(path)
    if header.get("artifact") != "contribution_map":
        raise envelope.EnvelopeError(f"{path} holds a {header.get('artifact')!r}, not a contribution map")
    return ContributionMap(blocks["values"], header["algorithm"], header["tap"], tuple(header["channels"]), header["sign"], header["steps"])
