"""Dense float64 feedforward engine with reverse- and forward-mode derivatives.

Every array handled here carries a leading batch axis internally. The public
entry points accept either a single sample (shape ``model.input_shape``) or a
batch (``(n, *model.input_shape)``) and answer in the same form.

Values are indexed by position: value 0 is the input and value ``i + 1`` is the
output of layer ``i``. A tap names a layer whose output is recorded.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("dense", "conv2d", "relu", "softplus", "residual-add", "flatten", "avgpool")


class ShapeError(ValueError):
    """Input or layer shapes do not line up."""


class TraceMismatchError(ValueError):
    """A trace was paired with a model that did not produce it."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a feedforward stack.

    ``params`` holds ``weight``/``bias`` for dense and conv2d layers. ``hyper``
    holds ``stride``/``padding`` for conv2d, ``size`` for avgpool and
    ``source`` (a value index) for residual-add.
    """

    kind: str
    params: Mapping[str, np.ndarray] = field(default_factory=dict)
    hyper: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unsupported layer kind {self.kind!r}")
        object.__setattr__(self, "params", {k: _frozen(v) for k, v in self.params.items()})
        object.__setattr__(self, "hyper", dict(self.hyper))
        if self.kind == "conv2d" and self.params["weight"].ndim != 4:
            raise ShapeError("conv2d weight must be [out, in, kH, kW]")
        if self.kind == "dense" and self.params["weight"].ndim != 2:
            raise ShapeError("dense weight must be [out, in]")

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def dense(weight, bias=None) -> LayerSpec:
    weight = np.asarray(weight, dtype=np.float64)
    if bias is None:
        bias = np.zeros(weight.shape[0])
    return LayerSpec("dense", {"weight": weight, "bias": bias})


def conv2d(weight, bias=None, stride: int = 1, padding: int = 0) -> LayerSpec:
    weight = np.asarray(weight, dtype=np.float64)
    if bias is None:
        bias = np.zeros(weight.shape[0])
    return LayerSpec("conv2d", {"weight": weight, "bias": bias}, {"stride": stride, "padding": padding})


def relu() -> LayerSpec:
    return LayerSpec("relu")


def softplus() -> LayerSpec:
    return LayerSpec("softplus")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def avgpool(size: int | None = None) -> LayerSpec:
    """Non-overlapping average pooling; ``size=None`` pools globally."""
    return LayerSpec("avgpool", hyper={} if size is None else {"size": size})


def residual_add(source: int) -> LayerSpec:
    """Add value ``source`` (0 = model input, i + 1 = output of layer i)."""
    return LayerSpec("residual-add", hyper={"source": source})


# ---------------------------------------------------------------------------
# per-kind kernels; all operate on batched arrays

def _conv_windows(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_forward(layer, x):
    w, b = layer.params["weight"], layer.params["bias"]
    s, p = layer.hyper["stride"], layer.hyper["padding"]
    win = _conv_windows(x, w.shape[2], w.shape[3], s, p)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # n, ho, wo, o
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def _conv_linear(layer, t):
    # the linear part of the conv, used for tangents
    w = layer.params["weight"]
    s, p = layer.hyper["stride"], layer.hyper["padding"]
    win = _conv_windows(t, w.shape[2], w.shape[3], s, p)
    return np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def _conv_vjp(layer, x, g):
    w = layer.params["weight"]
    s, p = layer.hyper["stride"], layer.hyper["padding"]
    n, c, h, wd = x.shape
    _, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))  # n, ho, wo, c
            gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib.transpose(0, 3, 1, 2)
    return gxp[:, :, p:p + h, p:p + wd] if p else gxp


def _conv_param_grads(layer, x, g):
    w = layer.params["weight"]
    win = _conv_windows(x, w.shape[2], w.shape[3], layer.hyper["stride"], layer.hyper["padding"])
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    return {"weight": gw, "bias": g.sum(axis=(0, 2, 3))}


def _pool_size(layer, x_shape):
    return layer.hyper.get("size") or x_shape[-1]


def _avgpool_forward(layer, x):
    n, c, h, w = x.shape
    k = _pool_size(layer, x.shape)
    if layer.hyper.get("size") is None:
        return x.mean(axis=(2, 3), keepdims=True)
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


def _avgpool_vjp(layer, x, g):
    n, c, h, w = x.shape
    if layer.hyper.get("size") is None:
        return np.broadcast_to(g / (h * w), x.shape).copy()
    k = layer.hyper["size"]
    up = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
    return up / (k * k)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


def _layer_forward(layer: LayerSpec, x, values):
    k = layer.kind
    if k == "dense":
        return x @ layer.params["weight"].T + layer.params["bias"]
    if k == "conv2d":
        return _conv_forward(layer, x)
    if k == "relu":
        return np.maximum(x, 0.0)
    if k == "softplus":
        return _softplus(x)
    if k == "flatten":
        return x.reshape(x.shape[0], -1)
    if k == "avgpool":
        return _avgpool_forward(layer, x)
    if k == "residual-add":
        return x + values[layer.hyper["source"]]
    raise AssertionError(k)


def _layer_vjp(layer: LayerSpec, x, out, g):
    """Gradient with respect to the layer input (the residual branch is handled by the caller)."""
    k = layer.kind
    if k == "dense":
        return g @ layer.params["weight"]
    if k == "conv2d":
        return _conv_vjp(layer, x, g)
    if k == "relu":
        # subgradient at 0 is 0
        return g * (x > 0)
    if k == "softplus":
        return g * _sigmoid(x)
    if k == "flatten":
        return g.reshape(x.shape)
    if k == "avgpool":
        return _avgpool_vjp(layer, x, g)
    if k == "residual-add":
        return g
    raise AssertionError(k)


def _layer_jvp(layer: LayerSpec, x, t, tangents):
    k = layer.kind
    if k == "dense":
        return t @ layer.params["weight"].T
    if k == "conv2d":
        return _conv_linear(layer, t)
    if k == "relu":
        return t * (x > 0)
    if k == "softplus":
        return t * _sigmoid(x)
    if k == "flatten":
        return t.reshape(t.shape[0], -1)
    if k == "avgpool":
        return _avgpool_forward(layer, t)
    if k == "residual-add":
        return t + tangents[layer.hyper["source"]]
    raise AssertionError(k)


def _layer_param_grads(layer: LayerSpec, x, g):
    if layer.kind == "dense":
        return {"weight": g.T @ x, "bias": g.sum(axis=0)}
    if layer.kind == "conv2d":
        return _conv_param_grads(layer, x, g)
    return {}


def _output_shape(layer: LayerSpec, shape: tuple, shapes: list, index: int) -> tuple:
    k = layer.kind
    if k == "dense":
        w = layer.params["weight"]
        if shape != (w.shape[1],):
            raise ShapeError(f"layer {index}: dense expects ({w.shape[1]},), got {shape}")
        if layer.params["bias"].shape != (w.shape[0],):
            raise ShapeError(f"layer {index}: bias shape {layer.params['bias'].shape}")
        return (w.shape[0],)
    if k == "conv2d":
        w = layer.params["weight"]
        if len(shape) != 3 or shape[0] != w.shape[1]:
            raise ShapeError(f"layer {index}: conv2d expects {w.shape[1]} input channels, got {shape}")
        s, p = layer.hyper.get("stride", 1), layer.hyper.get("padding", 0)
        if s < 1 or p < 0:
            raise ShapeError(f"layer {index}: bad stride/padding")
        ho = (shape[1] + 2 * p - w.shape[2]) // s + 1
        wo = (shape[2] + 2 * p - w.shape[3]) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {index}: kernel larger than padded input {shape}")
        return (w.shape[0], ho, wo)
    if k in ("relu", "softplus"):
        return shape
    if k == "flatten":
        return (int(np.prod(shape)),)
    if k == "avgpool":
        if len(shape) != 3:
            raise ShapeError(f"layer {index}: avgpool expects [C, H, W], got {shape}")
        size = layer.hyper.get("size")
        if size is None:
            return (shape[0], 1, 1)
        if shape[1] % size or shape[2] % size:
            raise ShapeError(f"layer {index}: pool size {size} does not divide {shape[1:]}")
        return (shape[0], shape[1] // size, shape[2] // size)
    if k == "residual-add":
        src = layer.hyper["source"]
        if not 0 <= src <= index:
            raise ShapeError(f"layer {index}: residual source {src} is not an earlier value")
        if shapes[src] != shape:
            raise ShapeError(f"layer {index}: residual shapes {shapes[src]} vs {shape}")
        return shape
    raise AssertionError(k)


@dataclass(frozen=True)
class ModelSpec:
    """An immutable layer stack with named taps (tap name -> layer index)."""

    input_shape: tuple
    layers: tuple
    taps: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "taps", dict(self.taps))
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            if not isinstance(layer, LayerSpec):
                raise TypeError(f"layer {i} is not a LayerSpec")
            shapes.append(_output_shape(layer, shapes[-1], shapes, i))
        object.__setattr__(self, "_shapes", tuple(shapes))
        for name, idx in self.taps.items():
            if not 0 <= idx < len(self.layers):
                raise ValueError(f"tap {name!r} refers to missing layer {idx}")

    @property
    def value_shapes(self) -> tuple:
        return self._shapes

    @property
    def output_shape(self) -> tuple:
        return self._shapes[-1]

    def tap_shape(self, tap: str) -> tuple:
        return self._shapes[self.tap_index(tap) + 1]

    def tap_index(self, tap: str) -> int:
        try:
            return self.taps[tap]
        except KeyError:
            raise KeyError(f"unknown tap {tap!r}; available: {sorted(self.taps)}") from None

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def parameters(self) -> list:
        """Flat list of (layer index, name, array) in declaration order."""
        return [(i, name, arr) for i, layer in enumerate(self.layers) for name, arr in layer.params.items()]

    def with_parameters(self, arrays: Sequence[np.ndarray]) -> "ModelSpec":
        it = iter(arrays)
        layers = []
        for layer in self.layers:
            params = {name: next(it) for name in layer.params}
            layers.append(LayerSpec(layer.kind, params, layer.hyper))
        return ModelSpec(self.input_shape, layers, self.taps)

    def fingerprint(self) -> str:
        fp = self.__dict__.get("_fingerprint")
        if fp is None:
            h = hashlib.sha256(repr((self.input_shape, self.taps)).encode())
            for layer in self.layers:
                h.update(layer.kind.encode())
                h.update(repr(sorted(layer.hyper.items())).encode())
                for name, arr in layer.params.items():
                    h.update(name.encode())
                    h.update(np.ascontiguousarray(arr).tobytes())
            fp = h.hexdigest()
            object.__setattr__(self, "_fingerprint", fp)
        return fp


@dataclass(frozen=True)
class ActivationTrace:
    """Recorded values of one forward pass (batched internally)."""

    model: ModelSpec
    values: tuple
    batched: bool
    channel_masks: Mapping[int, np.ndarray] = field(default_factory=dict)

    def _unbatch(self, a):
        return a if self.batched else a[0]

    @property
    def input(self) -> np.ndarray:
        return self._unbatch(self.values[0])

    @property
    def output(self) -> np.ndarray:
        return self._unbatch(self.values[-1])

    @property
    def activations(self) -> dict:
        return {name: self._unbatch(self.values[idx + 1]) for name, idx in self.model.taps.items()}

    def activation(self, tap: str) -> np.ndarray:
        return self._unbatch(self.values[self.model.tap_index(tap) + 1])


def _as_batch(model: ModelSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.input_shape:
        return x[None], False
    if x.ndim == len(model.input_shape) + 1 and x.shape[1:] == model.input_shape:
        return x, True
    raise ShapeError(f"layer 0: input shape {x.shape} does not match model input {model.input_shape}")


def _mask_indices(model: ModelSpec, channel_masks) -> dict:
    """Map tap names to value indices with float keep-vectors over channels."""
    out = {}
    for tap, keep in (channel_masks or {}).items():
        shape = model.tap_shape(tap)
        keep = np.asarray(keep, dtype=np.float64)
        if keep.shape != (shape[0],):
            raise ValueError(f"mask for tap {tap!r} must have {shape[0]} entries")
        out[model.tap_index(tap) + 1] = keep
    return out


def _apply_channel_mask(a, keep):
    return a * keep.reshape((1, -1) + (1,) * (a.ndim - 2))


def forward(model: ModelSpec, x, channel_masks: Mapping[str, np.ndarray] | None = None) -> ActivationTrace:
    """Run the model, recording every value.

    ``channel_masks`` maps a tap to a keep-vector over its channels; the tap's
    output is multiplied by it before flowing on (used for ablation).
    """
    xb, batched = _as_batch(model, x)
    if not np.all(np.isfinite(xb)):
        raise ValueError("input contains non-finite values")
    masks = _mask_indices(model, channel_masks)
    values = [xb]
    for i, layer in enumerate(model.layers):
        out = _layer_forward(layer, values[-1], values)
        if i + 1 in masks:
            out = _apply_channel_mask(out, masks[i + 1])
        values.append(out)
    return ActivationTrace(model, tuple(values), batched, masks)


def _backprop(trace: ActivationTrace, start: int, seed, stop_at=None, grad_mask=None) -> list:
    """Reverse sweep from value ``start`` down to the input.

    Returns the list of gradients for every value index <= start. When
    ``grad_mask`` is ``(value index, keep)``, the gradient at that value is
    multiplied by ``keep`` once it is complete.
    """
    model, values = trace.model, trace.values
    grads = [None] * (start + 1)
    grads[start] = seed
    for i in range(start - 1, -1, -1):
        g = grads[i + 1]
        if g is None:
            continue
        if i + 1 in trace.channel_masks:
            g = _apply_channel_mask(g, trace.channel_masks[i + 1])
        if grad_mask is not None and grad_mask[0] == i + 1:
            g = _apply_channel_mask(g, grad_mask[1])
        grads[i + 1] = g
        layer = model.layers[i]
        gx = _layer_vjp(layer, values[i], values[i + 1], g)
        grads[i] = gx if grads[i] is None else grads[i] + gx
        if layer.kind == "residual-add":
            src = layer.hyper["source"]
            grads[src] = g if grads[src] is None else grads[src] + g
    if grads[0] is None:
        grads[0] = np.zeros_like(values[0])
    return grads


def _check_seed(trace: ActivationTrace, seed) -> np.ndarray:
    seed = np.asarray(seed, dtype=np.float64)
    expected = trace.values[-1].shape if trace.batched else trace.values[-1].shape[1:]
    if seed.shape != expected:
        raise ShapeError(f"seed shape {seed.shape} does not match output shape {expected}")
    return seed if trace.batched else seed[None]


def _check_trace(trace: ActivationTrace, model: ModelSpec | None):
    if not isinstance(trace, ActivationTrace):
        raise TraceMismatchError("not an ActivationTrace")
    if model is not None and model is not trace.model and model.fingerprint() != trace.model.fingerprint():
        raise TraceMismatchError("trace was produced by a different model")


def backward(trace: ActivationTrace, output_seed, model: ModelSpec | None = None) -> dict:
    """Gradient of ``seed . output`` with respect to every tapped activation.

    The special key ``"__input__"`` carries the input gradient.
    """
    _check_trace(trace, model)
    seed = _check_seed(trace, output_seed)
    grads = _backprop(trace, len(trace.values) - 1, seed)
    out = {}
    for name, idx in trace.model.taps.items():
        g = grads[idx + 1]
        if g is None:
            g = np.zeros_like(trace.values[idx + 1])
        out[name] = trace._unbatch(g)
    out["__input__"] = trace._unbatch(grads[0])
    return out


@dataclass(frozen=True)
class ChannelMask:
    """Selects a channel subset at one tap for gradient-path isolation."""

    tap: str
    channels: tuple

    def keep_vector(self, n_channels: int) -> np.ndarray:
        keep = np.zeros(n_channels)
        for c in self.channels:
            if not 0 <= c < n_channels:
                raise IndexError(f"channel {c} out of range for tap {self.tap!r} with {n_channels} channels")
            keep[c] = 1.0
        return keep


def masked_input_gradient(trace: ActivationTrace, seed, mask: ChannelMask | None) -> np.ndarray:
    """Input gradient from a finished trace, optionally restricted to paths through ``mask``."""
    seed = _check_seed(trace, seed)
    last = len(trace.values) - 1
    if mask is None:
        return trace._unbatch(_backprop(trace, last, seed)[0])
    model = trace.model
    idx = model.tap_index(mask.tap) + 1
    keep = mask.keep_vector(model.value_shapes[idx][0])
    # first get the complete gradient at the cut, then restart from it so that
    # skip connections bypassing the cut contribute nothing
    g_cut = _backprop(trace, last, seed)[idx]
    if g_cut is None:
        g_cut = np.zeros_like(trace.values[idx])
    g_cut = _apply_channel_mask(g_cut, keep)
    return trace._unbatch(_backprop(trace, idx, g_cut)[0])


def grad_wrt_input(model: ModelSpec, x, output_seed, channel_mask: ChannelMask | None = None) -> np.ndarray:
    """d(seed . y)/dx, restricted to paths through ``channel_mask`` when given."""
    return masked_input_gradient(forward(model, x), output_seed, channel_mask)


def jvp(trace: ActivationTrace, direction) -> list:
    """Forward-mode tangents of every value along ``direction`` in input space."""
    d = np.asarray(direction, dtype=np.float64)
    d = d if trace.batched else d[None]
    if d.shape != trace.values[0].shape:
        raise ShapeError(f"direction shape {d.shape} does not match input {trace.values[0].shape}")
    tangents = [d]
    for i, layer in enumerate(trace.model.layers):
        t = _layer_jvp(layer, trace.values[i], tangents[-1], tangents)
        if i + 1 in trace.channel_masks:
            t = _apply_channel_mask(t, trace.channel_masks[i + 1])
        tangents.append(t)
    return tangents


def parameter_gradients(trace: ActivationTrace, output_seed) -> list:
    """Gradients of ``seed . output`` for every parameter, in ``ModelSpec.parameters`` order."""
    seed = _check_seed(trace, output_seed)
    grads = _backprop(trace, len(trace.values) - 1, seed)
    out = []
    for i, layer in enumerate(trace.model.layers):
        if not layer.params:
            continue
        g = grads[i + 1]
        if i + 1 in trace.channel_masks:
            g = _apply_channel_mask(g, trace.channel_masks[i + 1])
        pg = _layer_param_grads(layer, trace.values[i], g)
        out.extend(pg[name] for name in layer.params)
    return out


def finite_difference_gradient(
    model: ModelSpec, x, target, step: float = 1e-5
) -> np.ndarray:
    """Central-difference input gradient of ``target(model output)``.

    ``target`` is a ``TargetSpec`` or any scalar function of the
    single-sample output.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    if hasattr(target, "resolve"):
        # a TargetSpec: freeze its index choices at the unperturbed input
        target = target.resolve(forward(model, x).output).value
    flat = x.reshape(-1)
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        batch = np.stack([plus.reshape(x.shape), minus.reshape(x.shape)])
        out = forward(model, batch).output
        grad[i] = (target(out[0]) - target(out[1])) / (2 * step)
    return grad.reshape(x.shape)
