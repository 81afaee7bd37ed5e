"""Per-hidden-unit contributions to a scalar target.

Three algorithms are provided for any tap of any model:

* ``actgrad``: (h - h') * dy/dh with the gradient taken at the input.
* ``hinput_grad``: dy/dh times the directional derivative of h along x - x'.
* ``hidden_ig``: integrated gradients evaluated at the hidden layer along the
  straight input-space path from x' to x.

``ig_input`` is ordinary input-layer integrated gradients on the same grid.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .autodiff import ModelSpec, _backprop, _check_seed, forward, jvp
from .targets import ResolvedTarget, TargetSpec

ALGORITHMS = ("actgrad", "hinput_grad", "hidden_ig")
DEFAULT_STEPS = 10
# number of path points evaluated per batched forward
_PATH_CHUNK = 64


@dataclass(frozen=True)
class BaselineSpec:
    """Reference point for a contribution.

    ``zero_hidden`` uses a zero hidden activation (ActGrad's usual
    convention); ``zero_input`` and ``custom_input`` give an input x' whose
    activations serve as the hidden baseline.
    """

    kind: str = "zero_input"
    value: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("zero_input", "zero_hidden", "custom_input"):
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if self.kind == "custom_input" and self.value is None:
            raise ValueError("custom_input baseline needs a value")

    @property
    def id(self) -> str:
        return self.kind

    def input_for(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "custom_input":
            v = np.asarray(self.value, dtype=np.float64)
            if v.shape != x.shape:
                raise ValueError(f"baseline shape {v.shape} does not match input {x.shape}")
            return v
        return np.zeros_like(x)


ZERO_INPUT = BaselineSpec("zero_input")
ZERO_HIDDEN = BaselineSpec("zero_hidden")


@dataclass(frozen=True, eq=False)
class ContributionTensor:
    tap: str
    algorithm: str
    target: TargetSpec
    values: np.ndarray
    baseline: str
    steps: int | None = None


def _prepare(model: ModelSpec, x, target: TargetSpec):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ValueError(f"expected a single input of shape {model.input_shape}, got {x.shape}")
    trace = forward(model, x)
    resolved = target.resolve(trace.output)
    return x, trace, resolved


def _tap_value_index(model: ModelSpec, tap: str) -> int:
    return model.tap_index(tap) + 1


def _grads_at(trace, resolved: ResolvedTarget, scale: float = 1.0):
    """Full backward sweep seeded by the target; returns per-value gradients."""
    out = trace.values[-1]
    seed = resolved.seed(out if trace.batched else out[0])
    seed = _check_seed(trace, np.asarray(seed) * scale)
    return _backprop(trace, len(trace.values) - 1, seed)


def actgrad(model: ModelSpec, x, tap: str, target: TargetSpec, baseline: BaselineSpec = ZERO_HIDDEN) -> ContributionTensor:
    x, trace, resolved = _prepare(model, x, target)
    idx = _tap_value_index(model, tap)
    g = _grads_at(trace, resolved)[idx][0]
    h = trace.values[idx][0]
    if baseline.kind == "zero_hidden":
        h_base = np.zeros_like(h)
    else:
        h_base = forward(model, baseline.input_for(x)).values[idx][0]
    return ContributionTensor(tap, "actgrad", target, (h - h_base) * g, baseline.id)


def hinput_grad(model: ModelSpec, x, tap: str, target: TargetSpec, baseline: BaselineSpec = ZERO_INPUT) -> ContributionTensor:
    if baseline.kind == "zero_hidden":
        raise ValueError("hinput_grad needs an input-space baseline")
    x, trace, resolved = _prepare(model, x, target)
    idx = _tap_value_index(model, tap)
    g = _grads_at(trace, resolved)[idx][0]
    dh = jvp(trace, x - baseline.input_for(x))[idx][0]
    return ContributionTensor(tap, "hinput_grad", target, g * dh, baseline.id)


def _path_points(x, x_base, steps):
    alphas = np.arange(steps + 1) / steps
    return x_base[None] + alphas.reshape((-1,) + (1,) * x.ndim) * (x - x_base)[None]


def hidden_ig(
    model: ModelSpec,
    x,
    tap: str,
    target: TargetSpec,
    baseline: BaselineSpec = ZERO_INPUT,
    steps: int = DEFAULT_STEPS,
    rule: str = "difference",
) -> ContributionTensor:
    """Hidden-layer integrated gradients with ``steps`` Riemann rectangles.

    ``rule="difference"`` sums dy/dh at alpha=k/m times h(k/m) - h((k-1)/m).
    ``rule="tangent"`` instead uses the directional derivative of h at k/m
    times 1/m, which is the discretization whose input-space decomposition
    sums exactly to both this value and ``ig_input`` at the same ``steps``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if rule not in ("difference", "tangent"):
        raise ValueError(f"unknown Riemann rule {rule!r}")
    if baseline.kind == "zero_hidden":
        raise ValueError("hidden_ig needs an input-space baseline")
    x, trace_x, resolved = _prepare(model, x, target)
    x_base = baseline.input_for(x)
    idx = _tap_value_index(model, tap)
    points = _path_points(x, x_base, steps)
    delta = x - x_base
    total = np.zeros(model.value_shapes[idx])
    prev_h = None
    for start in range(0, steps + 1, _PATH_CHUNK):
        chunk = points[start:start + _PATH_CHUNK]
        trace = forward(model, chunk)
        h = trace.values[idx]
        grads = _grads_at(trace, resolved)[idx]
        if rule == "difference":
            hs = h if prev_h is None else np.concatenate([prev_h, h])
            dh = np.diff(hs, axis=0)
            g = grads if prev_h is not None else grads[1:]
            total += (g * dh).sum(axis=0)
            prev_h = h[-1:]
        else:
            tangent = jvp(trace, np.broadcast_to(delta, chunk.shape))[idx]
            lo = 1 if start == 0 else 0
            total += (grads[lo:] * tangent[lo:]).sum(axis=0) / steps
    return ContributionTensor(tap, "hidden_ig", target, total, baseline.id, steps)


def ig_input(model: ModelSpec, x, target: TargetSpec, baseline: BaselineSpec = ZERO_INPUT, steps: int = DEFAULT_STEPS) -> np.ndarray:
    """Input-space integrated gradients with gradients at alpha = k/m, k = 1..m."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if baseline.kind == "zero_hidden":
        raise ValueError("ig_input needs an input-space baseline")
    x, _, resolved = _prepare(model, x, target)
    x_base = baseline.input_for(x)
    points = _path_points(x, x_base, steps)[1:]
    acc = np.zeros_like(x)
    for start in range(0, steps, _PATH_CHUNK):
        trace = forward(model, points[start:start + _PATH_CHUNK])
        acc += _grads_at(trace, resolved)[0].sum(axis=0)
    return (x - x_base) * acc / steps


def target_value(model: ModelSpec, x, target: TargetSpec, at=None) -> float:
    """Target at ``at`` (default ``x``) with indices resolved at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    resolved = target.resolve(forward(model, x).output)
    point = x if at is None else np.asarray(at, dtype=np.float64)
    return float(resolved.value(forward(model, point).output))


def contribution(model, x, tap, target, algorithm, steps=DEFAULT_STEPS, baseline=None) -> ContributionTensor:
    """Dispatch to one of the algorithms with its default baseline."""
    if algorithm == "actgrad":
        return actgrad(model, x, tap, target, baseline or ZERO_HIDDEN)
    if algorithm == "hinput_grad":
        return hinput_grad(model, x, tap, target, baseline or ZERO_INPUT)
    if algorithm == "hidden_ig":
        return hidden_ig(model, x, tap, target, baseline or ZERO_INPUT, steps)
    raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")


class BatchContributionError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"contribution failed at sample {index}: {cause}")
        self.index = index


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CODEC_THREADS", "1")))
    except ValueError:
        return 1


def batch_contributions(
    model: ModelSpec,
    inputs: Iterable[np.ndarray],
    tap: str,
    target: TargetSpec,
    algorithm: str,
    steps: int = DEFAULT_STEPS,
    baseline: BaselineSpec | None = None,
    threads: int | None = None,
) -> Iterator[ContributionTensor]:
    """Stream contributions in input order; ``threads`` defaults to ``$CODEC_THREADS``."""
    threads = threads or _threads()

    def one(item):
        i, x = item
        try:
            return contribution(model, x, tap, target, algorithm, steps, baseline)
        except Exception as exc:
            raise BatchContributionError(i, exc) from exc

    items = enumerate(inputs)
    if threads == 1:
        for item in items:
            yield one(item)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield from pool.map(one, items)
