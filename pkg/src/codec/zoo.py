"""Reference models, synthetic datasets, training and model files."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import envelope
from .autodiff import (
    LayerSpec,
    ModelSpec,
    avgpool,
    conv2d,
    dense,
    flatten,
    forward,
    parameter_gradients,
    relu,
    residual_add,
    softplus,
)
from .targets import softmax

log = logging.getLogger(__name__)

DATASET_KINDS = ("synthetic-shapes-classification", "synthetic-stimulus-regression")
SHAPE_CLASSES = ("hstripes", "vstripes", "square", "disk", "ring", "cross", "diagonal", "checker")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    n_samples: int
    input_shape: tuple = (3, 16, 16)
    n_classes: int = 8
    n_cells: int = 8
    seed: int = 0
    noise: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unsupported dataset kind {self.kind!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.kind == DATASET_KINDS[0] and not 2 <= self.n_classes <= len(SHAPE_CLASSES):
            raise ValueError(f"n_classes must be in [2, {len(SHAPE_CLASSES)}]")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Inputs plus integer labels (classification) or rate targets (regression).

    Regression datasets also carry ``cell_types``, the planted type of each
    output cell in the ground-truth network.
    """

    spec: DatasetSpec
    inputs: np.ndarray
    labels: np.ndarray
    cell_types: np.ndarray | None = None

    @property
    def is_classification(self) -> bool:
        return self.spec.kind == DATASET_KINDS[0]

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.spec, self.inputs[idx], self.labels[idx], self.cell_types)


# ---------------------------------------------------------------------------
# synthetic data

def _shape_mask(cls: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    extent = rng.uniform(0.3, 0.5) * size
    cy, cx = rng.uniform(extent / 2 + 0.5, size - extent / 2 - 0.5, size=2)
    inside = (np.abs(yy - cy) <= extent / 2) & (np.abs(xx - cx) <= extent / 2)
    period = rng.integers(2, 4) * 2
    phase = rng.integers(0, period)
    if cls == "hstripes":
        m = inside & (((yy + phase) % period) < period / 2)
    elif cls == "vstripes":
        m = inside & (((xx + phase) % period) < period / 2)
    elif cls == "square":
        m = inside
    elif cls == "disk":
        m = (yy - cy) ** 2 + (xx - cx) ** 2 <= (extent / 2) ** 2
    elif cls == "ring":
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        m = (r <= extent / 2) & (r >= extent / 2 - 1.5)
    elif cls == "cross":
        m = inside & ((np.abs(yy - cy) <= 1.0) | (np.abs(xx - cx) <= 1.0))
    elif cls == "diagonal":
        m = inside & (np.abs((yy - cy) - (xx - cx)) <= 1.0)
    elif cls == "checker":
        cell = period // 2
        m = inside & ((((yy + phase) // cell) + ((xx + phase) // cell)) % 2 == 0)
    else:
        raise AssertionError(cls)
    return m.astype(np.float64)


def _shapes_dataset(spec: DatasetSpec):
    rng = np.random.default_rng(spec.seed)
    c, h, w = spec.input_shape
    if h != w:
        raise ValueError("synthetic shapes need square images")
    labels = np.arange(spec.n_samples) % spec.n_classes
    labels = labels[rng.permutation(spec.n_samples)]
    images = np.empty((spec.n_samples, c, h, w))
    for i, label in enumerate(labels):
        mask = _shape_mask(SHAPE_CLASSES[label], h, rng)
        color = rng.uniform(0.4, 1.0, size=c)
        background = rng.normal(0.0, spec.noise, size=(c, h, w))
        images[i] = background + color[:, None, None] * mask[None]
    return images, labels.astype(np.float64)


def _center_surround(size: int, sign: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] - (size - 1) / 2
    r2 = yy ** 2 + xx ** 2
    center = np.exp(-r2 / (2 * 0.8 ** 2))
    surround = np.exp(-r2 / (2 * 2.0 ** 2))
    k = center / center.sum() - 0.6 * surround / surround.sum()
    return sign * k


def ground_truth_retina(spec: DatasetSpec) -> tuple[ModelSpec, np.ndarray]:
    """Hidden generator for the regression set: ON/OFF center-surround units read out per cell.

    Returns the pre-rectification model and each cell's planted type (0 = ON, 1 = OFF).
    """
    lags, h, w = spec.input_shape
    rng = np.random.default_rng(spec.seed + 1_000_003)
    ks = 5
    temporal = np.exp(-np.arange(lags)[::-1] / 1.5)
    temporal = temporal / temporal.sum()
    weight = np.stack([
        temporal[:, None, None] * _center_surround(ks, +1.0)[None],
        temporal[:, None, None] * _center_surround(ks, -1.0)[None],
    ]) * 12.0
    oh, ow = h - ks + 1, w - ks + 1
    types = np.arange(spec.n_cells) % 2
    readout = np.zeros((spec.n_cells, 2, oh, ow))
    yy, xx = np.mgrid[0:oh, 0:ow]
    for cell, t in enumerate(types):
        cy, cx = rng.uniform(1.5, oh - 2.5), rng.uniform(1.5, ow - 2.5)
        readout[cell, t] = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 1.2 ** 2))
    model = ModelSpec(
        spec.input_shape,
        [conv2d(weight, np.full(2, -0.05)), relu(), flatten(), dense(readout.reshape(spec.n_cells, -1), np.full(spec.n_cells, 0.05))],
        {"units": 1},
    )
    return model, types


def _stimulus_dataset(spec: DatasetSpec):
    rng = np.random.default_rng(spec.seed)
    lags, h, w = spec.input_shape
    n_frames = spec.n_samples + lags - 1
    frames = rng.normal(size=(n_frames, h, w))
    # spatially smooth with a small box blur, then correlate in time
    padded = np.pad(frames, ((0, 0), (1, 1), (1, 1)), mode="wrap")
    frames = sum(padded[:, i:i + h, j:j + w] for i in range(3) for j in range(3)) / 3.0
    for t in range(1, n_frames):
        frames[t] = 0.5 * frames[t - 1] + math.sqrt(1 - 0.25) * frames[t]
    idx = np.arange(spec.n_samples)[:, None] + np.arange(lags)[None]
    clips = frames[idx]
    gt, types = ground_truth_retina(spec)
    pre = forward(gt, clips).output
    rates = np.maximum(pre + rng.normal(0.0, spec.noise, size=pre.shape), 0.0)
    return clips, rates, types


def generate_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "synthetic-shapes-classification":
        x, y = _shapes_dataset(spec)
        return Dataset(spec, x, y)
    if spec.kind == "synthetic-stimulus-regression":
        x, y, types = _stimulus_dataset(spec)
        return Dataset(spec, x, y, types)
    raise ValueError(f"unsupported dataset kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# model builders

def _he_conv(rng, out_c, in_c, k):
    return rng.normal(0.0, math.sqrt(2.0 / (in_c * k * k)), size=(out_c, in_c, k, k))


def build_toy_cnn(n_classes: int, depth: int, channels_per_layer, input_shape=(3, 16, 16), seed: int = 0) -> ModelSpec:
    """Conv/ReLU stages, then one residual block, global average pool and a dense head.

    Stage ``i`` is a 3x3 conv (stride 1 for the first stage, 2 afterwards).
    The residual block keeps the last stage's width: conv, relu, conv, add, relu.
    Taps: ``conv0`` .. ``conv{depth-1}``, ``res_inner``, ``res_out``.
    """
    channels = list(channels_per_layer)
    if depth < 2:
        raise ValueError("depth must be >= 2")
    if len(channels) != depth:
        raise ValueError(f"expected {depth} channel counts, got {len(channels)}")
    rng = np.random.default_rng(seed)
    layers: list[LayerSpec] = []
    taps = {}
    in_c = input_shape[0]
    for i, out_c in enumerate(channels):
        stride = 1 if i == 0 else 2
        layers += [conv2d(_he_conv(rng, out_c, in_c, 3), np.zeros(out_c), stride, 1), relu()]
        taps[f"conv{i}"] = len(layers) - 1
        in_c = out_c
    block_input = len(layers)  # value index of the last stage output
    layers += [conv2d(_he_conv(rng, in_c, in_c, 3), np.zeros(in_c), 1, 1), relu()]
    taps["res_inner"] = len(layers) - 1
    layers += [
        conv2d(_he_conv(rng, in_c, in_c, 3) * 0.5, np.zeros(in_c), 1, 1),
        residual_add(block_input),
        relu(),
    ]
    taps["res_out"] = len(layers) - 1
    layers += [avgpool(), flatten(), dense(rng.normal(0, math.sqrt(1.0 / in_c), size=(n_classes, in_c)), np.zeros(n_classes))]
    return ModelSpec(input_shape, layers, taps)


def toy_cnn_param_count(n_classes: int, channels_per_layer, in_channels: int = 3) -> int:
    total, c_in = 0, in_channels
    for c in channels_per_layer:
        total += c * c_in * 9 + c
        c_in = c
    total += 2 * (c_in * c_in * 9 + c_in)
    return total + n_classes * c_in + n_classes


RETINA_CELL_RANGE = (4, 17)


def build_retina_model(n_cells: int, input_shape=(8, 12, 12), kernel_sizes=(5, 3), seed: int = 0) -> ModelSpec:
    """Two 8-channel conv layers and a dense softplus readout (three layers in all).

    Taps ``layer1`` and ``layer2`` sit after each conv's ReLU.
    """
    lo, hi = RETINA_CELL_RANGE
    if not lo <= n_cells <= hi:
        warnings.warn(f"n_cells={n_cells} is outside the typical {lo}-{hi} range", stacklevel=2)
    rng = np.random.default_rng(seed)
    k1, k2 = kernel_sizes
    c, h, w = input_shape
    h2, w2 = h - k1 - k2 + 2, w - k1 - k2 + 2
    layers = [
        conv2d(_he_conv(rng, 8, c, k1), np.zeros(8)), relu(),
        conv2d(_he_conv(rng, 8, 8, k2), np.zeros(8)), relu(),
        flatten(),
        dense(rng.normal(0, math.sqrt(1.0 / (8 * h2 * w2)), size=(n_cells, 8 * h2 * w2)), np.zeros(n_cells)),
        softplus(),
    ]
    return ModelSpec(input_shape, layers, {"layer1": 1, "layer2": 3})


# ---------------------------------------------------------------------------
# training

class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    lr: float = 3e-3
    batch_size: int = 64
    optimizer: str = "adam"
    seed: int = 0
    loss: str | None = None  # default: cross_entropy / poisson by dataset kind
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in (None, "cross_entropy", "mse", "poisson"):
            raise ValueError(f"unknown loss {self.loss!r}")


def loss_and_seed(kind: str, out: np.ndarray, y: np.ndarray):
    """Batch-mean loss and its gradient with respect to the outputs."""
    n = out.shape[0]
    if kind == "cross_entropy":
        labels = y.astype(int)
        p = softmax(out)
        loss = -np.log(np.maximum(p[np.arange(n), labels], 1e-300)).mean()
        seed = p
        seed[np.arange(n), labels] -= 1.0
        return loss, seed / n
    if kind == "mse":
        err = out - y
        return 0.5 * (err ** 2).sum(axis=1).mean(), err / n
    if kind == "poisson":
        r = np.maximum(out, 1e-8)
        return (r - y * np.log(r)).sum(axis=1).mean(), (1.0 - y / r) / n
    raise ValueError(kind)


@dataclass
class _Adam:
    params: list
    lr: float
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(model: ModelSpec, dataset: Dataset, config: TrainConfig) -> tuple[ModelSpec, list[float]]:
    """Minibatch training; returns the trained model and per-epoch mean loss."""
    if dataset.inputs.shape[1:] != model.input_shape:
        raise ValueError(f"dataset inputs {dataset.inputs.shape[1:]} do not match model {model.input_shape}")
    loss_kind = config.loss or ("cross_entropy" if dataset.is_classification else "poisson")
    if loss_kind == "cross_entropy" and dataset.labels.max() >= model.output_shape[0]:
        raise ValueError("labels exceed the number of model outputs")
    params = [np.array(arr) for _, _, arr in model.parameters()]
    opt = _Adam(params, config.lr) if config.optimizer == "adam" else None
    rng = np.random.default_rng(config.seed)
    history = []
    n = len(dataset)
    current = model
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            trace = forward(current, dataset.inputs[idx])
            loss, seed = loss_and_seed(loss_kind, trace.output, dataset.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            grads = parameter_gradients(trace, seed)
            if config.weight_decay:
                grads = [g + config.weight_decay * p for g, p in zip(grads, params)]
            if opt is not None:
                opt.step(grads)
            else:
                for p, g in zip(params, grads):
                    p -= config.lr * g
            current = model.with_parameters(params)
            total += loss * len(idx)
        history.append(total / n)
        if not np.isfinite(history[-1]):
            raise TrainingDivergedError(epoch)
        log.debug("epoch %d loss %.5f", epoch, history[-1])
    return current, history


def predict(model: ModelSpec, inputs: np.ndarray, batch_size: int = 256, channel_masks=None) -> np.ndarray:
    outs = [forward(model, inputs[i:i + batch_size], channel_masks).output for i in range(0, len(inputs), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0,) + model.output_shape)


def accuracy(model: ModelSpec, dataset: Dataset, channel_masks=None) -> float:
    pred = predict(model, dataset.inputs, channel_masks=channel_masks).argmax(axis=1)
    return float((pred == dataset.labels.astype(int)).mean())


# ---------------------------------------------------------------------------
# files

def model_header(model: ModelSpec, meta: dict | None = None) -> dict:
    layers = []
    for layer in model.layers:
        layers.append({
            "kind": layer.kind,
            "hyper": dict(layer.hyper),
            "params": [{"name": k, "shape": list(v.shape)} for k, v in layer.params.items()],
        })
    return {
        "artifact": "model",
        "input_shape": list(model.input_shape),
        "layers": layers,
        "taps": dict(model.taps),
        "meta": meta or {},
    }


def model_blocks(model: ModelSpec) -> list:
    return [(f"layer{i}.{name}", arr) for i, name, arr in model.parameters()]


def model_from_parts(header: dict, blocks: dict) -> ModelSpec:
    layers = []
    for i, entry in enumerate(header["layers"]):
        params = {p["name"]: blocks[f"layer{i}.{p['name']}"] for p in entry["params"]}
        layers.append(LayerSpec(entry["kind"], params, entry["hyper"]))
    return ModelSpec(tuple(header["input_shape"]), layers, header["taps"])


def save_model(model: ModelSpec, path, meta: dict | None = None):
    return envelope.write(path, model_header(model, meta), model_blocks(model))


def load_model(path) -> ModelSpec:
    header, blocks = envelope.read(path)
    if header.get("artifact") != "model":
        raise envelope.EnvelopeError(f"{path} holds a {header.get('artifact')!r}, not a model")
    return model_from_parts(header, blocks)


def save_dataset(dataset: Dataset, path, meta: dict | None = None):
    header = {"artifact": "dataset", "spec": asdict(dataset.spec), "meta": meta or {}}
    blocks = [("inputs", dataset.inputs), ("labels", dataset.labels)]
    if dataset.cell_types is not None:
        blocks.append(("cell_types", dataset.cell_types.astype(np.float64)))
    return envelope.write(path, header, blocks)


def load_dataset(path) -> Dataset:
    header, blocks = envelope.read(path)
    if header.get("artifact") != "dataset":
        raise envelope.EnvelopeError(f"{path} holds a {header.get('artifact')!r}, not a dataset")
    spec = DatasetSpec(**header["spec"])
    types = blocks.get("cell_types")
    return Dataset(spec, blocks["inputs"], blocks["labels"], None if types is None else types.astype(int))
