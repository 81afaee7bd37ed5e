"""Thresholded sparse autoencoder over channel-contribution rows.

Encoder: c -> relu(W1 c + b1) -> W2 h + b2 = pre -> sigmoid -> hard threshold.
Decoder: c_hat = D z with a (by default) non-negative dictionary D of shape
(d, k); column i of D is mode i.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import envelope
from .aggregate import Degenerate
from .zoo import _Adam

log = logging.getLogger(__name__)


class SAETrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str = "loss became non-finite"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class SAEConfig:
    expansion: int = 3
    n_modes: int | None = None  # defaults to expansion * d
    threshold: float = 0.9
    epochs: int = 300
    lr: float = 5e-5
    batch_size: int = 128
    l1_dictionary: float = 5e-5
    l1_loadings: float = 0.0
    nonneg_dictionary: bool = True
    hidden: int = 512
    seed: int = 0
    sigmoid: bool = True  # False gives the threshold-on-raw-pre-activation variant
    # straight-through gradient scale for loadings below threshold; 1.0 passes
    # the gradient unchanged, smaller values favour sparser codes
    inactive_grad: float = 1.0

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if self.n_modes is not None and self.n_modes < 1:
            raise ValueError("n_modes must be >= 1")
        if self.expansion < 1 or self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("expansion, epochs, batch_size and hidden must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.inactive_grad <= 1.0:
            raise ValueError("inactive_grad must lie in [0, 1]")

    def modes_for(self, d: int) -> int:
        return self.n_modes if self.n_modes is not None else self.expansion * d


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(eq=False)
class SAEModel:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    dictionary: np.ndarray
    config: SAEConfig
    log: list = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.dictionary.shape[0]

    @property
    def k(self) -> int:
        return self.dictionary.shape[1]

    @property
    def modes(self) -> np.ndarray:
        """Modes as rows (k, d)."""
        return self.dictionary.T

    def _pre(self, c):
        hidden = np.maximum(c @ self.w1.T + self.b1, 0.0)
        return hidden, hidden @ self.w2.T + self.b2

    def _squash(self, pre):
        return _sigmoid(pre) if self.config.sigmoid else pre

    def encode(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64)
        if c.shape[-1] != self.d:
            raise ValueError(f"expected rows of length {self.d}, got {c.shape[-1]}")
        s = self._squash(self._pre(c)[1])
        return np.where(s >= self.config.threshold, s, 0.0)

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.k:
            raise ValueError(f"expected loadings of length {self.k}, got {z.shape[-1]}")
        return z @ self.dictionary.T

    def reconstruct(self, c) -> np.ndarray:
        return self.decode(self.encode(c))


def encode(sae: SAEModel, c) -> np.ndarray:
    return sae.encode(c)


def decode(sae: SAEModel, z) -> np.ndarray:
    return sae.decode(z)


def _init(d: int, config: SAEConfig, data: np.ndarray, rng: np.random.Generator) -> SAEModel:
    k = config.modes_for(d)
    h = config.hidden
    # scale the first layer to the data so pre-activations start near zero
    # and the sigmoid is not saturated, whatever the magnitude of the rows
    rms = float(np.sqrt(np.mean(data * data))) or 1.0
    w1 = rng.normal(0.0, np.sqrt(2.0 / d), size=(h, d)) / rms
    b1 = np.zeros(h)
    w2 = rng.normal(0.0, np.sqrt(1.0 / h), size=(k, h))
    b2 = np.zeros(k)
    # dictionary columns start at data rows, shrunk so a few active modes
    # add up to a typical row
    rows = data[rng.integers(0, len(data), size=k)]
    dictionary = np.abs(rows) / config.expansion + rng.uniform(0.0, 1e-3, size=(k, d))
    if not config.nonneg_dictionary:
        dictionary = rows / config.expansion
    return SAEModel(w1, b1, w2, b2, dictionary.T.copy(), config)


def _loss_and_grads(sae: SAEModel, c: np.ndarray):
    cfg = sae.config
    n = len(c)
    hidden, pre = sae._pre(c)
    s = sae._squash(pre)
    active = s >= cfg.threshold
    z = np.where(active, s, 0.0)
    c_hat = z @ sae.dictionary.T
    err = c_hat - c
    loss = (err * err).sum() / n
    loss += cfg.l1_dictionary * np.abs(sae.dictionary).sum()
    loss += cfg.l1_loadings * np.abs(z).sum() / n
    g_hat = 2.0 * err / n
    g_dict = g_hat.T @ z + cfg.l1_dictionary * np.sign(sae.dictionary)
    g_z = g_hat @ sae.dictionary
    # straight-through: the threshold passes gradients to zeroed loadings
    # (scaled by inactive_grad); the loading penalty only sees active ones
    g_s = g_z * np.where(active, 1.0, cfg.inactive_grad) + cfg.l1_loadings * active / n
    g_pre = g_s * s * (1.0 - s) if cfg.sigmoid else g_s
    g_w2 = g_pre.T @ hidden
    g_b2 = g_pre.sum(axis=0)
    g_hidden = (g_pre @ sae.w2) * (hidden > 0)
    g_w1 = g_hidden.T @ c
    g_b1 = g_hidden.sum(axis=0)
    return loss, [g_w1, g_b1, g_w2, g_b2, g_dict]


def r_squared(matrix, sae: SAEModel):
    """1 - SSE/SST with SST taken about the per-column means of ``matrix``."""
    m = np.asarray(matrix, dtype=np.float64)
    return r_squared_of(m, sae.reconstruct(m))


def r_squared_of(matrix, reconstruction):
    m = np.asarray(matrix, dtype=np.float64)
    sst = ((m - m.mean(axis=0)) ** 2).sum()
    if sst == 0:
        return Degenerate("zero-variance matrix")
    sse = ((m - np.asarray(reconstruction)) ** 2).sum()
    return float(1.0 - sse / sst)


def train_sae(matrix, config: SAEConfig = SAEConfig(), eval_every: int = 10) -> SAEModel:
    """Minibatch Adam on mean squared reconstruction error plus L1 terms.

    ``matrix`` holds the positive-part channel sums, one row per input. The
    dictionary is clamped at zero after every update when non-negativity is on.
    ``eval_every`` controls how often full-data R^2 is logged.
    """
    data = np.asarray(getattr(matrix, "values", matrix), dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("train_sae needs a non-empty 2-d matrix")
    d = data.shape[1]
    if config.modes_for(d) < 1:
        raise ValueError("number of modes must be >= 1")
    rng = np.random.default_rng(config.seed)
    sae = _init(d, config, data, rng)
    params = [sae.w1, sae.b1, sae.w2, sae.b2, sae.dictionary]
    opt = _Adam(params, config.lr)
    n = len(data)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = data[order[start:start + config.batch_size]]
            loss, grads = _loss_and_grads(sae, batch)
            if not np.isfinite(loss):
                raise SAETrainingError(epoch)
            opt.step(grads)
            if config.nonneg_dictionary:
                np.maximum(sae.dictionary, 0.0, out=sae.dictionary)
            total += loss * len(batch)
        entry = {"epoch": epoch, "loss": total / n}
        if eval_every and (epoch % eval_every == eval_every - 1 or epoch == config.epochs - 1):
            r2 = r_squared(data, sae)
            entry["r2"] = None if isinstance(r2, Degenerate) else r2
        sae.log.append(entry)
    return sae


@dataclass(frozen=True, eq=False)
class ModeLoadings:
    values: np.ndarray  # (n_inputs, k)
    threshold: float


def loadings_for(matrix, sae: SAEModel) -> ModeLoadings:
    data = np.asarray(getattr(matrix, "values", matrix), dtype=np.float64)
    return ModeLoadings(sae.encode(data), sae.config.threshold)


# ---------------------------------------------------------------------------
# checkpoint files

def save_sae(sae: SAEModel, path, meta: dict | None = None):
    header = {"artifact": "sae", "config": asdict(sae.config), "log": sae.log, "meta": meta or {}}
    blocks = [("w1", sae.w1), ("b1", sae.b1), ("w2", sae.w2), ("b2", sae.b2), ("dictionary", sae.dictionary)]
    return envelope.write(path, header, blocks)


def load_sae(path) -> SAEModel:
    header, b = envelope.read(path)
    if header.get("artifact") != "sae":
        raise envelope.EnvelopeError(f"{path} holds a {header.get('artifact')!r}, not an SAE checkpoint")
    config = SAEConfig(**header["config"])
    return SAEModel(b["w1"], b["b1"], b["w2"], b["b2"], b["dictionary"], config, header.get("log", []))


def with_config(sae: SAEModel, **changes) -> SAEModel:
    return SAEModel(sae.w1, sae.b1, sae.w2, sae.b2, sae.dictionary, replace(sae.config, **changes), list(sae.log))
