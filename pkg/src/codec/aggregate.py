"""Channel reductions with excitatory/inhibitory separation and layerwise statistics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

SIGN_MODES = ("net", "positive", "negative", "concat-pos-neg")


@dataclass(frozen=True)
class Degenerate:
    """Tagged stand-in for a statistic that is undefined on its input."""

    reason: str

    def __bool__(self):
        return False


def is_degenerate(x) -> bool:
    return isinstance(x, Degenerate)


@dataclass(frozen=True, eq=False)
class ChannelContributionMatrix:
    """Rows are inputs (dataset order), columns are channels."""

    values: np.ndarray
    tap: str
    algorithm: str
    target: dict = field(default_factory=dict)
    sign_mode: str = "net"

    def __post_init__(self):
        if self.sign_mode not in SIGN_MODES:
            raise ValueError(f"unknown sign mode {self.sign_mode!r}")
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def meta(self) -> dict:
        return {"tap": self.tap, "algorithm": self.algorithm, "target": self.target, "sign_mode": self.sign_mode}


def _values(ct) -> np.ndarray:
    return np.asarray(getattr(ct, "values", ct), dtype=np.float64)


def _reduce_axes(ndim: int, axes, channel_axis: int) -> tuple:
    channel_axis %= ndim
    if axes is None:
        return tuple(a for a in range(ndim) if a != channel_axis)
    axes = tuple(axes)
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for a {ndim}-d tensor")
        if a % ndim == channel_axis:
            raise ValueError("reduction axes must exclude the channel axis")
    return tuple(a % ndim for a in axes)


def channel_sum(ct, axes=None, channel_axis: int = 0) -> np.ndarray:
    """Sum over every axis but the channel axis (or over ``axes``)."""
    v = _values(ct)
    return v.sum(axis=_reduce_axes(v.ndim, axes, channel_axis))


def ei_split_sum(ct, axes=None, channel_axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Positive and negative parts, split per location before summation."""
    v = _values(ct)
    red = _reduce_axes(v.ndim, axes, channel_axis)
    return np.maximum(v, 0.0).sum(axis=red), np.minimum(v, 0.0).sum(axis=red)


def contribution_matrices(cts, axes=None, channel_axis: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack per-input (net, positive, negative) channel sums into matrices.

    The net matrix is stored as ``pos + neg`` so the identity is bit-exact;
    it agrees with ``channel_sum`` up to summation-order rounding.
    """
    pos, neg = [], []
    for ct in cts:
        p, n = ei_split_sum(ct, axes, channel_axis)
        pos.append(p)
        neg.append(n)
    pos, neg = np.array(pos), np.array(neg)
    return pos + neg, pos, neg


def hoyer_sparsity(v):
    """(sqrt(n) - |v|_1 / |v|_2) / (sqrt(n) - 1); 1 for one-hot, 0 for constant."""
    v = np.abs(np.asarray(v, dtype=np.float64).ravel())
    n = v.size
    if n < 2:
        raise ValueError("Hoyer sparsity needs at least two entries")
    l2 = np.sqrt((v * v).sum())
    if l2 == 0:
        return Degenerate("all-zero vector")
    sq = np.sqrt(n)
    return float((sq - v.sum() / l2) / (sq - 1.0))


def mean_hoyer(matrix) -> float:
    """Row-wise Hoyer sparsity averaged over non-degenerate rows."""
    vals = [hoyer_sparsity(row) for row in np.asarray(matrix)]
    vals = [v for v in vals if not is_degenerate(v)]
    return float(np.mean(vals)) if vals else Degenerate("every row is zero")


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("pearson needs equal-length vectors")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt((da * da).sum()), np.sqrt((db * db).sum())
    if sa == 0 or sb == 0:
        return Degenerate("zero variance")
    return float(np.clip((da * db).sum() / (sa * sb), -1.0, 1.0))


def pearson_columns(a, b) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Correlation of every column of ``a`` with every column of ``b``.

    Returns ``(r, degenerate_a, degenerate_b)``: r has shape
    (a columns, b columns) with 0.0 wherever either column is constant, and
    the two masks flag those constant columns.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise ValueError("row counts differ")
    da = a - a.mean(axis=0)
    db = b - b.mean(axis=0)
    sa = np.sqrt((da * da).sum(axis=0))
    sb = np.sqrt((db * db).sum(axis=0))
    bad_a, bad_b = sa == 0, sb == 0
    cov = da.T @ db
    with np.errstate(divide="ignore", invalid="ignore"):
        r = cov / np.outer(sa, sb)
    r[bad_a, :] = 0.0
    r[:, bad_b] = 0.0
    return np.clip(r, -1.0, 1.0), bad_a, bad_b


def pos_neg_correlation(pos, neg):
    """Pearson r across channels of mean positive vs mean |negative| contribution."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.shape != neg.shape:
        raise ValueError("positive and negative matrices differ in shape")
    return pearson(pos.mean(axis=0), np.abs(neg).mean(axis=0))


def class_average(matrix, labels, n_classes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-class mean rows; returns (means, classes) with empty classes dropped."""
    matrix = np.asarray(matrix, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if len(labels) != len(matrix):
        raise ValueError("labels do not align with matrix rows")
    n_classes = n_classes if n_classes is not None else int(labels.max()) + 1
    rows, present = [], []
    for c in range(n_classes):
        sel = labels == c
        if not sel.any():
            warnings.warn(f"class {c} has no samples and is excluded", stacklevel=2)
            continue
        rows.append(matrix[sel].mean(axis=0))
        present.append(c)
    return np.array(rows), np.array(present, dtype=int)


@dataclass(frozen=True)
class SpectrumReport:
    fractions: np.ndarray
    n_components_95: int


def foev(matrix, level: float = 0.95):
    """PCA spectrum of mean-centred rows as explained-variance fractions."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2:
        raise ValueError("foev needs a matrix with at least two rows")
    centred = m - m.mean(axis=0)
    cov = centred.T @ centred / (m.shape[0] - 1)
    eig = np.linalg.eigvalsh(cov)[::-1]
    eig = np.clip(eig, 0.0, None)
    total = eig.sum()
    if total <= 0:
        return Degenerate("rank-0 matrix")
    fractions = eig / total
    cum = np.cumsum(fractions)
    n95 = int(np.searchsorted(cum, level - 1e-12) + 1)
    return SpectrumReport(fractions, min(n95, fractions.size))
