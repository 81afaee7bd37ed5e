"""Relating SAE modes to class labels and to regressor outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregate import pearson_columns
from .autodiff import ModelSpec, grad_wrt_input


def class_masks(labels, n_classes: int | None = None) -> np.ndarray:
    """Binary n x C indicator matrix."""
    labels = np.asarray(labels).astype(int)
    n_classes = n_classes if n_classes is not None else int(labels.max()) + 1
    return (labels[:, None] == np.arange(n_classes)[None]).astype(np.float64)


def superclass_masks(labels, groups) -> np.ndarray:
    """One column per group of class ids (e.g. ``[[0, 1], [2, 3, 4]]``)."""
    labels = np.asarray(labels).astype(int)
    return np.stack([np.isin(labels, list(g)) for g in groups], axis=1).astype(np.float64)


@dataclass(frozen=True, eq=False)
class ClassCorrelationMatrix:
    """k x C Pearson correlations; constant loading columns are flagged and read 0."""

    values: np.ndarray
    degenerate_modes: np.ndarray
    degenerate_classes: np.ndarray
    mask_id: str = "class"

    @property
    def shape(self):
        return self.values.shape


def class_correlations(loadings, masks, mask_id: str = "class") -> ClassCorrelationMatrix:
    z = np.asarray(getattr(loadings, "values", loadings), dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if len(z) != len(masks):
        raise ValueError(f"{len(z)} loading rows vs {len(masks)} mask rows")
    r, bad_modes, bad_classes = pearson_columns(z, masks)
    return ClassCorrelationMatrix(r, bad_modes, bad_classes, mask_id)


def top_mode_for_class(ccm: ClassCorrelationMatrix, cls: int, n: int = 1):
    """Most positively correlated mode for a class (lowest index on ties).

    With ``n > 1`` returns the ``n`` best modes in order.
    """
    if ccm.values.size == 0:
        raise ValueError("empty correlation matrix")
    col = ccm.values[:, cls]
    order = np.argsort(-col, kind="stable")
    return int(order[0]) if n == 1 else [int(i) for i in order[:n]]


@dataclass(frozen=True)
class MaxCorrelationStats:
    per_mode_max: np.ndarray
    mean: float
    n_above: int
    histogram: np.ndarray
    bin_edges: np.ndarray


def max_class_corr_stats(ccm: ClassCorrelationMatrix, threshold: float = 0.2, bins: int = 20) -> MaxCorrelationStats:
    """Per-mode maximum correlation with any class, over non-degenerate modes."""
    if ccm.values.size == 0:
        raise ValueError("empty correlation matrix")
    valid = ~ccm.degenerate_modes
    per_mode = ccm.values[valid].max(axis=1) if valid.any() else np.zeros(0)
    hist, edges = np.histogram(per_mode, bins=bins, range=(-1.0, 1.0))
    mean = float(per_mode.mean()) if per_mode.size else 0.0
    return MaxCorrelationStats(per_mode, mean, int((per_mode > threshold).sum()), hist, edges)


def aggregate_class_modes(ccm: ClassCorrelationMatrix, sae, cls: int, threshold: float = 0.2) -> np.ndarray:
    """Sum of dictionary columns whose correlation with ``cls`` exceeds ``threshold``.

    Falls back to the single best column when none qualifies.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    col = ccm.values[:, cls]
    chosen = np.flatnonzero(col > threshold)
    if chosen.size == 0:
        chosen = np.array([top_mode_for_class(ccm, cls)])
    return sae.dictionary[:, chosen].sum(axis=1)


@dataclass(frozen=True, eq=False)
class CellModeCorrelation:
    values: np.ndarray  # cells x modes
    degenerate_cells: np.ndarray
    degenerate_modes: np.ndarray


def mode_firing_correlation(loadings, rates) -> CellModeCorrelation:
    z = np.asarray(getattr(loadings, "values", loadings), dtype=np.float64)
    rates = np.asarray(rates, dtype=np.float64)
    if len(z) != len(rates):
        raise ValueError("loadings and rates must share the time axis")
    r, bad_modes, bad_cells = pearson_columns(z, rates)
    return CellModeCorrelation(r.T, bad_cells, bad_modes)


@dataclass(frozen=True)
class ClusterReport:
    labels: np.ndarray
    k: int
    silhouettes: dict


def cluster_cells(corr, k_candidates=None, seed: int = 0, n_init: int = 16) -> ClusterReport:
    """k-means on cell rows; k picked by maximum mean silhouette."""
    from sklearn.cluster import KMeans
    from sklearn.metrics import silhouette_score

    x = np.asarray(getattr(corr, "values", corr), dtype=np.float64)
    n = len(x)
    if n < 3:
        raise ValueError("clustering needs at least three cells")
    if np.allclose(x, x[0]):
        raise ValueError("all cell rows are identical")
    ks = list(k_candidates) if k_candidates is not None else list(range(2, n))
    if not ks or any(not 2 <= k <= n - 1 for k in ks):
        raise ValueError(f"k candidates must lie in [2, {n - 1}]")
    best = None
    scores = {}
    for k in ks:
        km = KMeans(n_clusters=k, n_init=n_init, random_state=seed).fit(x)
        if len(np.unique(km.labels_)) < 2:
            scores[k] = -1.0
            continue
        scores[k] = float(silhouette_score(x, km.labels_))
        if best is None or scores[k] > scores[best[0]]:
            best = (k, km.labels_.copy())
    if best is None:
        raise ValueError("no candidate produced two or more clusters")
    return ClusterReport(best[1], best[0], scores)


def instantaneous_rf(model: ModelSpec, stimulus, cell: int, time_index: int | None = None) -> np.ndarray:
    """Gradient of one output cell with respect to the stimulus.

    ``stimulus`` is a single clip, or a stack of clips indexed by ``time_index``.
    """
    n_out = model.output_shape[0]
    if not 0 <= cell < n_out:
        raise IndexError(f"cell {cell} out of range for {n_out} outputs")
    stimulus = np.asarray(stimulus, dtype=np.float64)
    if time_index is not None:
        stimulus = stimulus[time_index]
    seed = np.zeros(n_out)
    seed[cell] = 1.0
    return grad_wrt_input(model, stimulus, seed)


def sparse_mode_events(loadings, rates, max_active: int, min_rate: float):
    """(time, active modes, cell) where few modes are active and the cell fires."""
    if max_active <= 0 or min_rate <= 0:
        raise ValueError("max_active and min_rate must be positive")
    z = np.asarray(getattr(loadings, "values", loadings))
    rates = np.asarray(rates)
    events = []
    for t in range(len(z)):
        active = np.flatnonzero(z[t] > 0)
        if len(active) > max_active:
            continue
        modes = frozenset(int(i) for i in active)
        for cell in np.flatnonzero(rates[t] > min_rate):
            events.append((t, modes, int(cell)))
    return events
