"""Mode-guided channel ablation and preservation with specificity scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .aggregate import Degenerate, is_degenerate
from .autodiff import ModelSpec
from .modes import ClassCorrelationMatrix, aggregate_class_modes, top_mode_for_class
from .zoo import Dataset, predict

DEFAULT_FRACTIONS = tuple(round(0.05 * i, 2) for i in range(1, 21))


def top_channels(weights, fraction: float) -> np.ndarray:
    """The ceil(fraction * d) highest-weighted channels, lowest index first among ties."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    w = np.asarray(weights, dtype=np.float64)
    n = math.ceil(round(fraction * w.size, 9))
    return np.sort(np.argsort(-w, kind="stable")[:n])


@dataclass(frozen=True, eq=False)
class PerturbationPlan:
    tap: str
    mode_vector: np.ndarray
    fraction: float
    kind: str = "ablate"
    target_class: int | None = None
    off_target_class: int | None = None

    def __post_init__(self):
        if self.kind not in ("ablate", "preserve"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")

    @property
    def channels(self) -> np.ndarray:
        return top_channels(self.mode_vector, self.fraction)


@dataclass(frozen=True, eq=False)
class PerturbedModel:
    """A model whose tap activations are multiplied by a fixed keep-vector."""

    model: ModelSpec
    tap: str
    keep: np.ndarray

    @property
    def channel_masks(self) -> dict:
        return {self.tap: self.keep}

    def predict(self, inputs) -> np.ndarray:
        return predict(self.model, inputs, channel_masks=self.channel_masks)


def keep_vector(n_channels: int, channels, kind: str) -> np.ndarray:
    channels = np.asarray(channels, dtype=int)
    if channels.size and (channels.min() < 0 or channels.max() >= n_channels):
        raise IndexError(f"channel index out of range for {n_channels} channels")
    selected = np.zeros(n_channels, dtype=bool)
    selected[channels] = True
    keep = ~selected if kind == "ablate" else selected
    return keep.astype(np.float64)


def apply_perturbation(model: ModelSpec, plan: PerturbationPlan | None = None, *, tap=None, channels=None, kind=None) -> PerturbedModel:
    """Zero the planned channels (ablate) or every other channel (preserve)."""
    if plan is not None:
        tap, channels, kind = plan.tap, plan.channels, plan.kind
    n_channels = model.tap_shape(tap)[0]
    if kind not in ("ablate", "preserve"):
        raise ValueError(f"unknown perturbation kind {kind!r}")
    return PerturbedModel(model, tap, keep_vector(n_channels, channels, kind))


def accuracy_ratio(model: ModelSpec, perturbed: PerturbedModel, dataset: Dataset, class_filter=None):
    """Perturbed accuracy over original accuracy on the (class-filtered) samples."""
    labels = dataset.labels.astype(int)
    sel = np.ones(len(labels), dtype=bool) if class_filter is None else np.isin(labels, np.atleast_1d(class_filter))
    if not sel.any():
        raise ValueError("class filter selects no samples")
    x, y = dataset.inputs[sel], labels[sel]
    base = (predict(model, x).argmax(axis=1) == y).mean()
    if base == 0:
        return Degenerate("original accuracy is zero")
    pert = (perturbed.predict(x).argmax(axis=1) == y).mean()
    return float(pert / base)


def auc(fractions, ratios) -> float:
    """Trapezoidal area under ratio vs fraction, normalized by the fraction span."""
    f = np.asarray(fractions, dtype=np.float64)
    r = np.asarray(ratios, dtype=np.float64)
    if f.size == 1:
        return float(r[0])
    return float(np.sum((r[1:] + r[:-1]) * np.diff(f)) / 2.0 / (f[-1] - f[0]))


@dataclass(frozen=True, eq=False)
class PerturbationReport:
    kind: str
    fractions: np.ndarray
    target_ratios: np.ndarray
    off_target_ratios: np.ndarray
    auc_target: float
    auc_off_target: float
    specificity: float
    target_class: object = None
    off_target_class: object = None
    improved: bool = False
    channels: list = field(default_factory=list)


def _specificity(kind: str, auc_t: float, auc_o: float) -> float:
    if kind == "ablate":
        return (auc_o - auc_t) / auc_o if auc_o > 0 else 0.0
    return (auc_t - auc_o) / auc_t if auc_t > 0 else 0.0


def _ratio_value(r) -> float:
    return float("nan") if is_degenerate(r) else r


def sweep_vector(model, tap, ranking, dataset, target_classes, off_target_classes, fractions=DEFAULT_FRACTIONS, kind="ablate"):
    """Sweep with an explicit channel-ranking vector."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(np.diff(fractions) <= 0) or fractions[0] <= 0 or fractions[-1] > 1:
        raise ValueError("fractions must be ascending within (0, 1]")
    t_ratios, o_ratios, chans = [], [], []
    for frac in fractions:
        plan = PerturbationPlan(tap, ranking, float(frac), kind)
        pm = apply_perturbation(model, plan)
        t_ratios.append(_ratio_value(accuracy_ratio(model, pm, dataset, target_classes)))
        o_ratios.append(_ratio_value(accuracy_ratio(model, pm, dataset, off_target_classes)))
        chans.append([int(c) for c in plan.channels])
    t_ratios, o_ratios = np.array(t_ratios), np.array(o_ratios)
    auc_t, auc_o = auc(fractions, t_ratios), auc(fractions, o_ratios)
    return PerturbationReport(
        kind, fractions, t_ratios, o_ratios, auc_t, auc_o, _specificity(kind, auc_t, auc_o),
        target_classes, off_target_classes,
        improved=bool(np.any(np.concatenate([t_ratios, o_ratios]) > 1.0)),
        channels=chans,
    )


def off_target_for(target: int, n_classes: int, rng: np.random.Generator) -> int:
    choices = [c for c in range(n_classes) if c != target]
    return int(rng.choice(choices))


def sweep(
    model: ModelSpec,
    tap: str,
    sae,
    ccm: ClassCorrelationMatrix,
    dataset: Dataset,
    target_class: int,
    fractions=DEFAULT_FRACTIONS,
    kind: str = "ablate",
    seed: int = 0,
    top_modes: int = 1,
    off_target_class: int | None = None,
) -> PerturbationReport:
    """Perturb channels of the class's most correlated mode (or union of ``top_modes``)."""
    if ccm.degenerate_classes[target_class] or np.all(ccm.values[:, target_class] == 0):
        raise ValueError(f"correlations for class {target_class} are degenerate")
    if off_target_class is None:
        off_target_class = off_target_for(target_class, ccm.values.shape[1], np.random.default_rng(seed))
    modes = top_mode_for_class(ccm, target_class, n=top_modes)
    modes = [modes] if top_modes == 1 else modes
    ranking = sae.dictionary[:, modes].sum(axis=1)
    return sweep_vector(model, tap, ranking, dataset, target_class, off_target_class, fractions, kind)


def aggregated_mode_perturbation(
    model: ModelSpec,
    tap: str,
    sae,
    ccm: ClassCorrelationMatrix,
    dataset: Dataset,
    superclass: int,
    member_classes,
    fractions=DEFAULT_FRACTIONS,
    kind: str = "preserve",
    threshold: float = 0.2,
) -> PerturbationReport:
    """Rank channels by the summed modes of a superclass column of ``ccm``.

    ``member_classes`` are the original labels making up the superclass; the
    off-target set is every other class present in ``dataset``.
    """
    ranking = aggregate_class_modes(ccm, sae, superclass, threshold)
    members = sorted(int(c) for c in member_classes)
    others = sorted(set(np.unique(dataset.labels.astype(int))) - set(members))
    return sweep_vector(model, tap, ranking, dataset, members, others, fractions, kind)
