"""Scalar contribution targets over a model's output vector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TARGET_KINDS = ("top1_logit", "topk_logit_sum", "entropy", "contrastive", "single_output", "surprisal")


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _top_indices(z: np.ndarray, k: int) -> np.ndarray:
    # stable sort keeps the lowest index first among ties
    return np.argsort(-z, kind="stable")[:k]


@dataclass(frozen=True, eq=False)
class TargetSpec:
    kind: str
    k: int | None = None
    index: int | None = None
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None
    softmax_first: bool = False
    _precision: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        if self.kind == "topk_logit_sum" and (self.k is None or self.k < 1):
            raise ValueError("topk_logit_sum needs k >= 1")
        if self.kind == "single_output" and (self.index is None or self.index < 0):
            raise ValueError("single_output needs a non-negative index")
        if self.kind == "surprisal":
            if self.softmax_first:
                raise ValueError("surprisal is defined on raw outputs")
            mean = np.asarray(self.mean, dtype=np.float64)
            cov = np.asarray(self.cov, dtype=np.float64)
            if cov.shape != (mean.size, mean.size):
                raise ValueError("covariance shape does not match mean")
            if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
                raise ValueError("covariance must be symmetric")
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise ValueError("covariance must be positive definite") from None
            eye = np.eye(mean.size)
            inv_chol = np.linalg.solve(chol, eye)
            object.__setattr__(self, "mean", mean)
            object.__setattr__(self, "cov", cov)
            object.__setattr__(self, "_precision", inv_chol.T @ inv_chol)

    def describe(self) -> dict:
        """JSON-friendly description (surprisal statistics are summarized, not embedded)."""
        d = {"kind": self.kind, "softmax_first": self.softmax_first}
        if self.k is not None:
            d["k"] = self.k
        if self.index is not None:
            d["index"] = self.index
        return d

    def resolve(self, outputs) -> "ResolvedTarget":
        """Fix index choices (argmax etc.) from ``outputs`` of the explained input."""
        z = np.asarray(outputs, dtype=np.float64)
        if z.ndim != 1:
            raise ValueError("target outputs must be a vector")
        n = z.size
        if self.kind in ("entropy", "surprisal"):
            if self.kind == "surprisal" and self.mean.size != n:
                raise ValueError("surprisal mean does not match number of outputs")
            return ResolvedTarget(self, None)
        ranked = softmax(z) if self.softmax_first else z
        w = np.zeros(n)
        if self.kind == "top1_logit":
            w[_top_indices(ranked, 1)] = 1.0
        elif self.kind == "topk_logit_sum":
            if self.k > n:
                raise ValueError(f"k={self.k} exceeds {n} outputs")
            w[_top_indices(ranked, self.k)] = 1.0
        elif self.kind == "contrastive":
            if n < 2:
                raise ValueError("contrastive target needs at least two outputs")
            top = _top_indices(ranked, 2)
            w[top[0]] = 1.0
            w[top[1]] = -1.0
        elif self.kind == "single_output":
            if self.index >= n:
                raise ValueError(f"output index {self.index} out of range for {n} outputs")
            w[self.index] = 1.0
        return ResolvedTarget(self, w)


@dataclass(frozen=True)
class ResolvedTarget:
    """A target with its index choices frozen; evaluates on one or many outputs."""

    spec: TargetSpec
    weights: np.ndarray | None

    def value(self, outputs) -> np.ndarray | float:
        return self.value_and_seed(outputs)[0]

    def seed(self, outputs) -> np.ndarray:
        return self.value_and_seed(outputs)[1]

    def __call__(self, outputs):
        return self.value(outputs)

    def value_and_seed(self, outputs):
        z = np.asarray(outputs, dtype=np.float64)
        kind = self.spec.kind
        if kind == "entropy":
            p = softmax(z)
            logp = z - z.max(axis=-1, keepdims=True)
            logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
            h = -(p * logp).sum(axis=-1)
            seed = -p * (logp + h[..., None])
            return h, seed
        if kind == "surprisal":
            d = z - self.spec.mean
            pd = d @ self.spec._precision
            return (pd * d).sum(axis=-1), 2.0 * pd
        w = self.weights
        if self.spec.softmax_first:
            p = softmax(z)
            val = p @ w
            return val, p * (w - val[..., None])
        return z @ w, np.broadcast_to(w, z.shape).copy()


def eval_target(outputs, target: TargetSpec):
    """Target value and its gradient with respect to ``outputs`` (the backward seed)."""
    resolved = target.resolve(outputs)
    value, seed = resolved.value_and_seed(outputs)
    return float(value), seed


def surprisal_from_outputs(outputs, ridge: float = 1e-6) -> TargetSpec:
    """Surprisal target with mean/covariance estimated from a set of output vectors.

    A ridge of ``ridge * trace(cov) / n_outputs`` is added to the diagonal.
    """
    y = np.asarray(outputs, dtype=np.float64)
    mean = y.mean(axis=0)
    cov = np.cov(y, rowvar=False, bias=False)
    cov = np.atleast_2d(cov)
    cov = 0.5 * (cov + cov.T)
    n = cov.shape[0]
    cov = cov + np.eye(n) * (ridge * np.trace(cov) / n)
    return TargetSpec("surprisal", mean=mean, cov=cov)
