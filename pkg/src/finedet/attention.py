"""Soft-attention proposal re-ranking and proposal-score pooling.

Score maps are ``(P, C)`` arrays: one row per proposal, one column per
class. The coarse detector's map carries an extra background column last.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from finedet.correlation import CorrelationMatrix
from finedet.errors import ValidationError

SCALES = ("logits", "probabilities")
POOL_KINDS = ("max", "average", "top-k-average", "weighted-average", "sum")


@dataclass(frozen=True)
class ScoreMap:
    """A ``(P, C)`` score grid tagged with its scale, used for file I/O."""

    values: np.ndarray
    scale: str = "logits"

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError("score map must be 2-D")
        if self.scale not in SCALES:
            raise ValidationError(f"unknown scale {self.scale!r}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("score map entries must be finite")
        object.__setattr__(self, "values", values)

    def to_text(self) -> str:
        p, c = self.values.shape
        lines = [f"MAP {p} {c} {self.scale}"]
        lines += [" ".join(repr(float(x)) for x in row) for row in self.values]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ScoreMap":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = lines[0].split() if lines else []
        if len(head) != 4 or head[0] != "MAP":
            raise ValidationError("bad score map header")
        p, c, scale = int(head[1]), int(head[2]), head[3]
        if len(lines) - 1 != p:
            raise ValidationError(f"expected {p} rows, found {len(lines) - 1}")
        values = np.array([[float(x) for x in ln.split()] for ln in lines[1:]]).reshape(p, c)
        return cls(values, scale)


@dataclass(frozen=True)
class PoolingSpec:
    kind: str = "max"
    k: int = 5

    def __post_init__(self):
        if self.kind not in POOL_KINDS:
            raise ValidationError(f"unknown pooling kind {self.kind!r}")
        if self.kind == "top-k-average" and self.k < 1:
            raise ValidationError("top-k pooling needs k >= 1")


def _finite(a, name):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite values")
    return a


def class_softmax(logits, include_background: bool = False) -> np.ndarray:
    """Per-proposal softmax over foreground classes of a ``(P, C_f + 1)`` map.

    The background column (last) is dropped from the output. By default it is
    also left out of the denominator; ``include_background`` puts it back.
    """
    s = _finite(logits, "coarse score map")
    if s.ndim != 2 or s.shape[1] < 2:
        raise ValidationError("coarse score map needs foreground columns plus background")
    cols = s if include_background else s[:, :-1]
    z = cols - cols.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True))[:, : s.shape[1] - 1]


def proposal_normalize(shat) -> np.ndarray:
    """Softmax over proposals for every class column."""
    s = _finite(shat, "score map")
    if s.ndim != 2 or s.shape[0] == 0:
        raise ValidationError("proposal normalization needs at least one proposal")
    z = s - s.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def coarse_to_fine_attention(af, m: CorrelationMatrix | np.ndarray) -> np.ndarray:
    af = np.asarray(af, dtype=np.float64)
    mv = m.values if isinstance(m, CorrelationMatrix) else np.asarray(m, dtype=np.float64)
    if af.ndim != 2 or mv.ndim != 2 or af.shape[1] != mv.shape[0]:
        raise ValidationError(f"cannot map attention {af.shape} through correlation {mv.shape}")
    return af @ mv


def rerank(sw, aw) -> np.ndarray:
    sw, aw = np.asarray(sw, dtype=np.float64), np.asarray(aw, dtype=np.float64)
    if sw.shape != aw.shape:
        raise ValidationError(f"shape mismatch {sw.shape} vs {aw.shape}")
    return sw * aw


def fine_attention(coarse_logits, correlation, include_background: bool = False) -> np.ndarray:
    """Full coarse-score -> fine-attention chain for one image."""
    shat = class_softmax(coarse_logits, include_background)
    return coarse_to_fine_attention(proposal_normalize(shat), correlation)


def topk_indices(col: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries; ties go to the lowest index."""
    return np.argsort(-col, kind="stable")[:k]


def pool_weights(sm, spec: PoolingSpec) -> np.ndarray:
    """Per-entry weights ``W`` such that pooled[c] = sum_p W[p, c] * sm[p, c].

    For max and top-k these are the (sub)gradient routing weights as well.
    Weighted-average is not linear in ``sm``; its weights are only valid for
    the forward value.
    """
    sm = np.asarray(sm, dtype=np.float64)
    p, c = sm.shape
    if p == 0:
        raise ValidationError("pooling needs at least one proposal")
    w = np.zeros_like(sm)
    if spec.kind == "sum":
        w[:] = 1.0
    elif spec.kind == "average":
        w[:] = 1.0 / p
    elif spec.kind in ("max", "top-k-average"):
        k = 1 if spec.kind == "max" else min(spec.k, p)
        for j in range(c):
            w[topk_indices(sm[:, j], k), j] = 1.0 / k
    else:
        z = sm - sm.max(axis=0, keepdims=True)
        e = np.exp(z)
        w = e / e.sum(axis=0, keepdims=True)
    return w


def pool(sm, spec: PoolingSpec) -> np.ndarray:
    sm = _finite(sm, "score map")
    if sm.ndim != 2:
        raise ValidationError("score map must be 2-D")
    return (pool_weights(sm, spec) * sm).sum(axis=0)
