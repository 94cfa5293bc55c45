"""Dual-level prototype memory with foreground-attention (FA) pooling.

Each bank keeps, per class, an EMA feature prototype (key), an EMA of the
predicted class distribution (value) and an update counter. Predictions are a
softmax over negative squared key distances, restricted to classes that have
been updated at least once.

The proposal-level bank spans coarse classes and is fed by box-labelled
proposals; the image-level bank spans fine classes and is fed by FA-pooled
images that carry image-level labels. Unlabelled items on each level are
regularized towards the bank's prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from finedet.errors import ValidationError
from finedet.losses import (PROB_TOL, entropy, kl_div, memory_loss_grad,
                            pooled_prediction, pooled_prediction_backward)


class MemoryBank:
    """Per-class prototypes over ``n_classes`` classes in ``dim`` dimensions.

    ``gamma=None`` picks ``1 / mean squared distance`` between populated keys
    at prediction time. Updates mutate the bank in place.
    """

    def __init__(self, n_classes: int, dim: int, momentum: float = 0.5,
                 gamma: float | None = None, class_ids=None):
        if not 0 <= momentum <= 1:
            raise ValidationError(f"momentum must lie in [0, 1], got {momentum}")
        if gamma is not None and not gamma > 0:
            raise ValidationError("gamma must be positive")
        self.n_classes = n_classes
        self.dim = dim
        self.momentum = float(momentum)
        self.gamma = gamma
        self.class_ids = tuple(class_ids) if class_ids is not None else tuple(str(i) for i in range(n_classes))
        self.keys = np.zeros((n_classes, dim))
        self.values = np.full((n_classes, n_classes), 1.0 / n_classes)
        self.counts = np.zeros(n_classes, dtype=np.int64)

    def copy(self) -> "MemoryBank":
        other = MemoryBank(self.n_classes, self.dim, self.momentum, self.gamma, self.class_ids)
        other.keys = self.keys.copy()
        other.values = self.values.copy()
        other.counts = self.counts.copy()
        return other

    @property
    def populated(self) -> np.ndarray:
        return self.counts > 0

    def is_warm(self, warmup: int = 1) -> bool:
        """True once every class has received at least ``warmup`` updates."""
        return bool(np.all(self.counts >= warmup))

    def effective_gamma(self) -> float:
        if self.gamma is not None:
            return self.gamma
        keys = self.keys[self.populated]
        if len(keys) < 2:
            return 1.0
        diff = keys[:, None, :] - keys[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        mean = d2[np.triu_indices(len(keys), 1)].mean()
        return 1.0 / mean if mean > 0 else 1.0

    def predict(self, x) -> np.ndarray:
        return memory_predict(self, x)

    def update(self, x, p, class_hint=None) -> "MemoryBank":
        return memory_update(self, x, p, class_hint)

    def to_lines(self) -> list[str]:
        """One ``class_id count key... value...`` line per class."""
        out = []
        for cid, n, key, val in zip(self.class_ids, self.counts, self.keys, self.values):
            nums = " ".join(repr(float(v)) for v in np.concatenate([key, val]))
            out.append(f"{cid} {int(n)} {nums}")
        return out

    @classmethod
    def from_lines(cls, lines, dim, momentum=0.5, gamma=None) -> "MemoryBank":
        n = len(lines)
        ids = [ln.split()[0] for ln in lines]
        bank = cls(n, dim, momentum, gamma, ids)
        for i, ln in enumerate(lines):
            parts = ln.split()
            if len(parts) != 2 + dim + n:
                raise ValidationError(f"memory line {i} has {len(parts)} fields")
            bank.counts[i] = int(parts[1])
            nums = np.array([float(v) for v in parts[2:]])
            bank.keys[i], bank.values[i] = nums[:dim], nums[dim:]
        return bank

    def __eq__(self, other):
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return (self.class_ids == other.class_ids and self.momentum == other.momentum
                and np.array_equal(self.keys, other.keys)
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.counts, other.counts))


def memory_predict(bank: MemoryBank, x) -> np.ndarray:
    mask = bank.populated
    if not mask.any():
        raise ValidationError("memory bank is empty; nothing to predict from")
    x = np.asarray(x, dtype=np.float64)
    d2 = ((bank.keys[mask] - x) ** 2).sum(axis=1)
    z = -bank.effective_gamma() * d2
    e = np.exp(z - z.max())
    out = np.zeros(bank.n_classes)
    out[mask] = e / e.sum()
    return out


def memory_update(bank: MemoryBank, x, p, class_hint=None) -> MemoryBank:
    """EMA update of the hinted class (or the argmax of ``p``)."""
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (bank.n_classes,) or np.any(p < 0) or abs(p.sum() - 1.0) > PROB_TOL:
        raise ValidationError("update needs a probability vector over the bank's classes")
    if x.shape != (bank.dim,):
        raise ValidationError(f"feature must have dimension {bank.dim}")
    c = int(np.argmax(p)) if class_hint is None else int(class_hint)
    if not 0 <= c < bank.n_classes:
        raise ValidationError(f"class hint {c} out of range")
    if bank.counts[c] == 0:
        bank.keys[c] = x
        bank.values[c] = p / p.sum()
    else:
        m = bank.momentum
        bank.keys[c] = m * bank.keys[c] + (1 - m) * x
        v = m * bank.values[c] + (1 - m) * p
        bank.values[c] = v / v.sum()
    bank.counts[c] += 1
    return bank


@dataclass
class FAPoolEntry:
    """Pooled feature/prediction for one class; ``count == 0`` means absent."""

    feature: np.ndarray | None
    prediction: np.ndarray | None
    count: int
    mask: np.ndarray

    @property
    def present(self) -> bool:
        return self.count > 0


def fa_pool(features, scores, target_class: int, min_prob: float = 0.0,
            candidates=None) -> FAPoolEntry:
    """Sum features and predictions of proposals whose argmax is ``target_class``.

    ``candidates`` optionally restricts the proposals considered; ``min_prob``
    additionally requires the winning probability to reach that value.
    """
    features = np.asarray(features, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.argmax(scores, axis=1) == target_class
    if min_prob > 0:
        mask &= scores[:, target_class] >= min_prob
    if candidates is not None:
        mask &= np.asarray(candidates, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return FAPoolEntry(None, None, 0, mask)
    return FAPoolEntry(features[mask].sum(axis=0), pooled_prediction(scores, mask), n, mask)


@dataclass
class MemoryScene:
    """One image's view for the memory step.

    Detection scenes carry per-proposal coarse labels (``-1`` = background)
    and are unlabelled at image level; classification scenes carry fine image
    labels and are unlabelled at proposal level. ``foreground`` marks the
    proposals eligible for the proposal-level loss on classification scenes.
    """

    source: str
    features: np.ndarray
    coarse_probs: np.ndarray
    fine_probs: np.ndarray
    proposal_labels: np.ndarray | None = None
    image_labels: tuple[int, ...] = ()
    foreground: np.ndarray | None = None


@dataclass
class MemoryStepResult:
    l_w: float
    l_f: float
    grad_coarse: list = field(default_factory=list)
    grad_fine: list = field(default_factory=list)
    n_proposal_terms: int = 0
    n_image_terms: int = 0

    @property
    def total(self) -> float:
        return self.l_w + self.l_f


def dual_memory_step(coarse_bank: MemoryBank, fine_bank: MemoryBank, batch,
                     proposal_level: bool = True, image_level: bool = True,
                     min_prob: float = 0.0, warmup: int = 1) -> MemoryStepResult:
    """Compute both memory losses for ``batch``, then update both banks.

    Predictions use the banks as they stand at the start of the step. Losses
    are averaged over contributing items and are zero when nothing qualifies:
    empty batch, no unlabelled items, or a bank in which some class has seen
    fewer than ``warmup`` updates. The returned
    gradients are with respect to each scene's ``coarse_probs`` and
    ``fine_probs``.
    """
    res = MemoryStepResult(0.0, 0.0)
    pending_w, pending_f = [], []
    for scene in batch:
        gc = np.zeros_like(scene.coarse_probs)
        gf = np.zeros_like(scene.fine_probs)
        res.grad_coarse.append(gc)
        res.grad_fine.append(gf)
        if scene.source == "detection":
            if proposal_level and scene.proposal_labels is not None:
                for i in np.flatnonzero(scene.proposal_labels >= 0):
                    pending_w.append((scene.features[i], scene.coarse_probs[i], int(scene.proposal_labels[i])))
            if image_level and fine_bank.is_warm(warmup):
                cand = scene.proposal_labels >= 0 if scene.proposal_labels is not None else None
                winners = np.argmax(scene.fine_probs, axis=1)
                if cand is not None:
                    winners = winners[cand]
                for c in np.unique(winners):
                    entry = fa_pool(scene.features, scene.fine_probs, int(c), min_prob, cand)
                    if not entry.present:
                        continue
                    ihat = memory_predict(fine_bank, entry.feature / entry.count)
                    res.l_f += entropy(ihat) + kl_div(entry.prediction, ihat)
                    gf += pooled_prediction_backward(scene.fine_probs, entry.mask,
                                                     memory_loss_grad(entry.prediction, ihat))
                    res.n_image_terms += 1
        elif scene.source == "classification":
            if proposal_level and coarse_bank.is_warm(warmup):
                rows = (np.arange(len(scene.features)) if scene.foreground is None
                        else np.flatnonzero(scene.foreground))
                for i in rows:
                    phat = memory_predict(coarse_bank, scene.features[i])
                    p = scene.coarse_probs[i]
                    res.l_w += entropy(phat) + kl_div(p, phat)
                    gc[i] += memory_loss_grad(p, phat)
                    res.n_proposal_terms += 1
            if image_level:
                for c in scene.image_labels:
                    entry = fa_pool(scene.features, scene.fine_probs, int(c), min_prob)
                    if entry.present:
                        pending_f.append((entry.feature / entry.count, entry.prediction, int(c)))
        else:
            raise ValidationError(f"unknown scene source {scene.source!r}")

    if res.n_proposal_terms:
        res.l_w /= res.n_proposal_terms
        for g in res.grad_coarse:
            g /= res.n_proposal_terms
    if res.n_image_terms:
        res.l_f /= res.n_image_terms
        for g in res.grad_fine:
            g /= res.n_image_terms
    for x, p, c in pending_w:
        memory_update(coarse_bank, x, p, c)
    for x, p, c in pending_f:
        memory_update(fine_bank, x, p, c)
    return res
