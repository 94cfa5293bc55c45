"""Training objectives with hand-derived gradients.

Every loss returns its value together with the gradient with respect to its
score inputs; the harness chains those into the linear heads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from finedet.attention import PoolingSpec, pool_weights
from finedet.errors import NumericalError, ValidationError

KL_EPS = 1e-12
PROB_TOL = 1e-6
DETECTION_REG_WEIGHT = 0.5
WEAKLY_LAMBDA = 0.1
GLOBAL_POOL = PoolingSpec("top-k-average", 5)
ATTENTION_POOL = PoolingSpec("sum")


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_backward(p, g, axis=-1):
    """Vector-Jacobian product of softmax: given p = softmax(z) and dL/dp."""
    return p * (g - (p * g).sum(axis=axis, keepdims=True))


def smooth_l1(residual, beta: float = 1.0):
    """Elementwise smooth-L1 value and derivative, quadratic below ``beta``."""
    r = np.asarray(residual, dtype=np.float64)
    a = np.abs(r)
    quad = a < beta
    value = np.where(quad, 0.5 * r * r / beta, a - 0.5 * beta)
    grad = np.where(quad, r / beta, np.sign(r))
    return value, grad


@dataclass(frozen=True)
class DetectionLoss:
    cls: float
    reg: float
    total: float
    grad_logits: np.ndarray
    grad_box: np.ndarray


def detection_loss(cls_logits, cls_labels, box_pred, box_targets,
                   reg_weight: float = DETECTION_REG_WEIGHT) -> DetectionLoss:
    """Softmax cross-entropy plus weighted smooth-L1 box regression.

    ``cls_labels`` are 0-based with the background class last. The
    classification term is averaged over proposals; the regression term sums
    the four coordinates and averages over the foreground rows in
    ``box_pred``.
    """
    z = np.asarray(cls_logits, dtype=np.float64)
    labels = np.asarray(cls_labels, dtype=int)
    n, c = z.shape
    if labels.shape != (n,):
        raise ValidationError("one label per proposal required")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValidationError(f"label out of range [0, {c - 1}]")
    box_pred = np.asarray(box_pred, dtype=np.float64).reshape(-1, 4)
    box_targets = np.asarray(box_targets, dtype=np.float64).reshape(-1, 4)
    if box_pred.shape != box_targets.shape:
        raise ValidationError("box predictions and targets differ in shape")

    if n:
        logp = log_softmax(z, axis=1)
        cls = float(-logp[np.arange(n), labels].mean())
        grad_logits = np.exp(logp)
        grad_logits[np.arange(n), labels] -= 1.0
        grad_logits /= n
    else:
        cls, grad_logits = 0.0, np.zeros_like(z)

    m = len(box_pred)
    if m:
        val, d = smooth_l1(box_pred - box_targets)
        reg = float(val.sum() / m)
        grad_box = reg_weight * d / m
    else:
        reg, grad_box = 0.0, np.zeros_like(box_pred)
    return DetectionLoss(cls, reg, reg_weight * reg + cls, grad_logits, grad_box)


def normalized_softmax_loss(z, y):
    """Softmax cross-entropy averaged over the positive labels of ``y``.

    Returns ``(value, dvalue/dz)``; both are zero when ``y`` has no positives.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    npos = y.sum()
    if npos <= 0:
        return 0.0, np.zeros_like(z)
    target = y / npos
    logp = log_softmax(z)
    return float(-(target * logp).sum()), np.exp(logp) - target


def pool_backward(sm, spec: PoolingSpec, grad_pooled) -> np.ndarray:
    """dL/dsm given dL/dpooled for :func:`finedet.attention.pool`."""
    sm = np.asarray(sm, dtype=np.float64)
    w = pool_weights(sm, spec)
    if spec.kind == "weighted-average":
        pooled = (w * sm).sum(axis=0)
        return w * (1.0 + sm - pooled) * grad_pooled
    return w * grad_pooled


@dataclass(frozen=True)
class WeaklyLoss:
    global_term: float
    attention_term: float
    total: float
    grad_sw: np.ndarray


def weakly_loss(sw, aw, labels, lam: float = WEAKLY_LAMBDA,
                global_pool: PoolingSpec = GLOBAL_POOL,
                attention_pool: PoolingSpec = ATTENTION_POOL) -> WeaklyLoss:
    """Image-level loss of the fine stream with attention re-ranking.

    ``global(pool(sw)) + lam * global(pool(sw * aw))``; the attention map is
    a constant, so only ``sw`` receives a gradient.
    """
    sw = np.asarray(sw, dtype=np.float64)
    aw = np.asarray(aw, dtype=np.float64)
    if sw.shape != aw.shape:
        raise ValidationError(f"score map {sw.shape} and attention {aw.shape} differ")
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (sw.shape[1],):
        raise ValidationError("label vector must have one entry per fine class")

    g_val, g_grad = normalized_softmax_loss(_pool(sw, global_pool), labels)
    grad = pool_backward(sw, global_pool, g_grad)
    a_val = 0.0
    if lam != 0:
        rer = sw * aw
        a_val, a_grad = normalized_softmax_loss(_pool(rer, attention_pool), labels)
        grad = grad + lam * aw * pool_backward(rer, attention_pool, a_grad)
    return WeaklyLoss(g_val, a_val, g_val + lam * a_val, grad)


def _pool(sm, spec):
    return (pool_weights(sm, spec) * sm).sum(axis=0)


# --- memory objectives ---------------------------------------------------------

def _check_prob(p, name):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValidationError(f"{name} has negative components")
    if abs(p.sum() - 1.0) > PROB_TOL:
        raise ValidationError(f"{name} sums to {p.sum():.9g}, not 1")
    return p


def entropy(p) -> float:
    p = _check_prob(p, "distribution")
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def kl_div(p, q, eps: float = KL_EPS) -> float:
    p = _check_prob(p, "p")
    q = np.maximum(_check_prob(q, "q"), eps)
    nz = p > 0
    return float((p[nz] * (np.log(p[nz]) - np.log(q[nz]))).sum())


def memory_loss_proposal(p, phat) -> float:
    """Entropy of the memory prediction plus KL(network || memory)."""
    return entropy(phat) + kl_div(p, phat)


def memory_loss_image(i, ihat) -> float:
    return entropy(ihat) + kl_div(i, ihat)


def total_memory_loss(l_w: float, l_f: float) -> float:
    return l_w + l_f


def memory_loss_grad(p, q, eps: float = KL_EPS) -> np.ndarray:
    """d/dp of H(q) + KL(p || q) for strictly positive ``p``."""
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log(np.maximum(q, eps)) + 1.0


def proposal_memory_objective(logits, phat):
    """Mean proposal-level memory loss of ``softmax(logits)`` rows.

    Returns ``(value, dvalue/dlogits)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    phat = np.asarray(phat, dtype=np.float64)
    if z.shape != phat.shape:
        raise ValidationError("logits and memory predictions differ in shape")
    n = len(z)
    if n == 0:
        return 0.0, np.zeros_like(z)
    p = softmax(z, axis=1)
    value = sum(memory_loss_proposal(pi, qi) for pi, qi in zip(p, phat)) / n
    return value, softmax_backward(p, memory_loss_grad(p, phat) / n, axis=1)


def pooled_prediction(probs, mask):
    """Renormalized sum of the selected probability rows."""
    total = probs[mask].sum(axis=0)
    return total / total.sum()


def pooled_prediction_backward(probs, mask, grad_i):
    """dL/dprobs for :func:`pooled_prediction` given dL/dI."""
    total = probs[mask].sum(axis=0)
    s = total.sum()
    d_total = grad_i / s - (grad_i * total).sum() / (s * s)
    out = np.zeros_like(probs)
    out[mask] = d_total
    return out


def image_memory_objective(logits, mask, ihat):
    """Image-level memory loss of the FA-pooled prediction of selected rows."""
    z = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0, np.zeros_like(z)
    p = softmax(z, axis=1)
    i = pooled_prediction(p, mask)
    value = memory_loss_image(i, ihat)
    d_p = pooled_prediction_backward(p, mask, memory_loss_grad(i, ihat))
    return value, softmax_backward(p, d_p, axis=1)


# --- gradient checking -----------------------------------------------------

def grad_check(loss_fn: Callable, params, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(x)`` must return ``(value, gradient)`` for a flat float array
    ``x``. Relative error is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValidationError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x = np.array(params, dtype=np.float64).ravel()
    value, analytic = loss_fn(x.copy())
    if not np.isfinite(value):
        raise NumericalError("loss is not finite at the check point")
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    worst = 0.0
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        fp, fm = loss_fn(xp)[0], loss_fn(xm)[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"loss is not finite near coordinate {i}")
        numeric = (fp - fm) / (2 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
        worst = max(worst, err)
    return worst
