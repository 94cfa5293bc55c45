import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from finedet.attention import PoolingSpec, pool
from finedet.errors import NumericalError, ValidationError
from finedet.losses import (detection_loss, entropy, grad_check, image_memory_objective, kl_div,
                            memory_loss_image, memory_loss_proposal, normalized_softmax_loss,
                            pool_backward, proposal_memory_objective, total_memory_loss, weakly_loss)


def kink_free_boxes(rng, n):
    """Residuals kept away from the smooth-L1 transition at +-1."""
    pred = rng.standard_normal((n, 4))
    r = rng.uniform(0.1, 0.8, (n, 4)) * rng.choice([-1, 1], (n, 4))
    big = rng.random((n, 4)) < 0.3
    r[big] = np.sign(r[big]) * rng.uniform(1.3, 2.5, big.sum())
    return pred, pred - r


def distinct_scores(rng, p, c):
    """Score maps without near-ties so top-k selection is stable under perturbation."""
    return np.stack([rng.permutation(p) * 0.37 + 0.01 * rng.random(p) for _ in range(c)], axis=1)


# --- detection loss ---------------------------------------------------------------

def test_detection_loss_examples():
    z = np.array([[50.0, 0, 0], [0, 0, 50.0]])
    box = np.zeros((1, 4))
    out = detection_loss(z, [0, 2], box, box)
    assert out.total < 1e-20 and out.reg == 0
    out = detection_loss(np.zeros((3, 5)), [0, 1, 4], np.zeros((0, 4)), np.zeros((0, 4)))
    assert out.cls == pytest.approx(math.log(5), abs=1e-15)
    out = detection_loss(np.zeros((1, 2)), [0], np.full((1, 4), 0.5), np.zeros((1, 4)))
    assert out.reg == pytest.approx(0.5) and out.total - out.cls == pytest.approx(0.25)


def test_detection_loss_label_range():
    with pytest.raises(ValidationError):
        detection_loss(np.zeros((1, 3)), [3], np.zeros((0, 4)), np.zeros((0, 4)))


def test_detection_loss_gradient(rng):
    for _ in range(5):
        n, c, m = 6, 4, 3
        labels = rng.integers(0, c, n)
        pred, target = kink_free_boxes(rng, m)

        def f(x):
            z = x[: n * c].reshape(n, c)
            b = x[n * c:].reshape(m, 4)
            out = detection_loss(z, labels, b, target)
            return out.total, np.concatenate([out.grad_logits.ravel(), out.grad_box.ravel()])

        x0 = np.concatenate([rng.standard_normal(n * c), pred.ravel()])
        assert grad_check(f, x0) < 1e-6


# --- weakly loss --------------------------------------------------------------------

def test_normalized_softmax_loss():
    val, grad = normalized_softmax_loss([0.0, 0.0], [0, 0])
    assert val == 0 and not grad.any()
    val, _ = normalized_softmax_loss([0.0, 0.0, 0.0, 0.0], [1, 1, 0, 0])
    assert val == pytest.approx(math.log(4))


def test_weakly_loss_lambda_zero_and_confident(rng):
    sw, aw = rng.random((5, 3)), rng.random((5, 3))
    y = np.array([1.0, 0.0, 1.0])
    out = weakly_loss(sw, aw, y, lam=0.0)
    assert out.total == out.global_term
    strong = np.zeros((5, 3))
    strong[:, 1] = 60.0
    assert weakly_loss(strong, np.ones_like(strong), np.array([0.0, 1.0, 0.0])).total < 1e-20


def scalar_weakly(sw, aw, y, lam):
    """Straight-line forward: top-5 average pooling, sum pooling, per-positive softmax CE."""
    P, C = len(sw), len(sw[0])

    def nce(z):
        m = max(z)
        lse = m + math.log(sum(math.exp(v - m) for v in z))
        pos = [c for c in range(C) if y[c] > 0]
        return sum(lse - z[c] for c in pos) / len(pos)

    top = []
    for c in range(C):
        col = sorted((sw[p][c] for p in range(P)), reverse=True)[:5]
        top.append(sum(col) / len(col))
    summed = [sum(sw[p][c] * aw[p][c] for p in range(P)) for c in range(C)]
    return nce(top), nce(summed), nce(top) + lam * nce(summed)


def test_weakly_loss_matches_scalar_oracle(rng):
    sw, aw = rng.standard_normal((4, 3)), rng.random((4, 3))
    y = [1.0, 0.0, 1.0]
    g, a, t = scalar_weakly(sw.tolist(), aw.tolist(), y, 0.1)
    out = weakly_loss(sw, aw, np.array(y), 0.1)
    assert abs(out.global_term - g) <= 1e-10 and abs(out.attention_term - a) <= 1e-10
    assert abs(out.total - t) <= 1e-10
    assert abs(out.total - (out.global_term + 0.1 * out.attention_term)) <= 1e-12


def test_weakly_loss_gradient(rng):
    for _ in range(5):
        p, c = 8, 4
        aw = rng.random((p, c))
        y = (rng.random(c) < 0.5).astype(float)
        y[0] = 1.0

        def f(x):
            out = weakly_loss(x.reshape(p, c), aw, y, 0.1)
            return out.total, out.grad_sw

        assert grad_check(f, distinct_scores(rng, p, c).ravel()) < 1e-6


@pytest.mark.parametrize("kind", ["max", "average", "top-k-average", "weighted-average", "sum"])
def test_pool_backward_all_kinds(rng, kind):
    spec = PoolingSpec(kind, 3)
    g = rng.standard_normal(3)

    def f(x):
        sm = x.reshape(6, 3)
        return float(pool(sm, spec) @ g), pool_backward(sm, spec, g)

    assert grad_check(f, distinct_scores(rng, 6, 3).ravel()) < 1e-6


def test_weakly_loss_proposal_order_invariant(rng):
    sw, aw = rng.standard_normal((7, 3)), rng.random((7, 3))
    y = np.array([0.0, 1.0, 1.0])
    order = rng.permutation(7)
    assert weakly_loss(sw[order], aw[order], y).total == pytest.approx(weakly_loss(sw, aw, y).total, abs=1e-12)


# --- entropy, KL, memory losses ---------------------------------------------------

def test_entropy_kl_examples():
    assert entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-15)
    assert kl_div([0.3, 0.7], [0.3, 0.7]) == 0
    assert kl_div([0.75, 0.25], [0.5, 0.5]) == pytest.approx(0.75 * math.log(1.5) + 0.25 * math.log(0.5))
    assert kl_div([0.75, 0.25], [0.5, 0.5]) == pytest.approx(0.1308, abs=1e-4)
    assert entropy([1.0, 0.0]) == 0
    with pytest.raises(ValidationError):
        entropy([0.5, 0.6])
    with pytest.raises(ValidationError):
        kl_div([1.2, -0.2], [0.5, 0.5])


def test_kl_clamps_zero_q():
    assert math.isfinite(kl_div([0.5, 0.5], [1.0, 0.0]))


@pytest.mark.parametrize("fn", [memory_loss_proposal, memory_loss_image])
def test_memory_loss_examples(fn):
    assert fn([1.0, 0.0], [1.0, 0.0]) == 0
    assert fn([0.5, 0.5], [0.5, 0.5]) == pytest.approx(math.log(2))
    assert fn([0.9, 0.1], [0.5, 0.5]) == pytest.approx(1.0612, abs=1e-4)


def test_total_memory_loss(rng):
    assert total_memory_loss(0.0, 0.0) == 0.0
    assert total_memory_loss(1.5, 0.5) == 2.0
    a, b = rng.random(2)
    assert total_memory_loss(a, b) == a + b


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=6), st.integers(0, 10**6))
def test_losses_non_negative(w, seed):
    p = np.array(w) / sum(w)
    q = np.random.default_rng(seed).dirichlet(np.ones(len(w)))
    assert kl_div(p, q) >= 0 and entropy(p) >= 0 and memory_loss_proposal(p, q) >= 0


def test_memory_objective_gradients(rng):
    for _ in range(5):
        phat = rng.dirichlet(np.ones(4), size=5)
        assert grad_check(lambda x: proposal_memory_objective(x.reshape(5, 4), phat),
                          rng.standard_normal(20)) < 1e-6
        mask = np.array([True, False, True, True, False])
        ihat = rng.dirichlet(np.ones(4))
        assert grad_check(lambda x: image_memory_objective(x.reshape(5, 4), mask, ihat),
                          rng.standard_normal(20)) < 1e-6


# --- gradient checker ----------------------------------------------------------------

def test_grad_check_examples():
    assert grad_check(lambda w: (float(w[0] ** 2), 2 * w), [3.0]) < 1e-8
    assert grad_check(lambda w: (1.0, np.zeros_like(w)), [1.0, 2.0]) == 0
    assert grad_check(lambda w: (float(w[0] ** 2), np.array([0.0])), [3.0]) > 0.5
    with pytest.raises(ValidationError):
        grad_check(lambda w: (0.0, w), [1.0], eps=1e-2)
    with pytest.raises(NumericalError):
        grad_check(lambda w: (float("nan"), w), [1.0])
