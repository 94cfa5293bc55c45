import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from finedet.attention import (PoolingSpec, ScoreMap, class_softmax, coarse_to_fine_attention, fine_attention,
                               pool, proposal_normalize, rerank)
from finedet.errors import ValidationError

maps = hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 5)), elements=st.floats(-30, 30))


def test_class_softmax_examples():
    out = class_softmax(np.zeros((2, 5)))
    assert np.allclose(out, 0.25)
    out = class_softmax([[math.log(3), 0.0, 9.0]])
    assert np.allclose(out, [[0.75, 0.25]], atol=1e-15)


def test_class_softmax_background_flag():
    z = np.array([[0.0, 0.0, 0.0]])
    assert np.allclose(class_softmax(z, include_background=True), [[1 / 3, 1 / 3]])


def test_class_softmax_rejects_nonfinite():
    with pytest.raises(ValidationError):
        class_softmax([[0.0, float("inf"), 0.0]])


@settings(max_examples=60, deadline=None)
@given(maps, st.floats(-100, 100))
def test_class_softmax_rows_and_shift(z, c):
    out = class_softmax(z)
    assert np.all(np.abs(out.sum(axis=1) - 1) <= 1e-9)
    assert np.allclose(class_softmax(z + c), out, atol=1e-12, rtol=0)


def test_proposal_normalize_examples():
    assert proposal_normalize([[0.3, 0.7]]).tolist() == [[1.0, 1.0]]
    assert np.allclose(proposal_normalize(np.full((4, 2), 0.5)), 0.25)
    e = math.e
    assert np.allclose(proposal_normalize([[1.0], [0.0]])[:, 0], [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    with pytest.raises(ValidationError):
        proposal_normalize(np.zeros((0, 3)))


@settings(max_examples=60, deadline=None)
@given(maps, st.integers(0, 10**6))
def test_proposal_normalize_columns_and_argmax(s, seed):
    a = proposal_normalize(s)
    assert np.all(np.abs(a.sum(axis=0) - 1) <= 1e-9)
    shift = np.random.default_rng(seed).uniform(-5, 5, size=s.shape[1])
    assert np.array_equal(np.argmax(proposal_normalize(s + shift), axis=0), np.argmax(a, axis=0))


def test_attention_identity_and_copy(rng):
    af = proposal_normalize(rng.random((4, 3)))
    assert np.array_equal(coarse_to_fine_attention(af, np.eye(3)), af)
    aw = coarse_to_fine_attention(af[:, :2], np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
    assert np.array_equal(aw[:, 0], af[:, 0]) and np.array_equal(aw[:, 1], af[:, 0])
    with pytest.raises(ValidationError):
        coarse_to_fine_attention(af, np.eye(2))


def test_attention_triple_loop_oracle(rng):
    af = rng.random((5, 4))
    m = rng.random((4, 6))
    m /= m.sum(axis=0)
    oracle = np.zeros((5, 6))
    for p in range(5):
        for j in range(6):
            oracle[p, j] = math.fsum(af[p, k] * m[k, j] for k in range(4))
    assert np.allclose(coarse_to_fine_attention(af, m), oracle, atol=1e-12, rtol=0)


def test_rerank(rng):
    sw = rng.random((5, 3))
    assert np.array_equal(rerank(sw, np.ones_like(sw)), sw)
    assert not rerank(sw, np.zeros_like(sw)).any()
    aw = rng.random((5, 3))
    loop = [[sw[p, j] * aw[p, j] for j in range(3)] for p in range(5)]
    assert rerank(sw, aw).tolist() == loop
    with pytest.raises(ValidationError):
        rerank(sw, aw[:4])


def test_pool_examples():
    col = np.array([[1.0], [2.0], [3.0]])
    assert pool(col, PoolingSpec("top-k-average", 2))[0] == 2.5
    assert pool(col, PoolingSpec("sum"))[0] == 6.0
    assert pool(col, PoolingSpec("top-k-average", 5))[0] == pool(col, PoolingSpec("average"))[0] == 2.0
    assert pool(col, PoolingSpec("max"))[0] == 3.0
    w = np.exp([1.0, 2.0, 3.0])
    assert pool(col, PoolingSpec("weighted-average"))[0] == pytest.approx((w @ [1, 2, 3]) / w.sum(), abs=1e-12)
    with pytest.raises(ValidationError):
        PoolingSpec("median")
    with pytest.raises(ValidationError):
        PoolingSpec("top-k-average", 0)


@settings(max_examples=40, deadline=None)
@given(maps, st.sampled_from(["max", "average", "top-k-average", "weighted-average", "sum"]),
       st.randoms(use_true_random=False))
def test_pool_permutation_invariant(sm, kind, rnd):
    order = list(range(len(sm)))
    rnd.shuffle(order)
    spec = PoolingSpec(kind, 2)
    assert np.allclose(pool(sm[order], spec), pool(sm, spec), atol=1e-12, rtol=1e-12)


def test_scoremap_text_roundtrip(rng):
    s = ScoreMap(rng.standard_normal((3, 4)), "logits")
    back = ScoreMap.from_text(s.to_text())
    assert np.array_equal(back.values, s.values) and back.scale == "logits"
    with pytest.raises(ValidationError):
        ScoreMap.from_text("MAP 2 2 logits\n1 2\n")


def scalar_pipeline(logits, corr, sw):
    """Straight-line scalar version of the foreground softmax, proposal softmax, mapping and product."""
    P, cf1 = len(logits), len(logits[0])
    cf, cw = cf1 - 1, len(corr[0])
    shat = [[math.exp(logits[p][c]) / sum(math.exp(logits[p][k]) for k in range(cf)) for c in range(cf)]
            for p in range(P)]
    af = [[math.exp(shat[p][c]) / sum(math.exp(shat[q][c]) for q in range(P)) for c in range(cf)]
          for p in range(P)]
    aw = [[sum(af[p][c] * corr[c][j] for c in range(cf)) for j in range(cw)] for p in range(P)]
    return aw, [[sw[p][j] * aw[p][j] for j in range(cw)] for p in range(P)]


def test_pipeline_matches_scalar_oracle(rng):
    logits = rng.standard_normal((3, 3))
    corr = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    sw = rng.random((3, 3))
    aw_o, rr_o = scalar_pipeline(logits.tolist(), corr.tolist(), sw.tolist())
    aw = fine_attention(logits, corr)
    assert np.max(np.abs(aw - aw_o)) <= 1e-12
    assert np.max(np.abs(rerank(sw, aw) - rr_o)) <= 1e-12
