import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m2tr.errors import DataError, NumericError
from m2tr.losses import LossWeights, cls_loss, contrastive_loss, contrastive_terms, seg_loss, total_loss
from m2tr.numerics import Tensor
from m2tr.numerics.gradcheck import check_gradients
from m2tr.numerics.tensor import GradContext, backward

EPS = 1e-7


def bce_loops(p, y):
    vals = []
    for pi, yi in zip(np.ravel(p), np.ravel(y)):
        pi = min(max(pi, EPS), 1 - EPS)
        vals.append(-(yi * math.log(pi) + (1 - yi) * math.log(1 - pi)))
    return sum(vals) / len(vals)


def contrastive_oracle(f, y):
    """Two passes: explicit center of the reals, then explicit cosine loops."""
    reals = [row for row, lab in zip(f, y) if lab == 0]
    fakes = [row for row, lab in zip(f, y) if lab == 1]
    dim = len(f[0])
    center = [sum(r[k] for r in reals) / len(reals) for k in range(dim)]

    def dist(a):
        dot = sum(a[k] * center[k] for k in range(dim))
        na = math.sqrt(sum(v * v for v in a))
        nc = math.sqrt(sum(v * v for v in center))
        return 1 - dot / (na * nc)

    pos = sum(dist(r) for r in reals) / len(reals)
    neg = sum(dist(r) for r in fakes) / len(fakes) if fakes else 0.0
    return pos - neg


# ---- cross-entropy terms -------------------------------------------------

@pytest.mark.parametrize("label", [0, 1])
def test_half_probability_is_ln2(label):
    assert float(cls_loss(np.full(5, 0.5), np.full(5, label)).data) == pytest.approx(math.log(2), abs=1e-6)
    mask = np.full((8, 8), label)
    assert float(seg_loss(np.full((8, 8), 0.5), mask).data) == pytest.approx(math.log(2), abs=1e-6)


def test_confident_correct_is_near_zero():
    assert float(cls_loss(np.array([1 - EPS]), np.array([1])).data) < 1e-6
    m = (np.arange(16).reshape(4, 4) % 3 == 0).astype(float)
    assert float(seg_loss(m, m).data) < 1e-6


def test_matches_direct_formula(rng):
    p = rng.uniform(0, 1, 40)
    y = rng.integers(0, 2, 40)
    assert float(cls_loss(p, y).data) == pytest.approx(bce_loops(p, y), abs=1e-9)
    pm = rng.uniform(0, 1, (2, 6, 6))
    m = rng.integers(0, 2, (2, 6, 6))
    assert float(seg_loss(pm, m).data) == pytest.approx(bce_loops(pm, m), abs=1e-9)


def test_extreme_predictions_stay_finite():
    assert np.isfinite(float(cls_loss(np.array([0.0, 1.0]), np.array([1, 0])).data))


def test_non_binary_targets_rejected():
    with pytest.raises(DataError):
        cls_loss(np.array([0.3]), np.array([0.5]))
    with pytest.raises(DataError):
        seg_loss(np.full((2, 2), 0.3), np.full((2, 3), 1))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 30))
def test_cross_entropy_nonnegative(seed, n):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1, n)
    y = rng.integers(0, 2, n)
    assert float(cls_loss(p, y).data) >= 0
    assert float(seg_loss(p.reshape(1, n), y.reshape(1, n)).data) >= 0


# ---- contrastive ---------------------------------------------------------

def test_identical_reals_leave_only_negative_term(rng):
    c = rng.standard_normal(6)
    fakes = rng.standard_normal((3, 6))
    f = np.vstack([c, c, c, fakes])
    y = np.array([0, 0, 0, 1, 1, 1])
    neg = np.mean([1 - fk @ c / (np.linalg.norm(fk) * np.linalg.norm(c)) for fk in fakes])
    assert float(contrastive_loss(f, y).data) == pytest.approx(-neg, abs=1e-12)


def test_orthogonal_fakes_give_minus_one():
    f = np.array([[1.0, 0, 0], [2.0, 0, 0], [0, 1.0, 0], [0, 0, 3.0]])
    assert float(contrastive_loss(f, [0, 0, 1, 1]).data) == pytest.approx(-1.0, abs=1e-12)


def test_matches_two_pass_oracle(rng):
    for _ in range(10):
        f = rng.standard_normal((9, 5))
        y = np.array([0, 1, 0, 1, 1, 0, 0, 1, 0])
        assert float(contrastive_loss(f, y).data) == pytest.approx(contrastive_oracle(f.tolist(), y), abs=1e-6)


def test_no_reals_skips_and_no_fakes_drops_term(rng):
    res = contrastive_terms(rng.standard_normal((3, 4)), [1, 1, 1])
    assert res.skipped and float(res.value.data) == 0.0
    f = rng.standard_normal((3, 4))
    assert float(contrastive_loss(f, [0, 0, 0]).data) == pytest.approx(contrastive_oracle(f.tolist(), [0, 0, 0]))


def test_zero_feature_rejected(rng):
    f = rng.standard_normal((3, 4))
    f[1] = 0
    with pytest.raises(NumericError):
        contrastive_loss(f, [0, 1, 0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), log_scale=st.floats(-3, 3))
def test_contrastive_scale_invariant(seed, log_scale):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((8, 6))
    y = np.array([0, 1] * 4)
    a = float(contrastive_loss(f, y).data)
    b = float(contrastive_loss(f * np.exp(log_scale), y).data)
    assert abs(a - b) < 1e-6


def test_descent_pulls_reals_toward_center(rng):
    f = Tensor(rng.standard_normal((10, 4)), requires_grad=True)
    y = np.array([0] * 5 + [1] * 5)

    def pos_distance():
        reals = f.data[:5]
        c = reals.mean(axis=0)
        cos = reals @ c / (np.linalg.norm(reals, axis=1) * np.linalg.norm(c))
        return float(np.mean(1 - cos))

    prev = pos_distance()
    for _ in range(10):
        with GradContext() as ctx:
            loss = contrastive_loss(f, y)
        f.grad = None
        backward(loss, ctx, [f])
        f.data = f.data - 0.05 * f.grad
        cur = pos_distance()
        assert cur < prev
        prev = cur


# ---- weighted objective --------------------------------------------------

def test_default_weights_and_sum():
    w = LossWeights()
    assert (w.seg, w.con) == (1.0, 0.001)
    out = total_loss(0.7, 0.3, -0.5)
    assert float(out.data) == 0.7 + 1.0 * 0.3 + 0.001 * -0.5
    assert float(total_loss(0.7, 0.3, -0.5, LossWeights(0, 0)).data) == 0.7


def test_total_loss_random(rng):
    for _ in range(20):
        c, s, k = rng.standard_normal(3)
        ws, wc = rng.uniform(0, 2, 2)
        assert float(total_loss(c, s, k, LossWeights(ws, wc)).data) == pytest.approx(c + ws * s + wc * k, abs=1e-12)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(seg=-1)


# ---- gradients -----------------------------------------------------------

def test_loss_gradients(rng):
    p = Tensor(rng.uniform(0.05, 0.95, 12))
    y = rng.integers(0, 2, 12)
    assert check_gradients(lambda: cls_loss(p, y), [p]) < 1e-5
    pm = Tensor(rng.uniform(0.05, 0.95, (2, 4, 4)))
    m = rng.integers(0, 2, (2, 4, 4))
    assert check_gradients(lambda: seg_loss(pm, m), [pm]) < 1e-5
    f = Tensor(rng.standard_normal((8, 5)))
    lab = np.array([0, 1, 0, 1, 1, 0, 0, 1])
    assert check_gradients(lambda: contrastive_loss(f, lab), [f], max_entries=40) < 1e-5
