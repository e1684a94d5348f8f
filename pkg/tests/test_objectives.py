import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vltrim import tensor as T
from vltrim.errors import ParameterError
from vltrim.gradcheck import check_gradients
from vltrim.objectives import (
    DEFAULT_TOPK,
    ContrastiveBatch,
    DetectionInputs,
    LogitPair,
    box_losses,
    focal_loss,
    loss_contrastive,
    loss_distill,
    loss_i2t,
    loss_pretrain,
    loss_t2i,
    pretrain_terms,
    topk_match,
)
from vltrim.tensor import Tensor

from oracles import box_areas_by_counting, focal_direct, info_nce_loops, kl_direct, topk_full_sort


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_batch(seed, n=6, d=5, tau=0.3):
    rng = np.random.default_rng(seed)
    return ContrastiveBatch(unit_rows(rng, n, d), unit_rows(rng, n, d), tau)


def uniform_batch(n):
    f = np.zeros((n, 2))
    f[:, 0] = 1.0
    return ContrastiveBatch(f, f.copy(), 0.5)


# -- contrastive ------------------------------------------------------------


def test_single_pair_is_zero():
    b = random_batch(0, n=1)
    assert loss_i2t(b).item() == 0.0
    assert loss_t2i(b).item() == 0.0
    assert loss_contrastive(b).item() == 0.0


@pytest.mark.parametrize("n", [2, 5, 16])
def test_uniform_similarity(n):
    b = uniform_batch(n)
    assert abs(loss_i2t(b).item() - math.log(n)) < 1e-12
    assert abs(loss_t2i(b).item() - math.log(n)) < 1e-12
    assert abs(loss_contrastive(b).item() - 2 * math.log(n)) < 1e-12


def test_symmetric_similarity_equal_directions():
    rng = np.random.default_rng(1)
    f = unit_rows(rng, 5, 4)
    b = ContrastiveBatch(f, f.copy(), 0.2)
    assert abs(loss_i2t(b).item() - loss_t2i(b).item()) < 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_contrastive_vs_double_loop(seed):
    b = random_batch(seed)
    fv, fl = b.f_v.data.tolist(), b.f_l.data.tolist()
    i2t, t2i = info_nce_loops(fv, fl, b.tau), info_nce_loops(fl, fv, b.tau)
    assert abs(loss_i2t(b).item() - i2t) <= 1e-10
    assert abs(loss_t2i(b).item() - t2i) <= 1e-10
    assert abs(loss_contrastive(b).item() - (i2t + t2i)) <= 1e-10


def test_batch_validation():
    with pytest.raises(ParameterError):
        random_batch(0, tau=0.0)
    with pytest.raises(ParameterError):
        ContrastiveBatch(np.ones((2, 2)), np.ones((2, 2)))


def test_positive_similarity_increase_lowers_loss():
    n = 4

    def batch(theta0):
        fv = np.zeros((n, 2 * n))
        fl = np.zeros((n, 2 * n))
        for i in range(n):
            th = theta0 if i == 0 else 0.7
            fv[i, i] = 1.0
            fl[i, i], fl[i, n + i] = math.cos(th), math.sin(th)
        return ContrastiveBatch(fv, fl, 0.5)

    values = [loss_contrastive(batch(th)).item() for th in (1.2, 0.9, 0.6, 0.3, 0.0)]
    assert all(a > b for a, b in zip(values, values[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_losses_nonnegative_and_shuffle_invariant(seed):
    b = random_batch(seed, n=7)
    perm = np.random.default_rng(seed + 1).permutation(7)
    bp = ContrastiveBatch(b.f_v.data[perm], b.f_l.data[perm], b.tau)
    for fn in (loss_i2t, loss_t2i, loss_contrastive):
        v = fn(b).item()
        assert v >= 0
        assert abs(v - fn(bp).item()) <= 1e-12


# -- top-K matching ---------------------------------------------------------


def test_topk_default_is_three():
    assert DEFAULT_TOPK == 3
    rng = np.random.default_rng(0)
    assert len(topk_match(unit_rows(rng, 2, 3), unit_rows(rng, 5, 3))[0].indices) == 3


def test_identical_row_ranked_first():
    rng = np.random.default_rng(1)
    fv = unit_rows(rng, 6, 4)
    m = topk_match(fv[[4]], fv)[0]
    assert m.indices[0] == 4
    assert abs(m.similarities[0] - 1.0) < 1e-12


def test_topk_vs_full_sort():
    rng = np.random.default_rng(2)
    for trial in range(1000):
        m, n, d = rng.integers(1, 6), rng.integers(3, 10), rng.integers(2, 6)
        f_l, f_v = rng.normal(size=(m, d)), rng.normal(size=(n, d))
        if trial % 10 == 0:
            f_v[1] = f_v[0]  # exact ties exercise the index tie-break
        k = int(rng.integers(1, n + 1))
        got = [mt.indices for mt in topk_match(f_l, f_v, k)]
        assert got == topk_full_sort(f_l, f_v, k)


def test_topk_k_too_large():
    with pytest.raises(ParameterError):
        topk_match(np.ones((1, 2)), np.ones((2, 2)), 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_topk_scale_invariant(seed):
    rng = np.random.default_rng(seed)
    f_l, f_v = rng.normal(size=(3, 4)), rng.normal(size=(6, 4))
    s_l, s_v = rng.uniform(0.1, 10, size=(3, 1)), rng.uniform(0.1, 10, size=(6, 1))
    a = [m.indices for m in topk_match(f_l, f_v)]
    b = [m.indices for m in topk_match(f_l * s_l, f_v * s_v)]
    assert a == b


# -- focal ------------------------------------------------------------------


def random_probs(rng, n, c):
    e = np.exp(rng.normal(size=(n, c)))
    return e / e.sum(axis=1, keepdims=True)


def test_focal_reduces_to_cross_entropy():
    rng = np.random.default_rng(0)
    p, t = random_probs(rng, 5, 4), rng.integers(0, 4, size=5)
    ce = -np.mean(np.log(p[np.arange(5), t]))
    assert abs(focal_loss(p, t, alpha=1.0, gamma=0.0).item() - ce) < 1e-14


def test_focal_confident_is_zero():
    assert focal_loss(np.eye(3), np.arange(3)).item() == 0.0


def test_focal_clamps_zero_probability():
    v = focal_loss(np.array([[0.0, 1.0]]), [0]).item()
    assert abs(v - 0.25 * -math.log(1e-12) * (1 - 1e-12) ** 2) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_focal_vs_direct(seed):
    rng = np.random.default_rng(seed)
    p, t = random_probs(rng, 8, 5), rng.integers(0, 5, size=8)
    alpha, gamma = rng.uniform(0.1, 1), rng.uniform(0, 3)
    assert abs(focal_loss(p, t, alpha, gamma).item() - focal_direct(p.tolist(), t.tolist(), alpha, gamma)) <= 1e-12


# -- boxes ------------------------------------------------------------------


def test_identical_boxes():
    b = np.array([[0.1, 0.2, 0.5, 0.7]])
    l2, giou = box_losses(b, b)
    assert l2.item() == 0.0 and giou.item() == 0.0


def test_degenerate_prediction():
    l2, giou = box_losses(np.array([[0.3, 0.3, 0.3, 0.6]]), np.array([[0.1, 0.1, 0.5, 0.5]]))
    # zero-area prediction: IoU 0, hull equals union = target area plus nothing
    hull = 0.4 * 0.5
    assert abs(giou.item() - (1.0 + (hull - 0.16) / hull)) < 1e-12


def test_l2_is_squared_error():
    l2, _ = box_losses(np.array([[0.0, 0.0, 1.0, 1.0]]), np.array([[0.1, 0.0, 1.0, 1.2]]))
    assert abs(l2.item() - (0.01 + 0.04)) < 1e-15


def test_invalid_target_rejected():
    with pytest.raises(ParameterError):
        box_losses(np.array([[0, 0, 1, 1.0]]), np.array([[0.5, 0, 0.4, 1.0]]))


def random_box(rng, lo=0.15):
    x0, y0 = rng.uniform(0, 1 - lo, size=2)
    x1, y1 = rng.uniform(x0 + lo, 1), rng.uniform(y0 + lo, 1)
    return np.array([x0, y0, x1, y1])


def test_giou_vs_raster_counting():
    rng = np.random.default_rng(3)
    for _ in range(40):
        p, t = random_box(rng), random_box(rng)
        iou, hull_frac = box_areas_by_counting(p, t, res=4000)
        _, loss = box_losses(p[None], t[None])
        assert abs((1.0 - loss.item()) - (iou - hull_frac)) <= 1e-3


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_giou_range(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-1, 2, size=(3, 4))
    t = np.stack([random_box(rng, 0.01) for _ in range(3)])
    _, loss = box_losses(p, t)
    assert 0.0 <= loss.item() < 2.0


# -- pretraining and distillation -------------------------------------------


def detection(rng, n=3, c=4):
    return DetectionInputs(
        Tensor(random_probs(rng, n, c)), rng.integers(0, c, size=n), Tensor(rng.uniform(0, 1, size=(n, 4))),
        np.stack([random_box(rng) for _ in range(n)]),
    )


def test_pretrain_perfect_single():
    f = np.array([[1.0, 0.0]])
    box = np.array([[0.1, 0.1, 0.4, 0.5]])
    det = DetectionInputs(Tensor(np.array([[0.0, 1.0, 0.0]])), np.array([1]), Tensor(box), box)
    assert loss_pretrain(ContrastiveBatch(f, f), det).item() == 0.0


def test_pretrain_is_component_sum():
    rng = np.random.default_rng(4)
    b = random_batch(4, n=3)
    det = detection(rng)
    terms = pretrain_terms(b, det)
    l2, giou = box_losses(det.pred_boxes, det.target_boxes)
    expect = loss_contrastive(b).item() + focal_loss(det.class_probs, det.target_classes).item() + l2.item() + giou.item()
    assert abs(loss_pretrain(b, det).item() - expect) <= 1e-12
    assert abs(terms.total.item() - expect) <= 1e-12


def test_pretrain_gradient():
    rng = np.random.default_rng(5)
    raw_v, raw_l = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    logits = Tensor(rng.normal(size=(3, 5)))
    boxes = Tensor(np.stack([random_box(rng) for _ in range(3)]) + rng.uniform(0.02, 0.05, size=(3, 4)))
    cls, tgt = rng.integers(0, 5, size=3), np.stack([random_box(rng) for _ in range(3)])

    def fn(v, l, lg, bx):
        batch = ContrastiveBatch(T.l2_normalize(v, axis=1), T.l2_normalize(l, axis=1), 0.5)
        return loss_pretrain(batch, DetectionInputs(T.softmax(lg, axis=1), cls, bx, tgt))

    assert check_gradients(fn, [raw_v, raw_l, logits, boxes]) < 1e-4


def test_distill_identical_zero():
    x = np.random.default_rng(6).normal(size=(4, 5))
    assert loss_distill(LogitPair(x, x.copy()), 2.0).item() == 0.0


@pytest.mark.parametrize("c", [2, 5, 10])
def test_distill_hard_teacher_uniform_student(c):
    teacher = np.zeros((3, c))
    teacher[:, 0] = 60.0
    assert abs(loss_distill(LogitPair(teacher, np.zeros((3, c))), 1.0).item() - math.log(c)) < 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_distill_vs_direct(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(6, 4)) * 2, rng.normal(size=(6, 4)) * 2
    tau = rng.uniform(0.5, 3)
    assert abs(loss_distill(LogitPair(a, b), tau).item() - kl_direct(a, b, tau)) <= 1e-10


def test_distill_no_teacher_gradient():
    rng = np.random.default_rng(7)
    teacher = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    student = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    loss_distill(LogitPair(teacher, student)).backward()
    assert teacher.grad is None and student.grad is not None


def test_distill_bad_tau():
    with pytest.raises(ParameterError):
        loss_distill(LogitPair(np.ones((1, 2)), np.ones((1, 2))), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_distill_nonnegative_and_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert loss_distill(LogitPair(a, b)).item() > 0
    # a constant shift per row leaves the softmax unchanged
    shifted = a + rng.normal(size=(4, 1))
    assert abs(loss_distill(LogitPair(a, shifted)).item()) < 1e-12
