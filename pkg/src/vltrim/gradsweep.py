"""Finite-difference sweep over every differentiable op and composite loss.

Each case draws small random float64 inputs, reduces the op output to a
scalar through a fixed random weighting and compares analytic and central
finite-difference gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import objectives as O
from . import tensor as T
from .gradcheck import check_gradients
from .tensor import Tensor
from .vl_blocks.attention import CrossModalBlock, cross_attend
from .vl_blocks.interaction import InteractionNetwork, SelfAttention, interaction_forward, layer_norm
from .vl_blocks.regions import RegionSet, region_pool

Builder = Callable[[np.random.Generator], tuple[list[Tensor], Callable[..., Tensor]]]


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=float))


def _away(rng, shape, margin=0.05) -> np.ndarray:
    """Normal samples pushed at least ``margin`` away from zero."""
    x = rng.normal(size=shape)
    return x + np.sign(x) * margin


def _distinct(rng, shape, gap=0.05) -> np.ndarray:
    """Values with pairwise gaps ≥ gap, in random order (keeps max() off ties)."""
    n = int(np.prod(shape))
    vals = np.cumsum(rng.uniform(gap, 1.0, size=n)) - n * 0.5
    return rng.permutation(vals).reshape(shape)


def _weighted(rng, shape):
    w = _t(rng.normal(size=shape))
    return lambda y: T.sum_(T.mul(y, w))


def _unary(op, sample=None):
    def build(rng):
        x = _t(sample(rng) if sample else rng.normal(size=(3, 4)))
        red = _weighted(rng, op(x).shape)
        return [x], lambda a: red(op(a))

    return build


def _binary(op, sample_b=None, shape_b=(3, 4)):
    def build(rng):
        a = _t(rng.normal(size=(3, 4)))
        b = _t(sample_b(rng) if sample_b else rng.normal(size=shape_b))
        red = _weighted(rng, op(a, b).shape)
        return [a, b], lambda x, y: red(op(x, y))

    return build


def _unit_rows(rng, n, d):
    return _t(rng.normal(size=(n, d)))


def _contrastive(loss):
    def build(rng):
        n, d = int(rng.integers(2, 5)), 5
        fv, fl = _unit_rows(rng, n, d), _unit_rows(rng, n, d)
        tau = float(rng.uniform(0.1, 1.0))

        def fn(a, b):
            return loss(O.ContrastiveBatch(T.l2_normalize(a, axis=1), T.l2_normalize(b, axis=1), tau))

        return [fv, fl], fn

    return build


def _boxes(rng, n, jitter=0.0, base=None):
    if base is None:
        xy = rng.uniform(0.0, 0.5, size=(n, 2))
        wh = rng.uniform(0.2, 0.5, size=(n, 2))
        return np.hstack([xy, xy + wh])
    # keep every coordinate off the min/max kinks at pred == target
    return base + rng.uniform(0.01, jitter, size=base.shape) * rng.choice([-1.0, 1.0], size=base.shape)


def _build_conv(rng):
    c_in, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = _t(rng.normal(size=(2, c_in, 5, 5)))
    w = _t(rng.normal(size=(c_out, c_in, k, k)))
    b = _t(rng.normal(size=c_out))
    red = _weighted(rng, T.conv2d(x, w, b, stride, pad).shape)
    return [x, w, b], lambda x_, w_, b_: red(T.conv2d(x_, w_, b_, stride, pad))


def _build_matmul(rng):
    a = _t(rng.normal(size=(2, 3, 4)))
    b = _t(rng.normal(size=(2, 4, 2)))
    red = _weighted(rng, (2, 3, 2))
    return [a, b], lambda x, y: red(T.matmul(x, y))


def _build_region_pool(rng):
    d, h, w = 3, 6, 6
    v = _t(_distinct(rng, (d, h, w)))
    boxes = []
    for _ in range(int(rng.integers(1, 4))):
        x0, y0 = rng.integers(0, 4, size=2)
        boxes.append((int(x0), int(y0), int(x0 + rng.integers(1, 3)), int(y0 + rng.integers(1, 3))))
    regions = RegionSet.from_boxes(boxes, h, w)
    red = _weighted(rng, (d, len(boxes)))
    return [v], lambda a: red(region_pool(a, regions))


def _build_cross_attend(rng):
    d_a, d_c, n_hat = 3, 4, 5
    anchor = _t(rng.normal(size=(d_a, 3)))
    context = _t(rng.normal(size=(d_c, int(rng.integers(1, 4)))))
    blk = CrossModalBlock.init(rng, d_a, d_c, n_hat)
    wq, wk, wv = (_t(p.data) for p in (blk.w_q, blk.w_k, blk.w_v))
    red = _weighted(rng, (3, n_hat))

    def fn(a, c, q, k, v):
        return red(cross_attend(a, c, CrossModalBlock(q, k, v)))

    return [anchor, context, wq, wk, wv], fn


def _build_layer_norm(rng):
    x = _t(rng.normal(size=(3, 4)))
    g = _t(rng.normal(size=4))
    b = _t(rng.normal(size=4))
    red = _weighted(rng, (3, 4))
    return [x, g, b], lambda x_, g_, b_: red(layer_norm(x_, g_, b_))


def _build_self_attention(rng):
    width = 4
    att = SelfAttention.init(rng, width)
    x = _t(rng.normal(size=(3, width)))
    params = [_t(p.data) for p in att.parameters().values()]
    red = _weighted(rng, (3, width))

    def fn(x_, *ps):
        return red(SelfAttention(*ps).forward(x_))

    return [x] + params, fn


def _build_interaction(rng):
    width, embed = 4, 3
    net = InteractionNetwork.init(rng, width, embed, depth=1)
    xv = _t(rng.normal(size=(2, width)))
    xl = _t(rng.normal(size=(2, width)))
    wv = _t(rng.normal(size=(2, embed)))
    wl = _t(rng.normal(size=(2, embed)))

    def fn(a, b):
        fv, fl = interaction_forward(a, b, net)
        return T.sum_(T.mul(fv, wv)) + T.sum_(T.mul(fl, wl))

    return [xv, xl], fn


def _build_focal(rng):
    n, c = 4, 5
    logits = _t(rng.normal(size=(n, c)))
    targets = rng.integers(0, c, size=n)
    return [logits], lambda z: O.focal_loss(T.softmax(z, axis=1), targets)


def _build_box(which):
    def build(rng):
        n = int(rng.integers(1, 4))
        target = _boxes(rng, n)
        pred = _t(_boxes(rng, n, 0.08, target))
        return [pred], lambda p: O.box_losses(p, target)[which]

    return build


def _build_pretrain(rng):
    n, d, c = 3, 5, 4
    fv, fl = _unit_rows(rng, n, d), _unit_rows(rng, n, d)
    logits = _t(rng.normal(size=(n, c)))
    classes = rng.integers(0, c, size=n)
    target = _boxes(rng, n)
    pred = _t(_boxes(rng, n, 0.08, target))

    def fn(a, b, z, p):
        batch = O.ContrastiveBatch(T.l2_normalize(a, axis=1), T.l2_normalize(b, axis=1))
        det = O.DetectionInputs(T.softmax(z, axis=1), classes, p, target)
        return O.loss_pretrain(batch, det)

    return [fv, fl, logits, pred], fn


def _build_distill(rng):
    teacher = rng.normal(size=(3, 5)) * 2
    student = _t(rng.normal(size=(3, 5)))
    tau = float(rng.uniform(0.5, 4.0))
    return [student], lambda s: O.loss_distill(O.LogitPair(teacher, s), tau)


def _build_cross_entropy(rng):
    logits = _t(rng.normal(size=(4, 5)))
    targets = rng.integers(0, 5, size=4)
    return [logits], lambda z: O.cross_entropy(z, targets)


def _build_embedding(rng):
    table = _t(rng.normal(size=(6, 3)))
    ids = rng.integers(0, 6, size=(2, 4))
    red = _weighted(rng, (2, 4, 3))
    return [table], lambda t: red(T.embedding(t, ids))


def _build_concat(rng):
    a, b = _t(rng.normal(size=(2, 3))), _t(rng.normal(size=(4, 3)))
    red = _weighted(rng, (6, 3))
    return [a, b], lambda x, y: red(T.concat([x, y], axis=0))


def _build_stack(rng):
    a, b = _t(rng.normal(size=(2, 3))), _t(rng.normal(size=(2, 3)))
    red = _weighted(rng, (2, 2, 3))
    return [a, b], lambda x, y: red(T.stack([x, y], axis=1))


def _build_getitem(rng):
    x = _t(rng.normal(size=(4, 3)))
    rows = rng.integers(0, 4, size=5)  # repeats exercise accumulation
    red = _weighted(rng, (5, 3))
    return [x], lambda a: red(T.getitem(a, rows))


CASES: dict[str, Builder] = {
    "add": _binary(T.add, shape_b=(4,)),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul, shape_b=(3, 1)),
    "div": _binary(T.div, sample_b=lambda r: r.uniform(0.5, 2.0, size=(3, 4)) * r.choice([-1, 1], size=(3, 4))),
    "scalar_mul": _unary(lambda x: T.scalar_mul(x, 2.5)),
    "neg": _unary(lambda x: -x),
    "exp": _unary(T.exp),
    "log": _unary(T.log, sample=lambda r: r.uniform(0.2, 3.0, size=(3, 4))),
    "relu": _unary(T.relu, sample=lambda r: _away(r, (3, 4))),
    "power": _unary(lambda x: T.power(x, 3.0)),
    "power_frac": _unary(lambda x: T.power(x, 0.5), sample=lambda r: r.uniform(0.2, 3.0, size=(3, 4))),
    "maximum": _binary(T.maximum, sample_b=lambda r: r.normal(size=(3, 4)) + 0.3),
    "minimum": _binary(T.minimum, sample_b=lambda r: r.normal(size=(3, 4)) - 0.3),
    "matmul": _build_matmul,
    "transpose": _unary(lambda x: T.transpose(x)),
    "reshape": _unary(lambda x: T.reshape(x, (2, 6))),
    "concat": _build_concat,
    "stack": _build_stack,
    "getitem": _build_getitem,
    "embedding": _build_embedding,
    "sum": _unary(lambda x: T.sum_(x, axis=1)),
    "mean": _unary(lambda x: T.mean(x, axis=0)),
    "max": _unary(lambda x: T.max_(x, axis=1), sample=lambda r: _distinct(r, (3, 4))),
    "softmax": _unary(lambda x: T.softmax(x, axis=1)),
    "log_softmax": _unary(lambda x: T.log_softmax(x, axis=1)),
    "l2_normalize": _unary(lambda x: T.l2_normalize(x, axis=1)),
    "conv2d": _build_conv,
    "region_pool": _build_region_pool,
    "cross_attend": _build_cross_attend,
    "layer_norm": _build_layer_norm,
    "self_attention": _build_self_attention,
    "interaction": _build_interaction,
    "cross_entropy": _build_cross_entropy,
    "focal_loss": _build_focal,
    "box_l2": _build_box(0),
    "box_giou": _build_box(1),
    "loss_i2t": _contrastive(O.loss_i2t),
    "loss_t2i": _contrastive(O.loss_t2i),
    "loss_contrastive": _contrastive(O.loss_contrastive),
    "loss_pretrain": _build_pretrain,
    "loss_distill": _build_distill,
}


def _corrupted(x: Tensor) -> Tensor:
    """Identity whose backward scales the gradient by 1.5 (negative control)."""

    def backward(g):
        return (1.5 * g,)

    return T.make_op(x.data.copy(), [x], backward, "corrupted")


@dataclass
class SweepReport:
    max_rel_err: dict[str, float] = field(default_factory=dict)
    instances: dict[str, int] = field(default_factory=dict)
    threshold: float = 1e-4

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.max_rel_err.items() if not v < self.threshold]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = []
        for name, err in self.max_rel_err.items():
            mark = "PASS" if err < self.threshold else "FAIL"
            out.append(f"{mark} {name:<18} max_rel_err={err:.3e} instances={self.instances[name]}")
        return out


def run_sweep(
    rng: np.random.Generator,
    instances: int = 100,
    eps: float = 1e-6,
    threshold: float = 1e-4,
    only: Optional[list[str]] = None,
    corrupt: str = "",
) -> SweepReport:
    report = SweepReport(threshold=threshold)
    names = only if only is not None else list(CASES)
    for name in names:
        worst = 0.0
        for _ in range(instances):
            inputs, fn = CASES[name](rng)
            if name == corrupt:
                inner = fn
                fn = lambda *xs, _f=inner: _f(*(_corrupted(x) for x in xs))  # noqa: E731
            err = check_gradients(fn, inputs, eps)
            worst = max(worst, err) if not math.isnan(err) else math.inf
        report.max_rel_err[name] = worst
        report.instances[name] = instances
    return report
