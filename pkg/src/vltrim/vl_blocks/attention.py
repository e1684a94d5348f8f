"""Bi-directional cross-modal attention.

Features are laid out channels × tokens: a visual matrix ``V`` is
``d_v×n_v`` (one column per region or pixel), a text matrix ``T`` is
``d_t×n_t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..errors import DimensionError, EmptyModalityError
from ..tensor import Tensor


@dataclass
class CrossModalBlock:
    """Query/key/value projections onto a shared width ``n_hat``.

    ``w_q`` reads the anchor modality, ``w_k``/``w_v`` read the context.
    """

    w_q: Tensor  # n_hat x d_anchor
    w_k: Tensor  # n_hat x d_context
    w_v: Tensor  # n_hat x d_context

    def __post_init__(self):
        widths = {self.w_q.shape[0], self.w_k.shape[0], self.w_v.shape[0]}
        if len(widths) != 1:
            raise DimensionError(f"projection widths differ: {sorted(widths)}")
        if self.w_k.shape[1] != self.w_v.shape[1]:
            raise DimensionError("key and value projections must read the same context width")

    @property
    def n_hat(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, d_anchor: int, d_context: int, n_hat: int) -> "CrossModalBlock":
        def w(d):
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(n_hat, d)), requires_grad=True)

        return cls(w(d_anchor), w(d_context), w(d_context))

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}w_q": self.w_q, f"{prefix}w_k": self.w_k, f"{prefix}w_v": self.w_v}


def _check(anchor: Tensor, context: Tensor, block: CrossModalBlock) -> None:
    if anchor.ndim != 2 or context.ndim != 2:
        raise DimensionError(f"expected channels×tokens matrices, got {anchor.shape} and {context.shape}")
    if context.shape[1] == 0:
        raise EmptyModalityError("context modality has no tokens")
    if anchor.shape[0] != block.w_q.shape[1]:
        raise DimensionError(f"anchor has {anchor.shape[0]} channels, w_q reads {block.w_q.shape[1]}")
    if context.shape[0] != block.w_k.shape[1]:
        raise DimensionError(f"context has {context.shape[0]} channels, w_k reads {block.w_k.shape[1]}")


def _scores(anchor: Tensor, context: Tensor, block: CrossModalBlock) -> Tensor:
    q = T.matmul(block.w_q, anchor)  # n_hat x n_a
    k = T.matmul(block.w_k, context)  # n_hat x n_c
    return T.scalar_mul(T.matmul(T.transpose(q), k), 1.0 / math.sqrt(block.n_hat))


def attention_weights(anchor, context, block: CrossModalBlock) -> np.ndarray:
    """Row-stochastic ``n_anchor×n_context`` attention matrix."""
    anchor, context = T.as_tensor(anchor), T.as_tensor(context)
    _check(anchor, context, block)
    with T.no_grad():
        return T.softmax(_scores(anchor, context, block), axis=1).data


def cross_attend(anchor, context, block: CrossModalBlock) -> Tensor:
    """softmax((W_q A)ᵀ(W_k C)/√N̂)·(W_v C)ᵀ, one output row per anchor token."""
    anchor, context = T.as_tensor(anchor), T.as_tensor(context)
    _check(anchor, context, block)
    attn = T.softmax(_scores(anchor, context, block), axis=1)
    values = T.matmul(block.w_v, context)  # n_hat x n_c
    return T.matmul(attn, T.transpose(values))


def cross_attend_v_to_l(V, T_text, block: CrossModalBlock) -> Tensor:
    """Visual tokens as anchors attending over text tokens: ``n_v×N̂``."""
    return cross_attend(V, T_text, block)


def cross_attend_l_to_v(T_text, V, block: CrossModalBlock) -> Tensor:
    """Text tokens as anchors attending over visual tokens: ``n_t×N̂``."""
    return cross_attend(T_text, V, block)
