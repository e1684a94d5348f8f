"""Transformer layers that fuse the two cross-attended streams."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import tensor as T
from ..errors import DimensionError
from ..graph import Linear, linear_layer
from ..tensor import Tensor


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = T.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = T.mean(centered * centered, axis=-1, keepdims=True)
    return centered * T.power(var + eps, -0.5) * gain + bias


def _square(rng, width: int) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(width), size=(width, width)), requires_grad=True)


@dataclass
class SelfAttention:
    """Single-head self-attention over rows, residual + layer norm."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln_gain: Tensor
    ln_bias: Tensor

    @classmethod
    def init(cls, rng, width: int) -> "SelfAttention":
        return cls(
            _square(rng, width),
            _square(rng, width),
            _square(rng, width),
            _square(rng, width),
            Tensor(np.ones(width), requires_grad=True),
            Tensor(np.zeros(width), requires_grad=True),
        )

    @property
    def width(self) -> int:
        return self.w_q.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        """``x`` is ``n×width`` or batched ``b×n×width``."""
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, self.width))
        q = T.reshape(T.matmul(flat, self.w_q), x.shape)
        k = T.reshape(T.matmul(flat, self.w_k), x.shape)
        v = T.reshape(T.matmul(flat, self.w_v), x.shape)
        kt = T.transpose(k, tuple(range(len(lead) - 1)) + (x.ndim - 1, x.ndim - 2))
        attn = T.softmax(T.scalar_mul(T.matmul(q, kt), 1.0 / math.sqrt(self.width)), axis=-1)
        mixed = T.reshape(T.matmul(T.reshape(T.matmul(attn, v), (-1, self.width)), self.w_o), x.shape)
        return layer_norm(x + mixed, self.ln_gain, self.ln_bias)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            f"{prefix}w_q": self.w_q,
            f"{prefix}w_k": self.w_k,
            f"{prefix}w_v": self.w_v,
            f"{prefix}w_o": self.w_o,
            f"{prefix}ln_gain": self.ln_gain,
            f"{prefix}ln_bias": self.ln_bias,
        }


@dataclass
class TransformerLayer:
    attn: SelfAttention
    ff1: Linear
    ff2: Linear
    ln_gain: Tensor
    ln_bias: Tensor

    @classmethod
    def init(cls, rng, width: int, hidden: Optional[int] = None) -> "TransformerLayer":
        hidden = hidden or 2 * width
        return cls(
            SelfAttention.init(rng, width),
            linear_layer(rng, width, hidden),
            linear_layer(rng, hidden, width),
            Tensor(np.ones(width), requires_grad=True),
            Tensor(np.zeros(width), requires_grad=True),
        )

    def forward(self, x: Tensor) -> Tensor:
        x = self.attn.forward(x)
        ff = self.ff2.forward(T.relu(self.ff1.forward(x)))
        return layer_norm(x + ff, self.ln_gain, self.ln_bias)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params = self.attn.parameters(f"{prefix}attn.")
        for name, lin in (("ff1", self.ff1), ("ff2", self.ff2)):
            params[f"{prefix}{name}.weight"] = lin.weight
            params[f"{prefix}{name}.bias"] = lin.bias
        params[f"{prefix}ln_gain"] = self.ln_gain
        params[f"{prefix}ln_bias"] = self.ln_bias
        return params


@dataclass
class InteractionNetwork:
    """Transformer layers over the joint token set, then per-modality heads."""

    width: int
    layers: list[TransformerLayer] = field(default_factory=list)
    head_v: Optional[Linear] = None
    head_l: Optional[Linear] = None

    @classmethod
    def init(cls, rng, width: int, embed_dim: int, depth: int = 1) -> "InteractionNetwork":
        return cls(
            width,
            [TransformerLayer.init(rng, width) for _ in range(depth)],
            linear_layer(rng, width, embed_dim),
            linear_layer(rng, width, embed_dim),
        )

    @classmethod
    def identity(cls, width: int) -> "InteractionNetwork":
        return cls(width)

    @property
    def embed_dim(self) -> int:
        return self.head_v.out_channels if self.head_v is not None else self.width

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            params.update(layer.parameters(f"{prefix}layer{i}."))
        for name, head in (("head_v", self.head_v), ("head_l", self.head_l)):
            if head is not None:
                params[f"{prefix}{name}.weight"] = head.weight
                params[f"{prefix}{name}.bias"] = head.bias
        return params


def interaction_forward(f_v2l, f_l2v, net: InteractionNetwork) -> tuple[Tensor, Tensor]:
    """Fuse ``n_v×N̂`` and ``n_t×N̂`` streams into unit-norm ``(F_V, F_L)``."""
    f_v2l, f_l2v = T.as_tensor(f_v2l), T.as_tensor(f_l2v)
    if f_v2l.ndim != 2 or f_l2v.ndim != 2 or f_v2l.shape[1] != net.width or f_l2v.shape[1] != net.width:
        raise DimensionError(
            f"interaction expects n×{net.width} inputs, got {f_v2l.shape} and {f_l2v.shape}"
        )
    n_v = f_v2l.shape[0]
    x = T.concat([f_v2l, f_l2v], axis=0)
    for layer in net.layers:
        x = layer.forward(x)
    x_v = T.getitem(x, slice(0, n_v))
    x_l = T.getitem(x, slice(n_v, None))
    if net.head_v is not None:
        x_v = net.head_v.forward(x_v)
    if net.head_l is not None:
        x_l = net.head_l.forward(x_l)
    return T.l2_normalize(x_v, axis=1), T.l2_normalize(x_l, axis=1)
