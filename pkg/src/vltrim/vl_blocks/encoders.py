"""Toy visual and text encoders."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..graph import ModelGraph, ReLU, conv_layer
from ..tensor import Tensor
from .interaction import SelfAttention


def visual_encoder(rng, widths=(16, 32), input_shape=(3, 32, 32)) -> ModelGraph:
    """Conv-relu stack producing a ``d_v×H×W`` feature map per image."""
    layers = []
    c = input_shape[0]
    for i, w in enumerate(widths, start=1):
        layers.append((f"conv{i}", conv_layer(rng, c, w)))
        layers.append((f"relu{i}", ReLU()))
        c = w
    return ModelGraph(layers, input_shape)


@dataclass
class TextEncoder:
    """Token + position embeddings, one self-attention layer, mean over tokens."""

    tokens: Tensor  # vocab x d
    positions: Tensor  # caption_len x d
    attn: SelfAttention

    @classmethod
    def init(cls, rng, vocab_size: int, caption_len: int, width: int) -> "TextEncoder":
        return cls(
            Tensor(rng.normal(0.0, 1.0, size=(vocab_size, width)), requires_grad=True),
            Tensor(rng.normal(0.0, 0.5, size=(caption_len, width)), requires_grad=True),
            SelfAttention.init(rng, width),
        )

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    def forward(self, captions) -> Tensor:
        """``n×L`` token ids to ``d×n`` caption features (columns = captions)."""
        ids = np.asarray(captions, dtype=np.int64)
        x = T.embedding(self.tokens, ids) + self.positions  # n x L x d
        x = self.attn.forward(x)
        return T.transpose(T.mean(x, axis=1))

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params = {f"{prefix}tokens": self.tokens, f"{prefix}positions": self.positions}
        params.update(self.attn.parameters(f"{prefix}attn."))
        return params
