"""The region-text model assembled from the blocks in this package."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..graph import Linear, ModelGraph, linear_layer
from ..tensor import Tensor
from .attention import CrossModalBlock, cross_attend_l_to_v, cross_attend_v_to_l
from .encoders import TextEncoder, visual_encoder
from .interaction import InteractionNetwork, interaction_forward
from .regions import RegionSet, box_geometry, region_pool

GEOMETRY_ROWS = 4


@dataclass
class VLConfig:
    image_size: int = 32
    conv_widths: tuple[int, ...] = (16, 32)
    d_text: int = 32
    n_hat: int = 32
    embed_dim: int = 32
    depth: int = 1
    vocab_size: int = 16
    caption_len: int = 4
    n_region_classes: int = 24
    det_hidden: int = 64
    max_regions: int = 8

    @property
    def d_region(self) -> int:
        return self.conv_widths[-1] + GEOMETRY_ROWS


@dataclass
class ProjectionMLP:
    """One hidden layer of width ``2·N̂`` with relu."""

    hidden: Linear
    out: Linear

    @classmethod
    def init(cls, rng, d_in: int, n_hat: int) -> "ProjectionMLP":
        return cls(linear_layer(rng, d_in, 2 * n_hat), linear_layer(rng, 2 * n_hat, n_hat))

    def forward(self, x: Tensor) -> Tensor:
        return self.out.forward(T.relu(self.hidden.forward(x)))

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            f"{prefix}hidden.weight": self.hidden.weight,
            f"{prefix}hidden.bias": self.hidden.bias,
            f"{prefix}out.weight": self.out.weight,
            f"{prefix}out.bias": self.out.bias,
        }


@dataclass
class VLOutputs:
    f_v: Tensor  # regions x embed, unit rows
    f_l: Tensor  # captions x embed, unit rows
    class_probs: Tensor  # regions x n_region_classes
    pred_boxes: Tensor  # regions x 4, normalized image coordinates
    scene_of: np.ndarray  # scene index of each row


class VLModel:
    def __init__(self, cfg: VLConfig, rng: np.random.Generator):
        self.cfg = cfg
        s = cfg.image_size
        self.visual: ModelGraph = visual_encoder(rng, cfg.conv_widths, (3, s, s))
        self.text = TextEncoder.init(rng, cfg.vocab_size, cfg.caption_len, cfg.d_text)
        self.block_v2l = CrossModalBlock.init(rng, cfg.d_region, cfg.d_text, cfg.n_hat)
        self.block_l2v = CrossModalBlock.init(rng, cfg.d_text, cfg.d_region, cfg.n_hat)
        self.mlp_v = ProjectionMLP.init(rng, cfg.d_region, cfg.n_hat)
        self.mlp_l = ProjectionMLP.init(rng, cfg.d_text, cfg.n_hat)
        self.net = InteractionNetwork.init(rng, cfg.n_hat, cfg.embed_dim, cfg.depth)
        self.det_hidden = linear_layer(rng, cfg.d_region, cfg.det_hidden)
        self.det_cls = linear_layer(rng, cfg.det_hidden, cfg.n_region_classes)
        self.det_box = linear_layer(rng, cfg.det_hidden, 4)
        self.det_box.weight.data *= 0.01

    def parameters(self) -> dict[str, Tensor]:
        params = {f"visual.{k}": v for k, v in self.visual.parameters().items()}
        params.update(self.text.parameters("text."))
        params.update(self.block_v2l.parameters("v2l."))
        params.update(self.block_l2v.parameters("l2v."))
        params.update(self.mlp_v.parameters("mlp_v."))
        params.update(self.mlp_l.parameters("mlp_l."))
        params.update(self.net.parameters("net."))
        for name, lin in (("det_hidden", self.det_hidden), ("det_cls", self.det_cls), ("det_box", self.det_box)):
            params[f"{name}.weight"] = lin.weight
            params[f"{name}.bias"] = lin.bias
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.parameters().items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def forward(self, images: np.ndarray, proposals: Sequence[np.ndarray], captions: Sequence[np.ndarray]) -> VLOutputs:
        """Encode a batch of scenes.

        ``proposals[i]`` are pixel boxes of scene ``i``; ``captions[i]`` the
        token ids of the captions in the same scene. Attention never crosses
        scene boundaries.
        """
        cfg = self.cfg
        size = cfg.image_size
        feats = self.visual.forward(Tensor(images))
        counts = [len(c) for c in captions]
        text = self.text.forward(np.concatenate(list(captions)))  # d_t x sum(n)
        f_vs, f_ls, regions_all, scene_of = [], [], [], []
        start = 0
        for i, (boxes, n_cap) in enumerate(zip(proposals, counts)):
            fmap = T.getitem(feats, i)
            pooled = region_pool(fmap, RegionSet.from_boxes(boxes, size, size, cfg.max_regions))
            region = T.concat([pooled, Tensor(box_geometry(boxes, size, size))], axis=0)
            txt = T.getitem(text, (slice(None), slice(start, start + n_cap)))
            start += n_cap
            x_v = self.mlp_v.forward(T.transpose(region)) + cross_attend_v_to_l(region, txt, self.block_v2l)
            x_l = self.mlp_l.forward(T.transpose(txt)) + cross_attend_l_to_v(txt, region, self.block_l2v)
            f_v, f_l = interaction_forward(x_v, x_l, self.net)
            f_vs.append(f_v)
            f_ls.append(f_l)
            regions_all.append(T.transpose(region))
            scene_of.extend([i] * len(boxes))
        region_rows = T.concat(regions_all, axis=0)
        hidden = T.relu(self.det_hidden.forward(region_rows))
        probs = T.softmax(self.det_cls.forward(hidden), axis=1)
        props = np.concatenate([np.asarray(p, dtype=float) for p in proposals]) / size
        extent = np.concatenate([props[:, 2:] - props[:, :2]] * 2, axis=1)
        pred_boxes = T.add(Tensor(props), T.mul(self.det_box.forward(hidden), Tensor(extent)))
        return VLOutputs(T.concat(f_vs, axis=0), T.concat(f_ls, axis=0), probs, pred_boxes, np.array(scene_of))
