from .attention import (
    CrossModalBlock,
    attention_weights,
    cross_attend,
    cross_attend_l_to_v,
    cross_attend_v_to_l,
)
from .encoders import TextEncoder, visual_encoder
from .interaction import InteractionNetwork, SelfAttention, TransformerLayer, interaction_forward, layer_norm
from .model import ProjectionMLP, VLConfig, VLModel, VLOutputs
from .regions import RegionSet, box_geometry, pool_regions, region_pool
from .segments import SegmentMap, merge_segments, relabel

__all__ = [
    "CrossModalBlock",
    "attention_weights",
    "cross_attend",
    "cross_attend_v_to_l",
    "cross_attend_l_to_v",
    "TextEncoder",
    "visual_encoder",
    "InteractionNetwork",
    "SelfAttention",
    "TransformerLayer",
    "interaction_forward",
    "layer_norm",
    "ProjectionMLP",
    "VLConfig",
    "VLModel",
    "VLOutputs",
    "RegionSet",
    "box_geometry",
    "pool_regions",
    "region_pool",
    "SegmentMap",
    "merge_segments",
    "relabel",
]
