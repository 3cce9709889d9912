from .config import ModelConfig
from .layers import (
    gini,
    hstu_block_backward,
    hstu_block_forward,
    item_dnn_backward,
    item_dnn_forward,
    moe_backward,
    moe_forward,
)
from .network import (
    EncodeCache,
    ItemFeatureBank,
    MoEStats,
    SequenceModel,
    decode_sid1_logits,
    decode_sid2_logits,
    encode_sequence,
)
from .params import (
    Parameters,
    count_params,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
    tensor_shapes,
)

__all__ = [
    "ModelConfig",
    "Parameters",
    "ItemFeatureBank",
    "SequenceModel",
    "EncodeCache",
    "MoEStats",
    "encode_sequence",
    "decode_sid1_logits",
    "decode_sid2_logits",
    "item_dnn_forward",
    "item_dnn_backward",
    "hstu_block_forward",
    "hstu_block_backward",
    "moe_forward",
    "moe_backward",
    "gini",
    "init_parameters",
    "count_params",
    "tensor_shapes",
    "save_checkpoint",
    "load_checkpoint",
]
