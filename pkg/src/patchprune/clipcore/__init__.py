"""Dual encoder with mid-network token removal, pretraining, persistence."""

from .model import (
    ClassEmbeddings,
    ClipWeights,
    EncodeResult,
    RemovalContext,
    RemovalStep,
    TextConfig,
    VisionConfig,
    cls_attention_scores,
    embed_image_tokens,
    encode_cls_batch,
    encode_image,
    encode_text,
    finalize_vision,
    init_weights,
    run_vision_blocks,
    zero_shot_logits,
    zero_shot_probs,
)
from .persist import load_weights, save_weights
from .pretrain import (
    PretrainResult,
    initial_loss,
    pretrain_contrastive,
    split_to_tokens,
    zero_shot_accuracy,
)

__all__ = [
    "VisionConfig",
    "TextConfig",
    "ClipWeights",
    "EncodeResult",
    "ClassEmbeddings",
    "RemovalStep",
    "RemovalContext",
    "init_weights",
    "embed_image_tokens",
    "run_vision_blocks",
    "finalize_vision",
    "encode_image",
    "encode_cls_batch",
    "encode_text",
    "zero_shot_logits",
    "zero_shot_probs",
    "cls_attention_scores",
    "save_weights",
    "load_weights",
    "PretrainResult",
    "pretrain_contrastive",
    "initial_loss",
    "split_to_tokens",
    "zero_shot_accuracy",
]
