"""Reference text-prompted segmentation model (numpy, hand-written backward)."""

from .config import ModelConfig
from .gradcheck import GradCheckReport, gradient_check
from .network import (
    ForwardResult,
    Params,
    cosine_similarities,
    cross_attention,
    decode_candidate_masks,
    encode_image,
    encode_text,
    feed_forward,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grads,
    project_embeddings,
    save_checkpoint,
    segmentation_loss,
    select_mask,
    self_attention,
)
from .text import Vocabulary, tokenize
from .training import SampleTriple, TrainResult, evaluate_dice, predict_mask, train

__all__ = [
    "ModelConfig",
    "GradCheckReport",
    "gradient_check",
    "ForwardResult",
    "Params",
    "cosine_similarities",
    "cross_attention",
    "decode_candidate_masks",
    "encode_image",
    "encode_text",
    "feed_forward",
    "forward",
    "init_params",
    "load_checkpoint",
    "loss_and_grads",
    "project_embeddings",
    "save_checkpoint",
    "segmentation_loss",
    "select_mask",
    "self_attention",
    "Vocabulary",
    "tokenize",
    "SampleTriple",
    "TrainResult",
    "evaluate_dice",
    "predict_mask",
    "train",
]
