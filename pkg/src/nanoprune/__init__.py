"""Desk-scale compression lab for hybrid Mamba/attention/FFN language models."""

from .config import LayerKind, ModelConfig, build_layer_pattern, nano12b_config
from .model import Checkpoint, count_params, init_checkpoint, logits, model_forward

__all__ = ["Checkpoint", "LayerKind", "ModelConfig", "build_layer_pattern", "count_params",
           "init_checkpoint", "logits", "model_forward", "nano12b_config"]
__version__ = "0.1.0"
