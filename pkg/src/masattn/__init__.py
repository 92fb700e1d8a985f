"""Segment-masked attention (MAS) for decoder-only transformers.

Prompt tokens may attend to every token of their own prompt segment, including
later ones; generated tokens stay causal. The package holds the mask algebra,
a small RoPE/SwiGLU transformer with LoRA adapters, a two-phase KV-cache engine,
the fine-tuning loop, synthetic chat data and an attention-head atlas.
"""

from .errors import MasError
from .masking import SENTINEL, AttnMask, SegmentedTokens, build_mask
from .model import ModelConfig, ModelWeights, forward, init_weights, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "MasError", "SENTINEL", "AttnMask", "SegmentedTokens", "build_mask",
    "ModelConfig", "ModelWeights", "forward", "init_weights", "load_model", "save_model",
]
