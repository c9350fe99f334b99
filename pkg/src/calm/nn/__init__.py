"""Numerical core: gradient utilities, layers and checkpoint I/O."""

from calm.nn.core import (
    Dual,
    NumericsError,
    backward,
    jvp,
    seed_all,
    single_thread,
)
from calm.nn.layers import (
    CacheError,
    CausalSelfAttention,
    FourierTimeEmbedding,
    GatedMLP,
    KVCache,
    TransformerBlock,
    causal_attention,
)
from calm.nn.checkpoint import CheckpointError, load_tensors, save_tensors

__all__ = [
    "Dual",
    "NumericsError",
    "backward",
    "jvp",
    "seed_all",
    "single_thread",
    "CacheError",
    "CausalSelfAttention",
    "FourierTimeEmbedding",
    "GatedMLP",
    "KVCache",
    "TransformerBlock",
    "causal_attention",
    "CheckpointError",
    "load_tensors",
    "save_tensors",
]
