"""
Layer helpers built from tape primitives.
"""
import math
from typing import Optional, Tuple

import numpy as np

from ..errors import ShapeMismatch
from . import array as ops
from .array import Array


def linear(x: Array, w: Array, b: Optional[Array] = None) -> Array:
    out = ops.matmul(x, w)
    return out if b is None else out + b


def feed_forward(x: Array, w1: Array, b1: Array, w2: Array, b2: Array) -> Array:
    return linear(ops.gelu(linear(x, w1, b1)), w2, b2)


def split_heads(x: Array, n_heads: int) -> Array:
    """(..., S, d) -> (..., heads, S, d / heads)."""
    *lead, seq, d = x.shape
    if d % n_heads:
        raise ShapeMismatch("split_heads", x.shape, detail=f"{d} not divisible by {n_heads} heads")
    y = ops.reshape(x, (*lead, seq, n_heads, d // n_heads))
    n = len(lead)
    return ops.transpose(y, (*range(n), n + 1, n, n + 2))


def merge_heads(x: Array) -> Array:
    """(..., heads, S, dh) -> (..., S, heads * dh)."""
    *lead, heads, seq, dh = x.shape
    n = len(lead)
    y = ops.transpose(x, (*range(n), n + 1, n, n + 2))
    return ops.reshape(y, (*lead, seq, heads * dh))


def causal_mask(seq: int) -> np.ndarray:
    return np.triu(np.full((seq, seq), -1e9, dtype=np.float32), k=1)


def attention(
    q: Array, k: Array, v: Array, d_head: int, mask: Optional[np.ndarray] = None
) -> Tuple[Array, Array]:
    """Scaled dot-product attention over the second-to-last axis; returns (output, weights)."""
    scores = ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d_head))
    if mask is not None:
        scores = scores + mask
    weights = ops.softmax(scores, axis=-1)
    return ops.matmul(weights, v), weights


def space_to_depth(x: Array, block: int) -> Array:
    """(B, H, W, C) -> (B, H/block, W/block, block*block*C)."""
    b, h, w, c = x.shape
    if h % block or w % block:
        raise ShapeMismatch("space_to_depth", x.shape, detail=f"extents not divisible by {block}")
    y = ops.reshape(x, (b, h // block, block, w // block, block, c))
    y = ops.transpose(y, (0, 1, 3, 2, 4, 5))
    return ops.reshape(y, (b, h // block, w // block, block * block * c))


def depth_to_space(x: Array, block: int) -> Array:
    """Inverse of space_to_depth."""
    b, h, w, c = x.shape
    if c % (block * block):
        raise ShapeMismatch("depth_to_space", x.shape, detail=f"channels not divisible by {block * block}")
    out_c = c // (block * block)
    y = ops.reshape(x, (b, h, w, block, block, out_c))
    y = ops.transpose(y, (0, 1, 3, 2, 4, 5))
    return ops.reshape(y, (b, h * block, w * block, out_c))


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Transformer-style sin/cos features of integer timesteps; (B,) -> (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = t * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(np.float32)
