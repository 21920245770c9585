"""
Geometric derivation path: query tokens, the spatial stack, the dense depth
decode head and the masked depth regression loss.
"""
import math
from typing import List, Optional

import numpy as np

from ..errors import EmptyMask, NonSquareTokenGrid, ShapeMismatch
from ..models.config import ModelConfig
from ..numcore import array as ops
from ..numcore.array import Array, constant
from ..numcore.nn import linear, space_to_depth
from ..numcore.params import ParameterStore, conv_init, dense_init
from ..numcore.rng import Rng
from ..utils.tokenizer import PAD_ID
from .attention import GeoState, SemanticState, SpatialTransformer, semantic_layer_for, spatial_block


def token_grid(n_tokens: int) -> int:
    """Side of the square grid holding n_tokens tokens."""
    side = math.isqrt(n_tokens)
    if side * side != n_tokens or side == 0:
        raise NonSquareTokenGrid(f"{n_tokens} geo tokens do not form a square grid")
    return side


class QueryBank:
    """Learnable geo query tokens, trainable in both stages."""

    GROUP = "queries"

    def __init__(self, cfg: ModelConfig, store: ParameterStore, rng: Rng):
        self.queries = store.add(self.GROUP, "tokens", rng.normal((cfg.n_geo_tokens, cfg.d_model), scale=0.5))


class PatchEncoder:
    """Frozen patch embedding of a source image, one feature vector per geo token."""

    GROUP = "image_encoder"

    def __init__(self, cfg: ModelConfig, store: ParameterStore, rng: Rng):
        self.cfg = cfg
        side = token_grid(cfg.n_geo_tokens)
        if cfg.H % side or cfg.W % side:
            raise ShapeMismatch("patch_encoder", (cfg.H, cfg.W), (side, side),
                                detail="image extents not divisible by the token grid")
        self.patch = cfg.H // side
        fan_in = self.patch * self.patch * 3
        self.weight = store.add(self.GROUP, "w", dense_init(rng, fan_in, cfg.d_model))

    def __call__(self, images: np.ndarray) -> Array:
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1:] != (self.cfg.H, self.cfg.W, 3):
            raise ShapeMismatch("patch_encoder", images.shape, (images.shape[0], self.cfg.H, self.cfg.W, 3))
        patches = space_to_depth(constant(images), self.patch)
        b, gh, gw, c = patches.shape
        return linear(ops.reshape(patches, (b, gh * gw, c)), self.weight)


def init_geo_states(
    bank: QueryBank,
    batch: int,
    image: Optional[np.ndarray] = None,
    encoder: Optional[PatchEncoder] = None,
) -> GeoState:
    """
    H_geo^(0): the query tokens, plus patch features of the source image in editing mode.

    Args:
        bank: Query bank
        batch: Batch size B
        image: Optional (B, H, W, 3) source images; t2i rows may be all zeros
        encoder: Patch encoder, required when image is given

    Returns:
        GeoState with hidden (B, G, d_model) and layer_index 0
    """
    q = bank.queries
    hidden = ops.broadcast_to(q, (batch, *q.shape))
    if image is not None:
        if encoder is None:
            raise ValueError("an image was given without a patch encoder")
        if np.asarray(image).shape[0] != batch:
            raise ShapeMismatch("init_geo_states", np.asarray(image).shape, (batch,), detail="batch axis")
        hidden = hidden + encoder(image)
    return GeoState(hidden=hidden, layer_index=0)


def derive_geometry(
    state0: GeoState,
    sem_states: List[SemanticState],
    cfg: ModelConfig,
    spatial: SpatialTransformer,
) -> GeoState:
    """Apply the L spatial blocks; block i reads the semantic layer chosen by cfg.share_strategy."""
    if len(sem_states) != cfg.M:
        raise ShapeMismatch("derive_geometry", (len(sem_states),), (cfg.M,), detail="semantic state count")
    state = state0
    for i in range(1, cfg.L + 1):
        j = semantic_layer_for(i, cfg)
        sem = sem_states[j - 1] if j is not None else None
        state = spatial_block(state, sem, spatial.layer(i), cfg)
    return state


def softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


class DepthHead:
    """
    Simplified dense-prediction head.

    tokens (B, G, d) -> grid (B, g, g, C) -> [2x nearest upsample -> 3x3 conv -> GELU] x 2
    -> 1x1 conv -> softplus -> (B, 4g, 4g) meters.
    """

    GROUP = "depth_head"

    def __init__(self, cfg: ModelConfig, store: ParameterStore, rng: Rng):
        self.cfg = cfg
        c = cfg.head_channels
        g = self.GROUP
        self.w_in = store.add(g, "w_in", dense_init(rng.child("w_in"), cfg.d_model, c))
        self.b_in = store.add(g, "b_in", np.zeros(c))
        self.w_up1 = store.add(g, "w_up1", conv_init(rng.child("w_up1"), 3, 3, c, c))
        self.b_up1 = store.add(g, "b_up1", np.zeros(c))
        self.w_up2 = store.add(g, "w_up2", conv_init(rng.child("w_up2"), 3, 3, c, c))
        self.b_up2 = store.add(g, "b_up2", np.zeros(c))
        self.w_out = store.add(g, "w_out", conv_init(rng.child("w_out"), 1, 1, c, 1))
        self.b_out = store.add(g, "b_out", np.full(1, softplus_inverse(cfg.depth_init)))

    def __call__(self, tokens: Array) -> Array:
        return decode_depth(GeoState(hidden=tokens, layer_index=self.cfg.L), self)


def decode_depth(state: GeoState, head: DepthHead) -> Array:
    """
    Decode geo tokens into a dense, strictly positive depth map.

    Raises:
        NonSquareTokenGrid: token count is not a perfect square
        ShapeMismatch: the upsampled grid does not match (H, W)
    """
    x = state.hidden
    if x.ndim == 2:
        x = ops.reshape(x, (1, *x.shape))
    b, n_tokens, _ = x.shape
    side = token_grid(n_tokens)
    cfg = head.cfg
    if 4 * side != cfg.H or 4 * side != cfg.W:
        raise ShapeMismatch("decode_depth", (4 * side, 4 * side), (cfg.H, cfg.W),
                            detail="head upsamples the token grid 4x")
    y = linear(x, head.w_in, head.b_in)
    y = ops.reshape(y, (b, side, side, y.shape[-1]))
    y = ops.gelu(ops.conv2d(ops.upsample2x(y), head.w_up1, head.b_up1))
    y = ops.gelu(ops.conv2d(ops.upsample2x(y), head.w_up2, head.b_up2))
    y = ops.softplus(ops.conv2d(y, head.w_out, head.b_out))
    return ops.reshape(y, (b, cfg.H, cfg.W))


def depth_loss(pred: Array, gt: np.ndarray, mask: np.ndarray) -> Array:
    """
    Mean absolute depth error over valid pixels.

    Args:
        pred: (..., H, W) predicted depth
        gt: Ground-truth depth of the same shape; values outside the mask are ignored
        mask: Boolean valid-pixel mask of the same shape

    Raises:
        EmptyMask: No valid pixel
    """
    gt = np.asarray(gt)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or gt.shape != mask.shape:
        raise ShapeMismatch("depth_loss", pred.shape, gt.shape, mask.shape)
    count = int(mask.sum())
    if count == 0:
        raise EmptyMask("depth loss over an empty valid mask")
    weights = mask.astype(np.float32)
    target = np.where(mask, gt, 0.0)
    diff = ops.abs_((pred - target) * weights)
    return ops.sum_(diff) * (1.0 / count)


class ProbeHead:
    """Linear probe from pooled final semantic states onto the geo token grid."""

    GROUP = "probe"

    def __init__(self, cfg: ModelConfig, store: ParameterStore, rng: Rng):
        self.w = store.add(self.GROUP, "w", dense_init(rng.child("w"), cfg.d_model, cfg.d_model))
        self.pos = store.add(self.GROUP, "pos", rng.child("pos").normal((cfg.n_geo_tokens, cfg.d_model), scale=0.5))


def probe_baseline(sem_states: List[SemanticState], probe: ProbeHead, head: DepthHead) -> Array:
    """Depth from H_sem^(M) alone: mean-pool over non-pad tokens, project, add a positional grid, decode."""
    last = sem_states[-1]
    final = last.hidden
    keep = (np.asarray(last.tokens).reshape(final.shape[:-1]) != PAD_ID).astype(np.float32)
    count = np.maximum(keep.sum(axis=-1, keepdims=True), 1.0)
    weights = constant((keep / count)[..., None])
    pooled = ops.sum_(final * weights, axis=-2, keepdims=True)
    tokens = linear(pooled, probe.w) + probe.pos
    return decode_depth(GeoState(hidden=tokens, layer_index=0), head)
