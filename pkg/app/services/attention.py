"""
Semantic and spatial transformer pathways and the shared attention between them.

The semantic pathway is a small causal decoder over prompt tokens. The spatial
pathway is a stack of L blocks whose queries attend over the concatenation of
a semantic layer's keys/values and their own, so geometry can read semantics
while each side keeps its own projection weights.
"""
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..errors import EmptyKeySet, InvalidLayerIndex, ShapeMismatch, UnknownToken
from ..models.config import ModelConfig
from ..numcore import array as ops
from ..numcore.array import Array, constant
from ..numcore.nn import attention, causal_mask, feed_forward, linear, merge_heads, split_heads
from ..numcore.params import ParameterStore, dense_init
from ..numcore.rng import Rng


@dataclass
class SemanticState:
    """Output of semantic layer j, with the keys/values that layer attended with"""
    tokens: np.ndarray  # (B, S)
    hidden: Array  # (B, S, d_model)
    layer_index: int
    keys: Optional[Array] = None  # (B, heads, S, d_head)
    values: Optional[Array] = None


@dataclass
class GeoState:
    """Geometric hidden state after spatial layer i"""
    hidden: Array  # (B, G, d_model)
    layer_index: int


# Layer pairing

def layer_map(i: int, M: int, L: int) -> int:
    """Semantic layer shared with spatial layer i under uniform sampling: floor(i * M / L)."""
    if M <= L:
        raise InvalidLayerIndex(f"layer map needs M > L, got M={M}, L={L}")
    if not 1 <= i <= L:
        raise InvalidLayerIndex(f"spatial layer {i} outside [1, {L}]")
    return (i * M) // L


def semantic_layer_for(i: int, cfg: ModelConfig) -> Optional[int]:
    """Semantic layer read by spatial layer i under cfg.share_strategy; None means no sharing."""
    if not 1 <= i <= cfg.L:
        raise InvalidLayerIndex(f"spatial layer {i} outside [1, {cfg.L}]")
    strategy = cfg.share_strategy
    if strategy == "none":
        return None
    if strategy == "uniform":
        return layer_map(i, cfg.M, cfg.L)
    if strategy == "shallow":
        return i
    if strategy == "deep":
        return cfg.M - cfg.L + i
    raise InvalidLayerIndex(f"unknown share strategy '{strategy}'")


def touched_layers(cfg: ModelConfig) -> List[int]:
    layers = [semantic_layer_for(i, cfg) for i in range(1, cfg.L + 1)]
    return [j for j in layers if j is not None]


# Projections and shared attention

def _project(hidden: Array, w: Array, b: Optional[Array], n_heads: int) -> Array:
    if hidden.shape[-1] != w.shape[0]:
        raise ShapeMismatch("qkv projection", hidden.shape, w.shape)
    return split_heads(linear(hidden, w, b), n_heads)


def project_qkv_geo(hidden: Array, params: Mapping[str, Array], n_heads: int) -> Tuple[Array, Array, Array]:
    """Geometry-specific Q, K, V of (..., G, d) hidden states, each (..., heads, G, d_head)."""
    return tuple(
        _project(hidden, params[f"w_{k}"], params[f"b_{k}"], n_heads) for k in ("q", "k", "v")
    )


def project_qkv_sem(hidden: Array, params: Mapping[str, Array], n_heads: int) -> Tuple[Array, Array, Array]:
    """Semantic-specific Q, K, V (bias-free), each (..., heads, S, d_head)."""
    return tuple(_project(hidden, params[f"w_{k}"], None, n_heads) for k in ("q", "k", "v"))


def shared_attention(
    q_geo: Array,
    k_sem: Optional[Array],
    v_sem: Optional[Array],
    k_geo: Array,
    v_geo: Array,
    d_head: int,
    return_weights: bool = False,
):
    """
    Geo queries attend over the concatenated key/value sequence [semantic, geo].

    Args:
        q_geo, k_geo, v_geo: (..., heads, G, d_head)
        k_sem, v_sem: (..., heads, S, d_head), or None for an empty semantic context
        d_head: Per-head width; scores are scaled by 1/sqrt(d_head)

    Returns:
        (..., G, heads * d_head), plus the attention weights when requested
    """
    if k_sem is None or v_sem is None:
        empty = np.zeros((*k_geo.shape[:-2], 0, k_geo.shape[-1]), dtype=np.float32)
        k_sem = v_sem = constant(empty)
    if k_sem.shape[-2] != v_sem.shape[-2] or k_geo.shape[-2] != v_geo.shape[-2]:
        raise ShapeMismatch("shared_attention", k_sem.shape, v_sem.shape, k_geo.shape, v_geo.shape,
                            detail="key/value sequence lengths differ")
    if k_sem.shape[:-2] != k_geo.shape[:-2] or k_sem.shape[-1] != k_geo.shape[-1]:
        raise ShapeMismatch("shared_attention", k_sem.shape, k_geo.shape)
    if q_geo.shape[:-2] != k_geo.shape[:-2] or q_geo.shape[-1] != k_geo.shape[-1]:
        raise ShapeMismatch("shared_attention", q_geo.shape, k_geo.shape)
    if k_sem.shape[-2] + k_geo.shape[-2] == 0:
        raise EmptyKeySet("shared attention over an empty key set")
    keys = ops.concat([k_sem, k_geo], axis=-2)
    values = ops.concat([v_sem, v_geo], axis=-2)
    out, weights = attention(q_geo, keys, values, d_head)
    merged = merge_heads(out)
    return (merged, weights) if return_weights else merged


def spatial_block(
    geo: GeoState,
    sem: Optional[SemanticState],
    params: Mapping[str, Array],
    cfg: ModelConfig,
) -> GeoState:
    """
    One spatial layer: shared attention, output projection, FFN, post-norm residuals.

    `sem` is None when the block shares nothing; semantic tensors are only read.
    """
    x = geo.hidden
    q, k, v = project_qkv_geo(x, params, cfg.n_heads)
    k_sem = sem.keys if sem is not None else None
    v_sem = sem.values if sem is not None else None
    attn = shared_attention(q, k_sem, v_sem, k, v, cfg.d_head)
    x = ops.layer_norm(x + linear(attn, params["w_o"], params["b_o"]), params["ln1_g"], params["ln1_b"])
    ffn = feed_forward(x, params["w_ff1"], params["b_ff1"], params["w_ff2"], params["b_ff2"])
    x = ops.layer_norm(x + ffn, params["ln2_g"], params["ln2_b"])
    return GeoState(hidden=x, layer_index=geo.layer_index + 1)


# Parameter registration

def register_block(store: ParameterStore, group: str, prefix: str, d: int, ffn: int, rng: Rng,
                    qkv_bias: bool) -> None:
    for k in ("q", "k", "v"):
        store.add(group, f"{prefix}.w_{k}", dense_init(rng.child(f"{prefix}.w_{k}"), d, d))
        if qkv_bias:
            store.add(group, f"{prefix}.b_{k}", np.zeros(d))
    store.add(group, f"{prefix}.w_o", dense_init(rng.child(f"{prefix}.w_o"), d, d))
    store.add(group, f"{prefix}.b_o", np.zeros(d))
    store.add(group, f"{prefix}.ln1_g", np.ones(d))
    store.add(group, f"{prefix}.ln1_b", np.zeros(d))
    store.add(group, f"{prefix}.w_ff1", dense_init(rng.child(f"{prefix}.w_ff1"), d, ffn))
    store.add(group, f"{prefix}.b_ff1", np.zeros(ffn))
    store.add(group, f"{prefix}.w_ff2", dense_init(rng.child(f"{prefix}.w_ff2"), ffn, d))
    store.add(group, f"{prefix}.b_ff2", np.zeros(d))
    store.add(group, f"{prefix}.ln2_g", np.ones(d))
    store.add(group, f"{prefix}.ln2_b", np.zeros(d))


def block_params(store: ParameterStore, group: str, prefix: str) -> Dict[str, Array]:
    head = f"{group}.{prefix}."
    return {name[len(head):]: p for name, p in store.group(group).items() if name.startswith(head)}


def prenorm_block(x: Array, params: Mapping[str, Array], n_heads: int, d_head: int,
                  mask: Optional[np.ndarray] = None, qkv_bias: bool = True):
    """Pre-norm self-attention block; returns (output, keys, values)."""
    xn = ops.layer_norm(x, params["ln1_g"], params["ln1_b"])
    if qkv_bias:
        q, k, v = project_qkv_geo(xn, params, n_heads)
    else:
        q, k, v = project_qkv_sem(xn, params, n_heads)
    out, _ = attention(q, k, v, d_head, mask)
    x = x + linear(merge_heads(out), params["w_o"], params["b_o"])
    xn = ops.layer_norm(x, params["ln2_g"], params["ln2_b"])
    x = x + feed_forward(xn, params["w_ff1"], params["b_ff1"], params["w_ff2"], params["b_ff2"])
    return x, k, v


class SemanticTransformer:
    """Causal decoder over scene prompts; frozen after its language-model pre-fit."""

    GROUP = "semantic"

    def __init__(self, cfg: ModelConfig, store: ParameterStore, rng: Rng):
        self.cfg = cfg
        self.store = store
        d = cfg.d_model
        store.add(self.GROUP, "tok_emb", rng.child("tok_emb").normal((cfg.vocab_size, d), scale=0.5))
        store.add(self.GROUP, "pos_emb", rng.child("pos_emb").normal((cfg.max_prompt_len, d), scale=0.1))
        for j in range(1, cfg.M + 1):
            register_block(store, self.GROUP, f"l{j}", d, cfg.ffn_mult * d, rng.child(f"l{j}"), qkv_bias=False)
        store.add(self.GROUP, "lnf_g", np.ones(d))
        store.add(self.GROUP, "lnf_b", np.zeros(d))

    def layer(self, j: int) -> Dict[str, Array]:
        return block_params(self.store, self.GROUP, f"l{j}")

    def forward(self, tokens: np.ndarray) -> List[SemanticState]:
        """
        Run the decoder over (B, S) token ids.

        Returns:
            States for layers 1..M; state j carries layer j's output and the
            keys/values layer j attended with
        """
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            bad = tokens[(tokens < 0) | (tokens >= self.cfg.vocab_size)][0]
            raise UnknownToken(f"token id {int(bad)} outside vocabulary of {self.cfg.vocab_size}")
        seq = tokens.shape[1]
        if seq > self.cfg.max_prompt_len:
            raise ShapeMismatch("semantic_forward", tokens.shape, (tokens.shape[0], self.cfg.max_prompt_len),
                                detail="prompt longer than max_prompt_len")
        emb = self.store[f"{self.GROUP}.tok_emb"]
        pos = self.store[f"{self.GROUP}.pos_emb"]
        x = _gather_rows(emb, tokens) + pos[0:seq]
        mask = causal_mask(seq)
        states: List[SemanticState] = []
        for j in range(1, self.cfg.M + 1):
            x, k, v = prenorm_block(x, self.layer(j), self.cfg.n_heads, self.cfg.d_head, mask, qkv_bias=False)
            states.append(SemanticState(tokens=tokens, hidden=x, layer_index=j, keys=k, values=v))
        return states

    def logits(self, final: SemanticState) -> Array:
        xn = ops.layer_norm(final.hidden, self.store[f"{self.GROUP}.lnf_g"], self.store[f"{self.GROUP}.lnf_b"])
        return ops.matmul(xn, ops.transpose(self.store[f"{self.GROUP}.tok_emb"], (1, 0)))

    def lm_loss(self, tokens: np.ndarray) -> Array:
        """Next-token cross-entropy over a (B, S) batch."""
        states = self.forward(tokens[:, :-1])
        return ops.cross_entropy(self.logits(states[-1]), tokens[:, 1:])


class SpatialTransformer:
    """L post-norm spatial blocks with geometry-specific weights."""

    GROUP = "spatial"

    def __init__(self, cfg: ModelConfig, store: ParameterStore, rng: Rng):
        self.cfg = cfg
        self.store = store
        d = cfg.d_model
        for i in range(1, cfg.L + 1):
            register_block(store, self.GROUP, f"l{i}", d, cfg.ffn_mult * d, rng.child(f"l{i}"), qkv_bias=True)

    def layer(self, i: int) -> Dict[str, Array]:
        return block_params(self.store, self.GROUP, f"l{i}")


def _gather_rows(table: Array, ids: np.ndarray) -> Array:
    """Embedding lookup as a one-hot product so gradients reach the table."""
    onehot = np.zeros((*ids.shape, table.shape[0]), dtype=np.float32)
    np.put_along_axis(onehot, ids[..., None], 1.0, axis=-1)
    return ops.matmul(constant(onehot), table)
