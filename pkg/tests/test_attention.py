"""
Tests for layer pairing, shared attention and the two transformer pathways.
"""
import numpy as np
import pytest

from app.errors import EmptyKeySet, InvalidLayerIndex, ShapeMismatch, UnknownToken
from app.models.config import PRESETS
from app.numcore.array import constant
from app.numcore.nn import attention, merge_heads
from app.numcore.rng import Rng
from app.services.attention import (
    GeoState,
    layer_map,
    semantic_layer_for,
    shared_attention,
    spatial_block,
    touched_layers,
)
from app.services.geometry import derive_geometry, init_geo_states
from app.services.model import SpatialFusionModel
from app.utils.tokenizer import PAD_ID


@pytest.mark.parametrize("M, L", [(36, 10), (12, 4)])
def test_layer_map_is_floor(M, L):
    for i in range(1, L + 1):
        assert layer_map(i, M, L) == (i * M) // L
    assert layer_map(L, M, L) == M


def test_layer_map_full_scale_values():
    assert [layer_map(i, 36, 10) for i in range(1, 11)] == [3, 7, 10, 14, 18, 21, 25, 28, 32, 36]


def test_layer_map_rejects_bad_indices():
    with pytest.raises(InvalidLayerIndex):
        layer_map(0, 12, 4)
    with pytest.raises(InvalidLayerIndex):
        layer_map(5, 12, 4)
    with pytest.raises(InvalidLayerIndex):
        layer_map(1, 4, 4)


def test_share_strategies_pick_layers():
    cfg = PRESETS["desk"]
    assert touched_layers(cfg.replace(share_strategy="uniform")) == [3, 6, 9, 12]
    assert touched_layers(cfg.replace(share_strategy="shallow")) == [1, 2, 3, 4]
    assert touched_layers(cfg.replace(share_strategy="deep")) == [9, 10, 11, 12]
    assert touched_layers(cfg.replace(share_strategy="none")) == []
    assert semantic_layer_for(2, cfg) == 6


def _qkv(seed, heads=2, g=3, s=4, dh=4):
    rng = Rng(seed, "qkv")
    q, kg, vg = (constant(rng.child(n).normal((1, heads, g, dh))) for n in ("q", "kg", "vg"))
    ks, vs = (constant(rng.child(n).normal((1, heads, s, dh))) for n in ("ks", "vs"))
    return q, ks, vs, kg, vg


def test_empty_semantic_context_equals_self_attention():
    q, _, _, kg, vg = _qkv(0)
    shared = shared_attention(q, None, None, kg, vg, 4)
    plain, _ = attention(q, kg, vg, 4)
    assert np.allclose(shared.data, merge_heads(plain).data, atol=1e-6)


def test_shared_attention_output_shape_and_weights():
    q, ks, vs, kg, vg = _qkv(1)
    out, weights = shared_attention(q, ks, vs, kg, vg, 4, return_weights=True)
    assert out.shape == (1, 3, 8)
    assert weights.shape == (1, 2, 3, 7)
    assert np.allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)


def test_shared_attention_shape_errors():
    q, ks, vs, kg, vg = _qkv(2)
    with pytest.raises(ShapeMismatch):
        shared_attention(q, ks, constant(vs.data[:, :, :2]), kg, vg, 4)
    wide = constant(np.zeros((1, 2, 4, 6)))
    with pytest.raises(ShapeMismatch):
        shared_attention(q, wide, wide, kg, vg, 4)


def test_shared_attention_empty_key_set():
    q = constant(np.zeros((1, 2, 0, 4)))
    empty = constant(np.zeros((1, 2, 0, 4)))
    with pytest.raises(EmptyKeySet):
        shared_attention(q, None, None, empty, empty, 4)


def test_identical_keys_average_the_values():
    rng = Rng(7, "flat")
    q = constant(rng.child("q").normal((1, 1, 3, 4)))
    key = rng.child("k").normal((1, 1, 1, 4))
    ks, kg = constant(np.repeat(key, 2, axis=2)), constant(np.repeat(key, 3, axis=2))
    vs, vg = constant(rng.child("vs").normal((1, 1, 2, 4))), constant(rng.child("vg").normal((1, 1, 3, 4)))
    out = shared_attention(q, ks, vs, kg, vg, 4)
    mean = np.concatenate([vs.data, vg.data], axis=2).mean(axis=2)
    assert np.allclose(out.data, np.broadcast_to(mean, (1, 3, 4)), atol=1e-5)


def test_single_key_returns_its_value():
    rng = Rng(8, "single")
    q = constant(rng.child("q").normal((1, 2, 3, 4)))
    k = constant(rng.child("k").normal((1, 2, 1, 4)))
    v = constant(rng.child("v").normal((1, 2, 1, 4)))
    out = shared_attention(q, None, None, k, v, 4)
    expected = merge_heads(constant(np.broadcast_to(v.data, (1, 2, 3, 4)).copy()))
    assert np.allclose(out.data, expected.data, atol=1e-6)


def test_semantic_states_are_causal(tiny_model):
    tokens = np.array([[1, 5, 6, 7, 2]])
    changed = tokens.copy()
    changed[0, 4] = 8
    a = tiny_model.semantic.forward(tokens)
    b = tiny_model.semantic.forward(changed)
    assert len(a) == tiny_model.cfg.M
    assert np.array_equal(a[-1].hidden.data[0, :4], b[-1].hidden.data[0, :4])
    assert a[0].keys.shape == (1, tiny_model.cfg.n_heads, 5, tiny_model.cfg.d_head)


def test_unknown_token_rejected(tiny_model):
    with pytest.raises(UnknownToken):
        tiny_model.semantic.forward(np.array([[1, tiny_model.cfg.vocab_size]]))


def test_spatial_block_keeps_shape(tiny_model):
    cfg = tiny_model.cfg
    tokens = np.full((2, 6), PAD_ID)
    sem = tiny_model.semantic.forward(tokens)
    geo = init_geo_states(tiny_model.queries, 2)
    out = spatial_block(geo, sem[0], tiny_model.spatial.layer(1), cfg)
    assert isinstance(out, GeoState)
    assert out.hidden.shape == (2, cfg.n_geo_tokens, cfg.d_model)
    assert out.layer_index == 1


def test_no_sharing_ignores_semantics(tiny_cfg):
    cfg = tiny_cfg.replace(share_strategy="none")
    model = SpatialFusionModel(cfg, 0)
    a = model.semantic.forward(np.array([[1, 5, 6, 2]]))
    b = model.semantic.forward(np.array([[1, 9, 3, 2]]))
    for state in b:
        state.hidden = constant(state.hidden.data + 1.0)
        state.keys = constant(state.keys.data * 3.0)
        state.values = constant(state.values.data - 2.0)
    geo = init_geo_states(model.queries, 1)
    out_a = derive_geometry(geo, a, cfg, model.spatial)
    out_b = derive_geometry(geo, b, cfg, model.spatial)
    assert np.array_equal(out_a.hidden.data, out_b.hidden.data)


def test_uniform_sharing_reads_semantics(tiny_model):
    cfg = tiny_model.cfg
    a = tiny_model.semantic.forward(np.array([[1, 5, 6, 2]]))
    b = tiny_model.semantic.forward(np.array([[1, 9, 3, 2]]))
    geo = init_geo_states(tiny_model.queries, 1)
    out_a = derive_geometry(geo, a, cfg, tiny_model.spatial)
    out_b = derive_geometry(geo, b, cfg, tiny_model.spatial)
    assert not np.array_equal(out_a.hidden.data, out_b.hidden.data)


def test_derive_geometry_needs_all_semantic_states(tiny_model):
    sem = tiny_model.semantic.forward(np.array([[1, 2]]))
    with pytest.raises(ShapeMismatch):
        derive_geometry(init_geo_states(tiny_model.queries, 1), sem[:-1], tiny_model.cfg, tiny_model.spatial)
