"""
Tests for prompt tokenization and parsing.
"""
import pytest

from app.errors import MalformedPrompt
from app.models.models import FINE, Primitive, PromptTokens, Relation, SceneSpec
from app.numcore.rng import Rng
from app.services.scenegen import gen_scene
from app.utils.tokenizer import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    TOKEN_ID,
    VOCAB,
    VOCAB_SIZE,
    depth_bin,
    describe,
    detokenize,
    quantize_spec,
    size_bin,
    tokenize,
)


def test_vocab_is_unique():
    assert len(set(VOCAB)) == VOCAB_SIZE
    assert PAD_ID == 0
    assert VOCAB[BOS_ID] == "<bos>" and VOCAB[EOS_ID] == "<eos>"


def test_parse_recovers_quantized_scene():
    for task in ("t2i", "edit_add", "edit_remove", "edit_replace"):
        for k in range(40):
            spec = gen_scene(Rng(k, "tokenizer"), FINE, task).target
            assert detokenize(tokenize(spec)) == quantize_spec(spec)


def test_padding_is_ignored():
    spec = SceneSpec(primitives=(Primitive("circle", (0.3, 0.6), 0.1, 2.2, 0.8),))
    padded = tokenize(spec).padded(56, PAD_ID)
    assert detokenize(padded) == quantize_spec(spec)


def test_prompt_words():
    spec = SceneSpec(
        primitives=(
            Primitive("square", (0.7, 0.5), 0.2, 4.0, 0.4),
            Primitive("circle", (0.2, 0.5), 0.1, 2.0, 0.95),
        ),
        relations=(Relation(1, "behind", 0),),
    )
    assert describe(tokenize(spec)) == (
        "<bos> <obj> circle x1 y4 z1 small shade3 <obj> square x5 y4 z3 large shade0 "
        "<rel> i0 behind i1 <eos>"
    )


def test_worst_case_prompt_fits():
    prims = tuple(Primitive("triangle", (0.1 + 0.15 * k, 0.5), 0.1, 1.5 + k, 0.5) for k in range(5))
    spec = SceneSpec(
        primitives=prims,
        task_tag="edit_add",
        relations=(Relation(0, "left-of", 1), Relation(1, "left-of", 2)),
        edit_subject=prims[2],
    )
    assert len(tokenize(spec)) <= 56


def test_empty_scene():
    assert tokenize(SceneSpec()).ids == (BOS_ID, EOS_ID)
    assert detokenize([BOS_ID, EOS_ID]) == SceneSpec()


def test_bins():
    assert depth_bin(1.0) == 0
    assert depth_bin(8.99) == 7
    assert size_bin(0.124) == 0
    assert size_bin(0.125) == 1
    assert size_bin(0.2) == 2


@pytest.mark.parametrize("words", [
    ["<obj>", "circle", "x1", "y1", "z1", "small", "shade1", "<eos>"],
    ["<bos>", "<obj>", "circle", "x1", "y1", "z1", "<eos>"],
    ["<bos>", "<obj>", "circle", "y1", "x1", "z1", "small", "shade1", "<eos>"],
    ["<bos>", "<rel>", "i0", "left-of", "i1", "<eos>"],
    ["<bos>", "<edit>", "paint", "circle", "x1", "y1", "z1", "small", "shade1", "<eos>"],
    ["<bos>", "circle", "<eos>"],
])
def test_malformed_prompts(words):
    with pytest.raises(MalformedPrompt):
        detokenize([TOKEN_ID[w] if w in TOKEN_ID else VOCAB_SIZE for w in words])


def test_out_of_vocab_id():
    with pytest.raises(MalformedPrompt):
        detokenize([BOS_ID, VOCAB_SIZE + 3, EOS_ID])


def test_padded_rejects_long_prompts():
    with pytest.raises(ValueError):
        PromptTokens((BOS_ID, EOS_ID, EOS_ID)).padded(2, PAD_ID)
