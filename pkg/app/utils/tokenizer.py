"""
Scene prompt vocabulary, tokenizer and parser.

Prompt grammar:
    BOS (OBJ kind x y z size shade)* (REL idx word idx)* [EDIT verb kind x y z size shade] EOS PAD*
Positions, depths, sizes and shades are quantized; everything else is exact.
"""
from typing import Dict, List, Optional, Sequence, Tuple

from ..errors import MalformedPrompt
from ..models.models import (
    BACKGROUND_Z,
    PRIMITIVE_KINDS,
    RELATION_WORDS,
    Primitive,
    PromptTokens,
    Relation,
    SceneSpec,
)

POSITION_BINS = 8
DEPTH_BINS = 8
SIZE_WORDS = ("small", "medium", "large")
SIZE_EDGES = (0.125, 0.1875)  # upper edges of small and medium
SIZE_VALUES = (0.1, 0.15625, 0.22)
SHADE_BINS = 4
SHADE_LOW, SHADE_HIGH = 0.3, 1.0
EDIT_VERBS = {"edit_add": "add", "edit_remove": "remove", "edit_replace": "replace"}
MAX_OBJECTS = 5

VOCAB: Tuple[str, ...] = (
    ("<pad>", "<bos>", "<eos>", "<obj>", "<rel>", "<edit>")
    + PRIMITIVE_KINDS
    + tuple(f"x{i}" for i in range(POSITION_BINS))
    + tuple(f"y{i}" for i in range(POSITION_BINS))
    + tuple(f"z{i}" for i in range(DEPTH_BINS))
    + SIZE_WORDS
    + tuple(f"shade{i}" for i in range(SHADE_BINS))
    + RELATION_WORDS
    + ("add", "remove", "replace")
    + tuple(f"i{i}" for i in range(MAX_OBJECTS))
)
TOKEN_ID: Dict[str, int] = {tok: i for i, tok in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)
PAD_ID = TOKEN_ID["<pad>"]
BOS_ID = TOKEN_ID["<bos>"]
EOS_ID = TOKEN_ID["<eos>"]


# Quantization

def position_bin(v: float) -> int:
    return min(max(int(v * POSITION_BINS), 0), POSITION_BINS - 1)


def position_value(b: int) -> float:
    return (b + 0.5) / POSITION_BINS


def depth_bin(z: float) -> int:
    return min(max(int(z - 1.0), 0), DEPTH_BINS - 1)


def depth_value(b: int) -> float:
    return 1.5 + b


def size_bin(half_size: float) -> int:
    for i, edge in enumerate(SIZE_EDGES):
        if half_size < edge:
            return i
    return len(SIZE_EDGES)


def shade_bin(albedo: float) -> int:
    width = (SHADE_HIGH - SHADE_LOW) / SHADE_BINS
    return min(max(int((albedo - SHADE_LOW) / width), 0), SHADE_BINS - 1)


def shade_value(b: int) -> float:
    width = (SHADE_HIGH - SHADE_LOW) / SHADE_BINS
    return SHADE_LOW + (b + 0.5) * width


def quantize_primitive(p: Primitive) -> Primitive:
    return Primitive(
        kind=p.kind,
        center=(position_value(position_bin(p.center[0])), position_value(position_bin(p.center[1]))),
        half_size=SIZE_VALUES[size_bin(p.half_size)],
        z=depth_value(depth_bin(p.z)),
        albedo=shade_value(shade_bin(p.albedo)),
    )


def quantize_spec(spec: SceneSpec) -> SceneSpec:
    """The scene a prompt can express: canonical order, every value at its bin representative."""
    spec = spec.canonical()
    return SceneSpec(
        primitives=tuple(quantize_primitive(p) for p in spec.primitives),
        background_z=BACKGROUND_Z,
        task_tag=spec.task_tag,
        relations=spec.relations,
        edit_subject=quantize_primitive(spec.edit_subject) if spec.edit_subject else None,
    )


# Tokenize / detokenize

def _primitive_tokens(p: Primitive) -> List[str]:
    return [
        p.kind,
        f"x{position_bin(p.center[0])}",
        f"y{position_bin(p.center[1])}",
        f"z{depth_bin(p.z)}",
        SIZE_WORDS[size_bin(p.half_size)],
        f"shade{shade_bin(p.albedo)}",
    ]


def tokenize(spec: SceneSpec) -> PromptTokens:
    """
    Turn a scene into prompt tokens, primitives in canonical (z, x) order.

    Args:
        spec: The scene (for edit tasks, the edited target scene)

    Returns:
        PromptTokens; an empty t2i scene gives just BOS EOS
    """
    spec = spec.canonical()
    words = ["<bos>"]
    for p in spec.primitives:
        words += ["<obj>"] + _primitive_tokens(p)
    for rel in spec.relations:
        words += ["<rel>", f"i{rel.a}", rel.word, f"i{rel.b}"]
    if spec.task_tag != "t2i":
        if spec.edit_subject is None:
            raise MalformedPrompt(f"{spec.task_tag} scene has no edit subject")
        words += ["<edit>", EDIT_VERBS[spec.task_tag]] + _primitive_tokens(spec.edit_subject)
    words.append("<eos>")
    return PromptTokens(tuple(TOKEN_ID[w] for w in words))


def _take_primitive(words: Sequence[str], pos: int) -> Tuple[Primitive, int]:
    try:
        kind, xw, yw, zw, sw, aw = words[pos:pos + 6]
    except ValueError:
        raise MalformedPrompt(f"truncated primitive at position {pos}") from None
    if (kind not in PRIMITIVE_KINDS or not xw.startswith("x") or not yw.startswith("y")
            or not zw.startswith("z") or sw not in SIZE_WORDS or not aw.startswith("shade")):
        raise MalformedPrompt(f"bad primitive description at position {pos}: {' '.join(words[pos:pos + 6])}")
    try:
        prim = Primitive(
            kind=kind,
            center=(position_value(int(xw[1:])), position_value(int(yw[1:]))),
            half_size=SIZE_VALUES[SIZE_WORDS.index(sw)],
            z=depth_value(int(zw[1:])),
            albedo=shade_value(int(aw[5:])),
        )
    except ValueError:
        raise MalformedPrompt(f"bad primitive description at position {pos}") from None
    return prim, pos + 6


def detokenize(tokens) -> SceneSpec:
    """
    Parse prompt tokens back into the canonical (quantized) scene.

    Args:
        tokens: PromptTokens or a sequence of ids; trailing PAD is ignored

    Raises:
        MalformedPrompt: Unknown id or a sequence that does not follow the grammar
    """
    ids = list(tokens.ids if isinstance(tokens, PromptTokens) else tokens)
    words: List[str] = []
    for i in ids:
        i = int(i)
        if not 0 <= i < VOCAB_SIZE:
            raise MalformedPrompt(f"token id {i} is outside the vocabulary")
        words.append(VOCAB[i])
    while words and words[-1] == "<pad>":
        words.pop()
    if len(words) < 2 or words[0] != "<bos>" or words[-1] != "<eos>":
        raise MalformedPrompt("prompt must start with <bos> and end with <eos>")
    body, pos = words[1:-1], 0
    primitives: List[Primitive] = []
    relations: List[Relation] = []
    task_tag, subject = "t2i", None
    while pos < len(body) and body[pos] == "<obj>":
        prim, pos = _take_primitive(body, pos + 1)
        primitives.append(prim)
    while pos < len(body) and body[pos] == "<rel>":
        if pos + 4 > len(body):
            raise MalformedPrompt(f"truncated relation at position {pos}")
        a, word, b = body[pos + 1:pos + 4]
        if not (a.startswith("i") and b.startswith("i")) or word not in RELATION_WORDS:
            raise MalformedPrompt(f"bad relation clause at position {pos}")
        ia, ib = int(a[1:]), int(b[1:])
        if ia >= len(primitives) or ib >= len(primitives):
            raise MalformedPrompt(f"relation references object beyond {len(primitives)}")
        relations.append(Relation(ia, word, ib))
        pos += 4
    if pos < len(body) and body[pos] == "<edit>":
        if pos + 1 >= len(body):
            raise MalformedPrompt("truncated edit clause")
        verb = body[pos + 1]
        tags = {v: k for k, v in EDIT_VERBS.items()}
        if verb not in tags:
            raise MalformedPrompt(f"unknown edit verb '{verb}'")
        task_tag = tags[verb]
        subject, pos = _take_primitive(body, pos + 2)
    if pos != len(body):
        raise MalformedPrompt(f"unexpected token '{body[pos]}' at position {pos + 1}")
    return SceneSpec(
        primitives=tuple(primitives),
        background_z=BACKGROUND_Z,
        task_tag=task_tag,
        relations=tuple(relations),
        edit_subject=subject,
    )


def describe(tokens) -> str:
    """Space-separated words of a prompt, PAD stripped."""
    ids = tokens.ids if isinstance(tokens, PromptTokens) else tokens
    return " ".join(VOCAB[int(i)] for i in ids if int(i) != PAD_ID)
