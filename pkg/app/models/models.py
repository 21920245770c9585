from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import hashlib
import numpy as np

PRIMITIVE_KINDS = ("circle", "square", "triangle")
TASK_TAGS = ("t2i", "edit_add", "edit_remove", "edit_replace")
RELATION_WORDS = ("in-front-of", "behind", "left-of", "right-of", "above", "below")

BACKGROUND_Z = 10.0  # meters
BACKGROUND_ALBEDO = 0.05
MIN_Z, MAX_Z = 1.0, 9.0


@dataclass(frozen=True)
class Primitive:
    """A flat-shaded billboard at a metric depth"""
    kind: str
    center: Tuple[float, float]  # (x, y) in [0, 1]^2, y grows downwards
    half_size: float  # in (0, 0.5]
    z: float  # meters
    albedo: float  # gray level

    def validate(self) -> None:
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive kind '{self.kind}'")
        if not (0.0 < self.half_size <= 0.5):
            raise ValueError(f"half_size {self.half_size} outside (0, 0.5]")
        if not (MIN_Z <= self.z <= MAX_Z):
            raise ValueError(f"depth {self.z} outside [{MIN_Z}, {MAX_Z}]")
        x, y = self.center
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ValueError(f"center {self.center} outside the unit square")


@dataclass(frozen=True)
class Relation:
    """A stated relation between two primitives, by canonical index"""
    a: int
    word: str
    b: int


def relation_holds(a: Primitive, word: str, b: Primitive) -> bool:
    """Whether `a <word> b` is true of the scene geometry."""
    if word == "in-front-of":
        return a.z < b.z
    if word == "behind":
        return a.z > b.z
    if word == "left-of":
        return a.center[0] < b.center[0]
    if word == "right-of":
        return a.center[0] > b.center[0]
    if word == "above":
        return a.center[1] < b.center[1]
    if word == "below":
        return a.center[1] > b.center[1]
    raise ValueError(f"unknown relation word '{word}'")


@dataclass(frozen=True)
class SceneSpec:
    """Structured description of a scene; source of prompts and ground truth"""
    primitives: Tuple[Primitive, ...] = ()
    background_z: float = BACKGROUND_Z
    task_tag: str = "t2i"
    relations: Tuple[Relation, ...] = ()
    edit_subject: Optional[Primitive] = None  # added / removed / replacing primitive

    def validate(self) -> None:
        if not 1 <= len(self.primitives) <= 5:
            raise ValueError(f"{len(self.primitives)} primitives, expected 1 to 5")
        if self.task_tag not in TASK_TAGS:
            raise ValueError(f"unknown task tag '{self.task_tag}'")
        for p in self.primitives:
            p.validate()
        if self.primitives and self.background_z <= max(p.z for p in self.primitives):
            raise ValueError("background must lie behind every primitive")
        for rel in self.relations:
            n = len(self.primitives)
            if not (0 <= rel.a < n and 0 <= rel.b < n) or rel.a == rel.b:
                raise ValueError(f"relation {rel} references missing primitives")
            if not relation_holds(self.primitives[rel.a], rel.word, self.primitives[rel.b]):
                raise ValueError(f"relation {rel} is false for this scene")

    def canonical(self) -> "SceneSpec":
        """Primitives sorted by (z, x); relation indices follow the new order."""
        order = sorted(range(len(self.primitives)),
                       key=lambda i: (self.primitives[i].z, self.primitives[i].center[0]))
        remap = {old: new for new, old in enumerate(order)}
        return SceneSpec(
            primitives=tuple(self.primitives[i] for i in order),
            background_z=self.background_z,
            task_tag=self.task_tag,
            relations=tuple(Relation(remap[r.a], r.word, remap[r.b]) for r in self.relations),
            edit_subject=self.edit_subject,
        )


@dataclass(frozen=True)
class ScenePair:
    """A generated sample: the scene to produce, plus the source scene for edit tasks"""
    target: SceneSpec
    source: Optional[SceneSpec] = None


@dataclass(frozen=True)
class CurriculumPhase:
    """Scene complexity caps for one curriculum phase"""
    name: str
    min_primitives: int
    max_primitives: int
    min_depth_gap: float
    max_relations: int
    size_range: Tuple[float, float]
    task_weights: Tuple[Tuple[str, float], ...] = (("t2i", 1.0),)


COARSE = CurriculumPhase(
    name="coarse", min_primitives=1, max_primitives=2, min_depth_gap=2.0,
    max_relations=0, size_range=(0.12, 0.25),
    task_weights=(("t2i", 0.7), ("edit_add", 0.1), ("edit_remove", 0.1), ("edit_replace", 0.1)),
)
FINE = CurriculumPhase(
    name="fine", min_primitives=1, max_primitives=5, min_depth_gap=0.5,
    max_relations=2, size_range=(0.08, 0.22),
    task_weights=(("t2i", 0.7), ("edit_add", 0.1), ("edit_remove", 0.1), ("edit_replace", 0.1)),
)
PHASES = {"coarse": COARSE, "fine": FINE}


@dataclass(frozen=True)
class PromptTokens:
    """Token ids of one scene prompt"""
    ids: Tuple[int, ...]

    def __len__(self):
        return len(self.ids)

    def padded(self, length: int, pad_id: int) -> np.ndarray:
        if len(self.ids) > length:
            raise ValueError(f"prompt of {len(self.ids)} tokens exceeds padded length {length}")
        out = np.full(length, pad_id, dtype=np.int64)
        out[: len(self.ids)] = self.ids
        return out


@dataclass
class Batch:
    """Stacked training samples"""
    prompts: np.ndarray  # (B, S) int64
    images: np.ndarray  # (B, H, W, 3) float32
    depths: np.ndarray  # (B, H, W) float32, meters
    masks: np.ndarray  # (B, H, W) bool
    edit_sources: Optional[np.ndarray] = None  # (B, H, W, 3); zeros for t2i samples
    specs: List[SceneSpec] = field(default_factory=list)
    indices: List[int] = field(default_factory=list)

    def __len__(self):
        return self.prompts.shape[0]

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for arr in (self.prompts, self.images, self.depths, self.masks):
            h.update(np.ascontiguousarray(arr).tobytes())
        if self.edit_sources is not None:
            h.update(np.ascontiguousarray(self.edit_sources).tobytes())
        return h.digest()


@dataclass
class TrainRecord:
    """One TrainLog line"""
    step: int
    stage: int
    phase: str
    l_diff: Optional[float]
    l_depth: float
    l_total: float
    grad_norm: float
    wallclock: float = 0.0
    val_depth_loss: Optional[float] = None
    val_diff_loss: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def replay_dict(self) -> Dict[str, Any]:
        """Everything but wallclock; equal across a run and its resumed replay."""
        data = asdict(self)
        data.pop("wallclock")
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainRecord":
        return cls(**data)


@dataclass
class AblationReport:
    """Per-variant, per-seed metrics of one ablation axis plus its directional verdicts"""
    axis: str
    variants: List[str]
    seeds: List[int]
    cells: Dict[str, Dict[str, Dict[str, Any]]] = field(default_factory=dict)
    means: Dict[str, Dict[str, float]] = field(default_factory=dict)
    verdicts: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    schema_version: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AblationReport":
        return cls(**data)
