"""
Procedural scene generator and orthographic z-buffer renderer.

Every sample is keyed by (seed, stream, phase, index), so a sample can be
regenerated on its own and batches do not depend on worker count.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError
from ..models.config import ModelConfig
from ..models.models import (
    BACKGROUND_ALBEDO,
    BACKGROUND_Z,
    MAX_Z,
    MIN_Z,
    PRIMITIVE_KINDS,
    RELATION_WORDS,
    Batch,
    CurriculumPhase,
    Primitive,
    Relation,
    ScenePair,
    SceneSpec,
    relation_holds,
)
from ..numcore.rng import Rng
from ..utils.tokenizer import PAD_ID, tokenize


ALBEDO_RANGE = (0.3, 1.0)
CENTER_RANGE = (0.15, 0.85)


# Generation

def _depths(rng: Rng, n: int, gap: float) -> List[float]:
    """n depths in [MIN_Z, MAX_Z] with pairwise gaps of at least `gap`."""
    slack = (MAX_Z - MIN_Z) - (n - 1) * gap
    if slack < 0:
        raise ConfigError(f"{n} primitives cannot keep a {gap} m depth gap inside [{MIN_Z}, {MAX_Z}]")
    offsets = np.sort(rng.uniform(0.0, slack, size=n))
    return [float(MIN_Z + o + k * gap) for k, o in enumerate(offsets)]


def _primitive(rng: Rng, phase: CurriculumPhase, z: float) -> Primitive:
    lo, hi = phase.size_range
    return Primitive(
        kind=rng.choice(PRIMITIVE_KINDS),
        center=(float(rng.uniform(*CENTER_RANGE)), float(rng.uniform(*CENTER_RANGE))),
        half_size=float(rng.uniform(lo, hi)),
        z=z,
        albedo=float(rng.uniform(*ALBEDO_RANGE)),
    )


def _relations(rng: Rng, primitives: Sequence[Primitive], limit: int) -> Tuple[Relation, ...]:
    """Up to `limit` true relations between distinct primitives (canonical indices)."""
    n = len(primitives)
    if limit <= 0 or n < 2:
        return ()
    count = int(rng.integers(0, limit + 1))
    out: List[Relation] = []
    pairs = [(a, b) for a in range(n) for b in range(n) if a != b]
    for k in rng.permutation(len(pairs))[:count]:
        a, b = pairs[int(k)]
        words = [w for w in RELATION_WORDS if relation_holds(primitives[a], w, primitives[b])]
        if words:
            out.append(Relation(a, rng.choice(words), b))
    return tuple(out)


def _scene(primitives: Sequence[Primitive], task: str, subject: Optional[Primitive],
           rng: Rng, phase: CurriculumPhase) -> SceneSpec:
    ordered = SceneSpec(primitives=tuple(primitives)).canonical().primitives
    return SceneSpec(
        primitives=ordered,
        background_z=BACKGROUND_Z,
        task_tag=task,
        relations=_relations(rng, ordered, phase.max_relations),
        edit_subject=subject,
    )


def gen_scene(rng: Rng, phase: CurriculumPhase, task: str = "t2i") -> ScenePair:
    """
    Draw one scene, and for edit tasks the source scene it is edited from.

    Args:
        rng: Stream for this sample only
        phase: Complexity caps (primitive count, depth gap, relations, sizes)
        task: t2i, edit_add, edit_remove or edit_replace

    Returns:
        ScenePair; `target` is what the prompt describes, `source` is None for t2i
    """
    # add and remove need a primitive on both sides of the edit
    low = max(2, phase.min_primitives) if task in ("edit_add", "edit_remove") else phase.min_primitives
    n = int(rng.integers(low, max(low, phase.max_primitives) + 1))
    zs = _depths(rng.child("depth"), n, phase.min_depth_gap)
    prims = [_primitive(rng.child("primitive", k), phase, z) for k, z in enumerate(zs)]
    rel_rng = rng.child("relations")

    if task == "t2i":
        return ScenePair(target=_scene(prims, task, None, rel_rng, phase))

    pick = int(rng.integers(0, n))
    subject = prims[pick]
    rest = prims[:pick] + prims[pick + 1:]
    if task == "edit_add":
        target = _scene(prims, task, subject, rel_rng, phase)
        source = SceneSpec(primitives=tuple(rest)).canonical()
    elif task == "edit_remove":
        target = _scene(rest, task, subject, rel_rng, phase)
        source = SceneSpec(primitives=tuple(prims)).canonical()
    elif task == "edit_replace":
        others = [k for k in PRIMITIVE_KINDS if k != subject.kind]
        new = Primitive(
            kind=rng.choice(others),
            center=subject.center,
            half_size=subject.half_size,
            z=subject.z,
            albedo=float(rng.uniform(*ALBEDO_RANGE)),
        )
        replaced = prims[:pick] + [new] + prims[pick + 1:]
        target = _scene(replaced, task, new, rel_rng, phase)
        source = SceneSpec(primitives=tuple(prims)).canonical()
    else:
        raise ConfigError(f"unknown task tag '{task}'")
    return ScenePair(target=target, source=source)


# Rendering

def pixel_grid(H: int, W: int) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates (u, v) in [0, 1], each (H, W)."""
    u = (np.arange(W, dtype=np.float64) + 0.5) / W
    v = (np.arange(H, dtype=np.float64) + 0.5) / H
    return np.meshgrid(u, v)


def coverage(p: Primitive, H: int, W: int) -> np.ndarray:
    """Boolean (H, W) mask of pixels whose centers lie inside p."""
    u, v = pixel_grid(H, W)
    dx, dy = u - p.center[0], v - p.center[1]
    r = p.half_size
    if p.kind == "circle":
        return dx * dx + dy * dy <= r * r
    if p.kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if p.kind == "triangle":
        # apex up, base down
        return (dy >= -r) & (dy <= r) & (2.0 * np.abs(dx) <= dy + r)
    raise ValueError(f"unknown primitive kind '{p.kind}'")


def analytic_area(p: Primitive) -> float:
    """Area of p in unit-square coordinates."""
    r = p.half_size
    if p.kind == "circle":
        return float(np.pi * r * r)
    if p.kind == "square":
        return 4.0 * r * r
    return 2.0 * r * r


def render(spec: SceneSpec, H: int, W: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Orthographic z-buffer raster of a scene.

    Returns:
        image (H, W, 3) gray albedo in all channels, depth (H, W) meters,
        mask (H, W) all true
    """
    depth = np.full((H, W), spec.background_z, dtype=np.float32)
    albedo = np.full((H, W), BACKGROUND_ALBEDO, dtype=np.float32)
    for p in spec.primitives:
        hit = coverage(p, H, W) & (np.float32(p.z) < depth)
        depth[hit] = np.float32(p.z)
        albedo[hit] = np.float32(p.albedo)
    image = np.repeat(albedo[:, :, None], 3, axis=2)
    return image, depth, np.ones((H, W), dtype=bool)


# Batches

def _weights(phase: CurriculumPhase, task_mix: Optional[Dict[str, float]]) -> Tuple[List[str], List[float]]:
    mix = dict(task_mix) if task_mix is not None else dict(phase.task_weights)
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-6:
        raise ConfigError(f"task_mix weights sum to {total}, expected 1")
    tasks = sorted(mix)
    return tasks, [mix[t] for t in tasks]


class SceneGenerator:
    """Seeded, index-addressed source of rendered training samples."""

    def __init__(self, cfg: ModelConfig, seed: int, workers: int = 1):
        self.cfg = cfg
        self.seed = seed
        self.workers = max(1, int(workers))

    def pair(self, phase: CurriculumPhase, index: int, task_mix: Optional[Dict[str, float]] = None,
             stream: str = "train") -> ScenePair:
        rng = Rng(self.seed, f"scene/{stream}/{phase.name}", index)
        tasks, weights = _weights(phase, task_mix)
        task = rng.child("task").choice(tasks, p=weights)
        return gen_scene(rng.child("scene"), phase, task)

    def _sample(self, args):
        phase, index, task_mix, stream = args
        pair = self.pair(phase, index, task_mix, stream)
        image, depth, mask = render(pair.target, self.cfg.H, self.cfg.W)
        prompt = tokenize(pair.target).padded(self.cfg.max_prompt_len, PAD_ID)
        source = render(pair.source, self.cfg.H, self.cfg.W)[0] if pair.source is not None else None
        return pair, prompt, image, depth, mask, source

    def make_batch(
        self,
        phase: CurriculumPhase,
        indices: Sequence[int],
        task_mix: Optional[Dict[str, float]] = None,
        stream: str = "train",
    ) -> Batch:
        """
        Render and stack the samples at `indices`.

        Edit sources are zero images for t2i rows; `edit_sources` is None when
        the batch holds no edit task.
        """
        if not indices:
            raise ValueError("a batch needs at least one index")
        jobs = [(phase, int(i), task_mix, stream) for i in indices]
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                samples = list(pool.map(self._sample, jobs))
        else:
            samples = [self._sample(job) for job in jobs]

        has_edit = any(s[5] is not None for s in samples)
        sources = None
        if has_edit:
            blank = np.zeros((self.cfg.H, self.cfg.W, 3), dtype=np.float32)
            sources = np.stack([s[5] if s[5] is not None else blank for s in samples])
        return Batch(
            prompts=np.stack([s[1] for s in samples]),
            images=np.stack([s[2] for s in samples]),
            depths=np.stack([s[3] for s in samples]),
            masks=np.stack([s[4] for s in samples]),
            edit_sources=sources,
            specs=[s[0].target for s in samples],
            indices=[int(i) for i in indices],
        )

    def pairs(self, phase: CurriculumPhase, indices: Sequence[int], task_mix: Optional[Dict[str, float]] = None,
              stream: str = "train") -> List[ScenePair]:
        return [self.pair(phase, int(i), task_mix, stream) for i in indices]

    def prompts(self, phase: CurriculumPhase, indices: Sequence[int], task_mix: Optional[Dict[str, float]] = None,
                stream: str = "train") -> np.ndarray:
        """Padded (B, max_prompt_len) prompt ids without rendering."""
        return np.stack([
            tokenize(p.target).padded(self.cfg.max_prompt_len, PAD_ID)
            for p in self.pairs(phase, indices, task_mix, stream)
        ])
