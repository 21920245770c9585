"""
Tests for scene generation, the z-buffer renderer and batch assembly.
"""
import numpy as np
import pytest

from app.errors import ConfigError
from app.models.config import PRESETS
from app.models.models import BACKGROUND_ALBEDO, BACKGROUND_Z, COARSE, FINE, Primitive, SceneSpec
from app.numcore.rng import Rng
from app.services.scenegen import SceneGenerator, analytic_area, coverage, gen_scene, render


def _inside(p, u, v):
    dx, dy, r = u - p.center[0], v - p.center[1], p.half_size
    if p.kind == "circle":
        return dx * dx + dy * dy <= r * r
    if p.kind == "square":
        return abs(dx) <= r and abs(dy) <= r
    return -r <= dy <= r and 2.0 * abs(dx) <= dy + r


def _oracle_depth(spec, H, W):
    out = np.empty((H, W), dtype=np.float32)
    for i in range(H):
        for j in range(W):
            u, v = (j + 0.5) / W, (i + 0.5) / H
            zs = [np.float32(p.z) for p in spec.primitives if _inside(p, u, v)]
            out[i, j] = min(zs) if zs else np.float32(spec.background_z)
    return out


def test_renderer_matches_brute_force_oracle():
    for k in range(1000):
        phase = FINE if k % 2 else COARSE
        spec = gen_scene(Rng(k, "oracle", k), phase).target
        _, depth, _ = render(spec, 16, 16)
        assert np.array_equal(depth, _oracle_depth(spec, 16, 16)), f"scene {k}"


def test_coverage_area_matches_analytic():
    for kind in ("circle", "square", "triangle"):
        p = Primitive(kind=kind, center=(0.5, 0.5), half_size=0.3, z=2.0, albedo=0.5)
        frac = coverage(p, 256, 256).mean()
        assert frac == pytest.approx(analytic_area(p), rel=0.02)


def test_nearer_primitive_wins():
    far = Primitive("square", (0.5, 0.5), 0.3, 6.0, 0.4)
    near = Primitive("circle", (0.5, 0.5), 0.1, 2.0, 0.9)
    image, depth, mask = render(SceneSpec(primitives=(near, far)), 32, 32)
    assert depth[16, 16] == 2.0
    assert image[16, 16, 0] == np.float32(0.9)
    assert depth[16, 8] == 6.0
    assert depth[0, 0] == BACKGROUND_Z
    assert image[0, 0, 1] == np.float32(BACKGROUND_ALBEDO)
    assert mask.all()


def test_empty_scene_is_background():
    image, depth, _ = render(SceneSpec(), 8, 8)
    assert np.all(depth == BACKGROUND_Z)
    assert np.allclose(image, BACKGROUND_ALBEDO)


@pytest.mark.parametrize("phase", [COARSE, FINE])
def test_generated_scenes_respect_phase(phase):
    for k in range(200):
        spec = gen_scene(Rng(3, "phase", k), phase).target
        spec.validate()
        n = len(spec.primitives)
        assert phase.min_primitives <= n <= phase.max_primitives
        assert len(spec.relations) <= phase.max_relations
        zs = sorted(p.z for p in spec.primitives)
        assert all(b - a >= phase.min_depth_gap - 1e-9 for a, b in zip(zs, zs[1:]))


@pytest.mark.parametrize("phase", [COARSE, FINE])
def test_edit_tasks_pair_source_and_target(phase):
    for k in range(200):
        add = gen_scene(Rng(k, "edit"), phase, "edit_add")
        assert len(add.target.primitives) == len(add.source.primitives) + 1
        assert add.target.edit_subject in add.target.primitives
        add.target.validate()
        add.source.validate()

        remove = gen_scene(Rng(k, "edit"), phase, "edit_remove")
        assert len(remove.target.primitives) == len(remove.source.primitives) - 1
        assert remove.target.edit_subject in remove.source.primitives
        remove.target.validate()
        remove.source.validate()

        replace = gen_scene(Rng(k, "edit"), phase, "edit_replace")
        subject = replace.target.edit_subject
        assert len(replace.target.primitives) == len(replace.source.primitives)
        old = [p for p in replace.source.primitives if p.center == subject.center and p.z == subject.z]
        assert old and old[0].kind != subject.kind


def test_generator_is_index_addressed():
    gen = SceneGenerator(PRESETS["desk"], seed=4)
    assert gen.pair(FINE, 5) == gen.pairs(FINE, [3, 4, 5])[2]
    assert gen.pair(FINE, 5) != gen.pair(FINE, 6)
    assert gen.pair(FINE, 5, stream="val") != gen.pair(FINE, 5)


def test_batches_do_not_depend_on_worker_count():
    one = SceneGenerator(PRESETS["desk"], seed=2, workers=1).make_batch(FINE, range(12))
    many = SceneGenerator(PRESETS["desk"], seed=2, workers=4).make_batch(FINE, range(12))
    assert one.digest() == many.digest()


def test_batch_layout():
    cfg = PRESETS["desk"]
    batch = SceneGenerator(cfg, seed=0).make_batch(FINE, range(3), {"t2i": 1.0})
    assert batch.prompts.shape == (3, cfg.max_prompt_len)
    assert batch.images.shape == (3, cfg.H, cfg.W, 3)
    assert batch.depths.shape == (3, cfg.H, cfg.W)
    assert batch.edit_sources is None

    edits = SceneGenerator(cfg, seed=0).make_batch(FINE, range(3), {"edit_add": 1.0})
    assert edits.edit_sources.shape == (3, cfg.H, cfg.W, 3)

    mixed = SceneGenerator(cfg, seed=0).make_batch(FINE, range(16), {"t2i": 0.5, "edit_remove": 0.5})
    tasks = {s.task_tag for s in mixed.specs}
    assert tasks == {"t2i", "edit_remove"}
    for spec, source in zip(mixed.specs, mixed.edit_sources):
        if spec.task_tag == "t2i":
            assert not source.any()
        else:
            assert source.any()


def test_task_mix_must_sum_to_one():
    with pytest.raises(ConfigError):
        SceneGenerator(PRESETS["desk"], seed=0).pair(FINE, 0, {"t2i": 0.5})
