"""
Tests for SpatialScore, the ablation sweeps, run reports and dataset export.
"""
import json

import numpy as np
import pytest

from app.errors import DataStreamMismatch, MissingRun
from app.models.config import PRESETS, ExperimentConfig, TrainSettings
from app.models.models import AblationReport, FINE, Primitive, Relation, SceneSpec, TrainRecord
from app.services.harness import (
    _check_streams,
    ablate_inject,
    ablate_sharing,
    compare_probe,
    export_derived_depth,
    export_sample,
    gen_data,
    judge_scene,
    report,
    score_prompts,
    spatial_score,
    summarise_run,
    sweep_lambda,
    visible_ids,
    write_report,
)
from app.services.model import SpatialFusionModel
from app.services.scenegen import SceneGenerator, render
from app.utils.imageio import read_depth, read_ppm
from app.utils.tokenizer import PAD_ID, detokenize, quantize_spec, tokenize


@pytest.fixture
def two_object_scene():
    return SceneSpec(
        primitives=(
            Primitive("circle", (0.3, 0.5), 0.15, 2.2, 0.9),
            Primitive("square", (0.7, 0.5), 0.2, 6.4, 0.4),
        ),
        relations=(Relation(0, "in-front-of", 1),),
    )


def _reference(spec, size=32):
    prompt = tokenize(spec).padded(56, PAD_ID)
    image, depth, _ = render(quantize_spec(spec), size, size)
    return image, depth, prompt


def test_reference_render_satisfies_its_prompt(two_object_scene):
    image, depth, prompt = _reference(two_object_scene)
    verdict = judge_scene(image, depth, prompt)
    assert verdict.satisfied
    assert verdict.present == [True, True]
    assert verdict.template_error == pytest.approx(0.0, abs=1e-6)


def test_reversed_depth_fails_the_order_check(two_object_scene):
    image, depth, prompt = _reference(two_object_scene)
    flipped = np.where(depth < 5.0, 8.0, np.where(depth < 9.0, 1.5, depth))
    verdict = judge_scene(image, flipped, prompt)
    assert not verdict.depth_order_ok
    assert not verdict.satisfied


def test_blank_image_fails_presence(two_object_scene):
    _, depth, prompt = _reference(two_object_scene)
    verdict = judge_scene(np.zeros((32, 32, 3)), depth, prompt)
    assert verdict.present == [False, False]
    assert not verdict.satisfied


def test_visible_ids_follow_occlusion():
    spec = SceneSpec(primitives=(
        Primitive("square", (0.5, 0.5), 0.1, 1.5, 0.5),
        Primitive("square", (0.5, 0.5), 0.3, 4.5, 0.5),
    ))
    ids = visible_ids(spec, 16, 16)
    assert ids[8, 8] == 0
    assert ids[8, 4] == 1
    assert ids[0, 0] == -1


def test_spatial_score_range(tiny_experiment):
    model = SpatialFusionModel(tiny_experiment.model, 0)
    model.trained = True
    prompts = score_prompts(tiny_experiment, 0)
    assert prompts.shape == (tiny_experiment.score_scenes, tiny_experiment.model.max_prompt_len)
    result = spatial_score(model, prompts, seed=0, batch_size=1)
    assert 0.0 <= result.spatial_score <= 1.0
    assert len(result.verdicts) == tiny_experiment.score_scenes
    again = spatial_score(model, prompts, seed=0, batch_size=1)
    assert again.spatial_score == result.spatial_score
    assert again.template_error == result.template_error


def test_sharing_ablation_grid(tiny_experiment, tmp_path):
    labels = []
    result = ablate_sharing(tiny_experiment, progress=labels.append)
    assert result.variants == ["none", "shallow", "deep", "uniform"]
    assert len(labels) == 8
    for variant in result.variants:
        assert set(result.cells[variant]) == {"0", "1"}
        assert all(c["status"] == "ok" for c in result.cells[variant].values())
        assert "val_depth_loss" in result.means[variant]
    for seed in ("0", "1"):
        assert len({result.cells[v][seed]["stream_digest"] for v in result.variants}) == 1
    assert set(result.verdicts) == {"uniform<none", "shallow<none", "deep<none"}
    assert set(result.verdicts["uniform<none"]["per_seed"]) == {"0", "1"}

    path = write_report(result, tmp_path)
    assert AblationReport.from_dict(json.loads(path.read_text())) == result
    assert summarise_run(tmp_path)["kind"] == "ablation:share_strategy"


def test_inject_ablation_counts_adapter_calls(tiny_experiment):
    result = ablate_inject(tiny_experiment, seeds=[0])
    cells = {mode: result.cells[mode]["0"] for mode in result.variants}
    assert all(c["status"] == "ok" for c in cells.values())
    assert cells["none"]["adapter_calls"] == 0
    assert cells["add"]["adapter_calls"] == tiny_experiment.train.steps_s2
    assert cells["concat"]["adapter_calls"] == tiny_experiment.train.steps_s2
    assert 0.0 <= cells["add"]["spatial_score"] <= 1.0
    assert {"add>none", "add>=concat", "concat>none"} == set(result.verdicts)
    assert result.verdicts["add>=concat"]["soft"]
    assert not result.verdicts["add>none"]["soft"]
    assert not result.verdicts["concat>none"]["soft"]


def test_lambda_sweep_reports_monotonicity(tiny_experiment):
    result = sweep_lambda(tiny_experiment, lambdas=[2.0, 0.0, 0.5], seeds=[0])
    assert result.variants == ["2.0", "0.0", "0.5"]
    assert set(result.verdicts) == {"depth_nonincreasing", "diff[2.0]>diff[0.5]"}
    assert list(result.verdicts["depth_nonincreasing"]["per_lambda"]) == ["0.0", "0.5", "2.0"]


def test_mismatched_streams_are_rejected():
    bad = AblationReport(axis="x", variants=["a", "b"], seeds=[0], cells={
        "a": {"0": {"status": "ok", "stream_digest": "00"}},
        "b": {"0": {"status": "ok", "stream_digest": "ff"}},
    })
    with pytest.raises(DataStreamMismatch):
        _check_streams(bad)


def _write_log(run_dir, losses):
    run_dir.mkdir(parents=True)
    with open(run_dir / "trainlog.jsonl", "w") as f:
        for step, loss in enumerate(losses):
            record = TrainRecord(step=step, stage=1, phase="coarse", l_diff=None, l_depth=loss,
                                 l_total=loss, grad_norm=1.0, val_depth_loss=loss)
            f.write(json.dumps(record.to_dict()) + "\n")


def test_report_of_one_run_is_its_metrics(tmp_path):
    _write_log(tmp_path / "a", [3.0, 2.0])
    out = report([tmp_path / "a"])
    assert out["aggregate"]["val_depth_loss"] == {"mean": 2.0, "std": 0.0, "n": 1}
    assert out["runs"][str(tmp_path / "a")]["metrics"]["steps"] == 2.0
    assert json.loads(json.dumps(out)) == out


def test_report_aggregates_runs(tmp_path):
    _write_log(tmp_path / "a", [2.0])
    _write_log(tmp_path / "b", [4.0])
    out = report([tmp_path / "a", tmp_path / "b"])
    assert out["aggregate"]["l_depth"] == {"mean": 3.0, "std": 1.0, "n": 2}


def test_report_needs_runs(tmp_path):
    with pytest.raises(MissingRun):
        report([])
    with pytest.raises(MissingRun):
        report([tmp_path / "absent"])
    (tmp_path / "empty").mkdir()
    with pytest.raises(MissingRun):
        report([tmp_path / "empty"])


def test_gen_data_layout(tiny_experiment, tmp_path):
    index = json.loads(gen_data(tiny_experiment, 0, tmp_path, count=5, val_fraction=0.2).read_text())
    records = index["records"]
    assert [r["split"] for r in records] == ["train"] * 4 + ["val"]
    generator = SceneGenerator(tiny_experiment.model, 0)
    for r in records:
        folder = tmp_path / r["record"]
        for name in r["files"]:
            assert (folder / name).exists()
        assert ("source.ppm" in r["files"]) == (r["task"] != "t2i")
        ids = [int(i) for i in (folder / "prompt.txt").read_text().split()]
        spec = detokenize(ids)
        assert spec.task_tag == r["task"]
        pair = generator.pair(FINE, int(r["record"]), stream=r["split"])
        _, depth, _ = render(pair.target, 8, 8)
        assert np.max(np.abs(read_depth(folder / "depth.pgm16") - depth)) <= 0.0005 + 1e-6
        assert read_ppm(folder / "image.ppm").shape == (8, 8, 3)


def test_export_sample_is_deterministic(tiny_experiment, tmp_path):
    model = SpatialFusionModel(tiny_experiment.model, 0)
    model.trained = True
    prompts = score_prompts(tiny_experiment, 0)
    first = export_sample(model, prompts, 4, tmp_path / "a")
    second = export_sample(model, prompts, 4, tmp_path / "b")
    assert len(first) == len(prompts)
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a" / "depth_000.pgm16").read_bytes() == (tmp_path / "b" / "depth_000.pgm16").read_bytes()


def test_export_derived_depth(tiny_model, tmp_path):
    prompts = score_prompts(ExperimentConfig(model=tiny_model.cfg, score_scenes=3), 0)
    paths = export_derived_depth(tiny_model, prompts, tmp_path)
    assert [p.name for p in paths] == ["depth_000.pgm16", "depth_001.pgm16", "depth_002.pgm16"]
    assert read_depth(paths[0]).shape == (8, 8)


def _desk(steps_s1, steps_s2):
    settings = TrainSettings(steps_s1=steps_s1, steps_s2=steps_s2, batch_size=8, val_every=250, val_size=64,
                             semantic_prefit_steps=300, codec_prefit_steps=600)
    return ExperimentConfig(model=PRESETS["desk"], train=settings, seeds=(0, 1, 2), score_scenes=32)


@pytest.mark.slow
def test_every_sharing_strategy_beats_no_sharing():
    result = ablate_sharing(_desk(500, 0))
    for name in ("uniform<none", "shallow<none", "deep<none"):
        assert result.verdicts[name]["holds"], name


@pytest.mark.slow
def test_additive_injection_beats_no_injection():
    result = ablate_inject(_desk(500, 1000))
    assert result.verdicts["add>none"]["holds"]
    assert result.verdicts["concat>none"]["holds"]
    assert result.verdicts["add>=concat"]["holds"] is not None


@pytest.mark.slow
def test_depth_loss_weight_sweep_direction():
    result = sweep_lambda(_desk(500, 1000))
    assert result.verdicts["depth_nonincreasing"]["holds"]
    assert result.verdicts["diff[2.0]>diff[0.5]"]["holds"]


@pytest.mark.slow
def test_spatial_transformer_beats_depth_probe():
    result = compare_probe(_desk(500, 0))
    assert result.verdicts["spatialfusion<probe"]["holds"]
    assert all(result.verdicts["spatialfusion<probe"]["per_seed"].values())
