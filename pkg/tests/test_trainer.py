"""
Tests for freezing, the joint objective, the step schedule and resumable training.
"""
import numpy as np
import pytest

from app.errors import ConfigError, FrozenParamGradApplied
from app.models.config import PRESETS, ExperimentConfig, TrainSettings
from app.models.models import COARSE, FINE
from app.numcore import array as ops
from app.numcore.array import constant, parameter
from app.numcore.optim import OptimizerState
from app.numcore.rng import Rng
from app.services.checkpoint import encode_checkpoint, load_checkpoint
from app.services.model import SpatialFusionModel
from app.services.scenegen import SceneGenerator
from app.services.trainer import (
    FreezeSpec,
    Trainer,
    freeze_ledger,
    joint_loss,
    load_model,
    plan_segments,
    read_log,
    run_training,
    stage1_step,
    stage2_step,
    verify_ledger,
)


def _digests(model):
    return {g: model.store.digest(g) for g in model.store.groups()}


def test_plan_segments(tiny_settings):
    plan = [(s.stage, s.phase, s.start, s.end) for s in plan_segments(tiny_settings)]
    assert plan == [(1, "coarse", 0, 2), (1, "fine", 2, 4), (2, "coarse", 4, 6), (2, "fine", 6, 8)]

    probe = plan_segments(tiny_settings, "probe")
    assert [(s.stage, s.start, s.end) for s in probe] == [(1, 0, 2), (1, 2, 4)]

    stage2_only = plan_segments(tiny_settings.replace(steps_s1=0, phase_split=1.0))
    assert [(s.stage, s.phase, s.start, s.end) for s in stage2_only] == [(2, "coarse", 0, 4)]


@pytest.mark.parametrize("lam", [0.0, 0.5, 2.0])
def test_joint_loss_arithmetic(lam):
    total = joint_loss(constant(np.array(1.25)), constant(np.array(3.0)), lam)
    assert total.item() == pytest.approx(1.25 + lam * 3.0)


def test_joint_loss_rejects_negative_lambda():
    with pytest.raises(ConfigError):
        joint_loss(constant(np.array(1.0)), constant(np.array(1.0)), -0.1)


def test_zero_lambda_zeroes_depth_gradient():
    p = parameter(np.array([1.0, -2.0, 3.0]), name="p")
    q = parameter(np.array([0.5, 0.5]), name="q")
    total = joint_loss(ops.sum_(q * q), ops.sum_(p * p), 0.0)
    total.backward()
    assert np.array_equal(p.grad, np.zeros(3, dtype=np.float32))
    assert np.allclose(q.grad, [1.0, 1.0])


def test_freeze_groups(tiny_cfg):
    assert FreezeSpec.stage1().trainable == {"spatial", "queries", "depth_head"}
    assert "adapter" in FreezeSpec.stage2(tiny_cfg).trainable
    assert "fusion" not in FreezeSpec.stage2(tiny_cfg).trainable
    assert "fusion" in FreezeSpec.stage2(tiny_cfg.replace(inject_mode="concat")).trainable
    assert "adapter" not in FreezeSpec.stage2(tiny_cfg.replace(inject_mode="none")).trainable
    assert "semantic" not in FreezeSpec.stage2(tiny_cfg).trainable


def test_stage1_leaves_frozen_groups_untouched(tiny_cfg):
    model = SpatialFusionModel(tiny_cfg, 0)
    gen = SceneGenerator(tiny_cfg, 0)
    opt = OptimizerState()
    freeze = FreezeSpec.stage1()
    before = _digests(model)
    for step in range(100):
        batch = gen.make_batch(COARSE, [2 * step, 2 * step + 1])
        stage1_step(model, batch, freeze, opt, step)
    after = _digests(model)
    for group in model.store.groups():
        if group in freeze.trainable:
            assert after[group] != before[group], group
        else:
            assert after[group] == before[group], group


def test_stage2_leaves_backbones_untouched(tiny_cfg):
    model = SpatialFusionModel(tiny_cfg, 0)
    gen = SceneGenerator(tiny_cfg, 0)
    opt = OptimizerState()
    rng = Rng(0, "trainer")
    before = _digests(model)
    for step in range(100):
        stage2_step(model, gen.make_batch(FINE, [step]), FreezeSpec.stage2(tiny_cfg), opt, 0.5, rng, step)
    after = _digests(model)
    for group in ("semantic", "codec", "image_encoder", "probe", "fusion"):
        assert after[group] == before[group], group
    assert after["dit"] != before["dit"]
    assert after["adapter"] != before["adapter"]


def test_ledger_catches_a_changed_group(tiny_model):
    ledger = freeze_ledger(tiny_model.store, ["semantic"])
    name = next(iter(tiny_model.store.group("semantic")))
    tiny_model.store[name].data = tiny_model.store[name].data + 1.0
    with pytest.raises(FrozenParamGradApplied) as err:
        verify_ledger(tiny_model.store, ledger)
    assert err.value.group == "semantic"


def test_stage2_record_total(tiny_cfg):
    model = SpatialFusionModel(tiny_cfg, 1)
    batch = SceneGenerator(tiny_cfg, 1).make_batch(FINE, range(2))
    record = stage2_step(model, batch, FreezeSpec.stage2(tiny_cfg), OptimizerState(), 2.0, Rng(1, "trainer"))
    assert record.stage == 2
    assert record.l_total == pytest.approx(record.l_diff + 2.0 * record.l_depth)
    assert record.grad_norm > 0


def test_adapter_is_never_called_without_injection(tiny_experiment):
    cfg = tiny_experiment.replace(model=tiny_experiment.model.replace(inject_mode="none"))
    result = Trainer(cfg, 0).run()
    assert result.adapter_calls == 0
    assert result.model.adapter.calls == 0


def test_adapter_called_once_per_stage2_step(tiny_experiment):
    result = Trainer(tiny_experiment, 0).run()
    assert result.adapter_calls == tiny_experiment.train.steps_s2


def test_runs_are_reproducible(tiny_experiment):
    a = Trainer(tiny_experiment, 3).run()
    b = Trainer(tiny_experiment, 3).run()
    assert encode_checkpoint(a.checkpoint) == encode_checkpoint(b.checkpoint)
    assert a.stream_digest == b.stream_digest


def test_variants_share_the_batch_stream(tiny_experiment):
    add = Trainer(tiny_experiment, 0).run()
    concat = Trainer(tiny_experiment.replace(model=tiny_experiment.model.replace(inject_mode="concat")), 0).run()
    assert add.stream_digest == concat.stream_digest


def test_resume_replays_the_same_run(tiny_experiment, tmp_path):
    full = Trainer(tiny_experiment, 0).run()

    first = run_training(tiny_experiment, 0, tmp_path, stop_after=3)
    assert len(first.log) == 3
    assert first.checkpoint_path == tmp_path / "latest.spfz"
    resumed = run_training(tiny_experiment, 0, tmp_path, resume=first.checkpoint_path)

    assert [r.replay_dict() for r in resumed.log] == [r.replay_dict() for r in full.log]
    assert encode_checkpoint(resumed.checkpoint) == encode_checkpoint(full.checkpoint)


def test_training_writes_artifacts(tiny_experiment, tmp_path):
    result = run_training(tiny_experiment, 0, tmp_path)
    for name in ("stage1-coarse.spfz", "stage1-fine.spfz", "stage2-coarse.spfz", "stage2-fine.spfz",
                 "final.spfz", "trainlog.jsonl"):
        assert (tmp_path / name).exists(), name

    log = read_log(tmp_path / "trainlog.jsonl")
    assert [r.step for r in log] == list(range(8))
    assert [r.stage for r in log] == [1] * 4 + [2] * 4
    assert all(r.l_diff is None for r in log[:4])
    assert log[-1].val_depth_loss == pytest.approx(result.final_val_depth_loss)
    assert result.final_val_diff_loss is not None
    assert "codec_mae" in result.prefit

    ckpt = load_checkpoint(tmp_path / "final.spfz", expected=tiny_experiment.model)
    assert (ckpt.step, ckpt.stage, ckpt.phase) == (8, 2, "fine")
    model = load_model(tmp_path / "final.spfz")
    assert model.trained
    for name, value in result.model.store.state_dict().items():
        assert np.array_equal(model.store[name].data, value)


def test_probe_objective_trains_only_the_probe(tiny_experiment):
    trainer = Trainer(tiny_experiment, 0, objective="probe")
    before = _digests(trainer.model)
    result = trainer.run()
    after = _digests(result.model)
    assert len(result.log) == tiny_experiment.train.steps_s1
    assert after["probe"] != before["probe"]
    assert after["spatial"] == before["spatial"]
    assert after["dit"] == before["dit"]


def test_unknown_objective(tiny_experiment):
    with pytest.raises(ConfigError):
        Trainer(tiny_experiment, 0, objective="distill")


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stage1_halves_depth_loss(seed):
    settings = TrainSettings(steps_s1=500, steps_s2=0, batch_size=8, val_every=100, val_size=64,
                             semantic_prefit_steps=300, codec_prefit_steps=0)
    result = Trainer(ExperimentConfig(model=PRESETS["desk"], train=settings, seeds=(seed,)), seed).run()
    first, last = result.validations[0].depth_loss, result.validations[-1].depth_loss
    assert last <= 0.5 * first
