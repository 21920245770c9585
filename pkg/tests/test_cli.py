"""
Tests for the spatialfusion command-line interface.
"""
import json

import pytest
from typer.testing import CliRunner

from app.main import app
from app.models.models import AblationReport

runner = CliRunner()

TINY = {
    "schema_version": 1,
    "model": {"preset": "tiny"},
    "train": {
        "steps_s1": 2,
        "steps_s2": 2,
        "batch_size": 2,
        "val_every": 2,
        "val_size": 2,
        "semantic_prefit_steps": 1,
        "codec_prefit_steps": 1,
        "prefit_batch_size": 2,
    },
    "run": {"seeds": [0], "score_scenes": 2},
    "numerics": {"checked": True},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def _error_lines(result):
    return [line for line in result.output.splitlines() if line.startswith("error:")]


def test_no_command_shows_help():
    result = runner.invoke(app, [])
    assert result.exit_code == 2
    assert "train" in result.output


def test_bad_flag_is_a_usage_error():
    result = runner.invoke(app, ["train", "--bogus"])
    assert result.exit_code == 2


def test_bad_phase_is_a_usage_error(tiny_config, tmp_path):
    result = runner.invoke(app, ["gen-data", "-c", str(tiny_config), "--out", str(tmp_path / "d"), "--phase", "mid"])
    assert result.exit_code == 2


def test_unknown_config_key_exits_with_one_error_line(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("model:\n  lamda: 0.5\n")
    result = runner.invoke(app, ["train", "-c", str(path), "--out", str(tmp_path / "run")])
    assert result.exit_code == 1
    lines = _error_lines(result)
    assert len(lines) == 1
    assert "model.lamda" in lines[0]


def test_wrong_value_type_exits_with_one_error_line(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("model:\n  M: x\n")
    result = runner.invoke(app, ["gen-data", "-c", str(path), "--out", str(tmp_path / "d")])
    assert result.exit_code == 1
    assert not isinstance(result.exception, TypeError)
    lines = _error_lines(result)
    assert len(lines) == 1
    assert "model.M" in lines[0]


def test_missing_checkpoint(tiny_config, tmp_path):
    result = runner.invoke(app, ["sample", "-c", str(tiny_config), "--out", str(tmp_path / "s"),
                                 "--checkpoint", str(tmp_path / "absent.spfz")])
    assert result.exit_code == 1
    assert len(_error_lines(result)) == 1


def test_report_without_runs():
    result = runner.invoke(app, ["report"])
    assert result.exit_code == 1
    assert _error_lines(result) == ["error: no run directories given"]


def test_train_then_sample(tiny_config, tmp_path):
    run = tmp_path / "run"
    result = runner.invoke(app, ["train", "-c", str(tiny_config), "--seed", "0", "--out", str(run)])
    assert result.exit_code == 0, result.output
    assert (run / "final.spfz").exists()
    assert (run / "trainlog.jsonl").exists()

    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        result = runner.invoke(app, ["sample", "-c", str(tiny_config), "--checkpoint", str(run / "final.spfz"),
                                     "--out", str(out), "--count", "2"])
        assert result.exit_code == 0, result.output
        outputs.append(out)
    names = sorted(p.name for p in outputs[0].iterdir())
    assert names == sorted(p.name for p in outputs[1].iterdir())
    assert "image_000.ppm" in names and "depth_001.pgm16" in names
    for name in names:
        assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()

    result = runner.invoke(app, ["export-depth", "-c", str(tiny_config), "--checkpoint", str(run / "final.spfz"),
                                 "--out", str(tmp_path / "depth"), "--count", "1"])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "depth" / "depth_000.pgm16").exists()

    result = runner.invoke(app, ["report", str(run), "--out", str(tmp_path / "report.json")])
    assert result.exit_code == 0, result.output
    summary = json.loads((tmp_path / "report.json").read_text())
    assert summary["aggregate"]["steps"]["mean"] == 4.0


def test_resume_with_stop_after(tiny_config, tmp_path):
    run = tmp_path / "run"
    result = runner.invoke(app, ["train", "-c", str(tiny_config), "--out", str(run), "--stop-after", "1"])
    assert result.exit_code == 0, result.output
    assert (run / "latest.spfz").exists()
    result = runner.invoke(app, ["train", "-c", str(tiny_config), "--out", str(run),
                                 "--resume", str(run / "latest.spfz")])
    assert result.exit_code == 0, result.output
    assert (run / "final.spfz").exists()


def test_gen_data(tiny_config, tmp_path):
    out = tmp_path / "data"
    result = runner.invoke(app, ["gen-data", "-c", str(tiny_config), "--out", str(out), "--count", "3"])
    assert result.exit_code == 0, result.output
    index = json.loads((out / "index.json").read_text())
    assert len(index["records"]) == 3


def test_ablation_command_writes_report(tiny_config, tmp_path, mocker):
    canned = AblationReport(
        axis="share_strategy",
        variants=["none", "uniform"],
        seeds=[0, 1],
        cells={v: {"0": {"status": "ok"}, "1": {"status": "ok"}} for v in ("none", "uniform")},
        means={"none": {"val_depth_loss": 2.0}, "uniform": {"val_depth_loss": 1.5}},
        verdicts={"uniform<none": {"metric": "val_depth_loss", "holds": True, "soft": False, "per_seed": {}}},
    )
    ablate = mocker.patch("app.main.harness.ablate_sharing", return_value=canned)
    out = tmp_path / "ablation"
    result = runner.invoke(app, ["ablate-sharing", "-c", str(tiny_config), "--out", str(out),
                                 "--seeds", "0,1", "--strategies", "none,uniform"])
    assert result.exit_code == 0, result.output
    args = ablate.call_args.args
    assert args[1] == ["none", "uniform"]
    assert args[2] == [0, 1]
    assert "uniform<none: holds" in result.output
    assert AblationReport.from_dict(json.loads((out / "ablation.json").read_text())) == canned


def test_bad_seed_list(tiny_config, tmp_path):
    result = runner.invoke(app, ["ablate-sharing", "-c", str(tiny_config), "--seeds", "a,b"])
    assert result.exit_code == 2
