"""
Experiment harness: SpatialScore, ablation sweeps, the probe comparison,
run reports and dataset export.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import DataStreamMismatch, MissingRun, SpatialFusionError
from ..models.config import ExperimentConfig, SHARE_STRATEGIES, INJECT_MODES
from ..models.models import FINE, PHASES, AblationReport, SceneSpec
from ..numcore.array import no_grad
from ..numcore.rng import Rng
from ..utils.console import get_logger
from ..utils.imageio import export_depth, export_image, export_mask
from ..utils.tokenizer import PAD_ID, detokenize, tokenize
from .diffusion import sample
from .model import SpatialFusionModel
from .scenegen import SceneGenerator, coverage, render
from .trainer import TrainResult, Trainer, read_log

logger = get_logger(__name__)

TEMPLATE_TOLERANCE = 0.12
MIN_VISIBLE_PIXELS = 4
DEFAULT_LAMBDAS = (0.0, 0.1, 0.5, 1.0, 2.0)
SCORE_TASKS = {"t2i": 1.0}


# SpatialScore

def visible_ids(spec: SceneSpec, H: int, W: int) -> np.ndarray:
    """(H, W) index of the primitive each pixel shows, -1 for background."""
    depth = np.full((H, W), spec.background_z, dtype=np.float32)
    ids = np.full((H, W), -1, dtype=np.int64)
    for k, p in enumerate(spec.primitives):
        hit = coverage(p, H, W) & (np.float32(p.z) < depth)
        depth[hit] = np.float32(p.z)
        ids[hit] = k
    return ids


@dataclass
class SceneVerdict:
    satisfied: bool
    present: List[bool]
    depth_order_ok: bool
    template_error: float


def judge_scene(image: np.ndarray, depth: np.ndarray, prompt: np.ndarray) -> SceneVerdict:
    """
    Check one sample against the constraints its prompt states.

    Presence: each primitive visible in the reference render of the prompt
    (at least MIN_VISIBLE_PIXELS) must match its albedo within
    TEMPLATE_TOLERANCE in the sampled image. Depth order: for every pair with
    different stated depth bins, and every stated in-front-of/behind relation,
    the model's own D must order the two regions the same way.
    """
    spec = detokenize(prompt)
    H, W = depth.shape
    ids = visible_ids(spec, H, W)
    gray = image.mean(axis=-1)
    present, errors, mean_depth = [], [], {}
    for k, p in enumerate(spec.primitives):
        region = ids == k
        if region.sum() < MIN_VISIBLE_PIXELS:
            continue
        err = float(np.mean(np.abs(gray[region] - p.albedo)))
        errors.append(err)
        present.append(err <= TEMPLATE_TOLERANCE)
        mean_depth[k] = float(depth[region].mean())

    pairs: List[Tuple[int, int]] = []
    for a in mean_depth:
        for b in mean_depth:
            if a != b and spec.primitives[a].z < spec.primitives[b].z:
                pairs.append((a, b))
    for rel in spec.relations:
        if rel.a in mean_depth and rel.b in mean_depth:
            if rel.word == "in-front-of":
                pairs.append((rel.a, rel.b))
            elif rel.word == "behind":
                pairs.append((rel.b, rel.a))
    order_ok = all(mean_depth[a] < mean_depth[b] for a, b in pairs)
    template_error = float(np.mean(errors)) if errors else 0.0
    return SceneVerdict(
        satisfied=all(present) and order_ok,
        present=present,
        depth_order_ok=order_ok,
        template_error=template_error,
    )


@dataclass
class ScoreResult:
    spatial_score: float
    template_error: float
    verdicts: List[SceneVerdict] = field(default_factory=list)


def score_prompts(cfg: ExperimentConfig, seed: int) -> np.ndarray:
    """The fixed held-out prompts SpatialScore samples from."""
    generator = SceneGenerator(cfg.model, seed)
    return generator.prompts(FINE, range(cfg.score_scenes), SCORE_TASKS, stream="score")


def spatial_score(model: SpatialFusionModel, prompts: np.ndarray, seed: int, batch_size: int = 8) -> ScoreResult:
    """Fraction of prompts whose sample satisfies every stated constraint, plus mean template error."""
    verdicts: List[SceneVerdict] = []
    for lo in range(0, len(prompts), batch_size):
        chunk = prompts[lo:lo + batch_size]
        result = sample(model, chunk, Rng(seed, "score_noise", lo))
        for image, depth, prompt in zip(result.images, result.depths, chunk):
            verdicts.append(judge_scene(image, depth, prompt))
    if not verdicts:
        return ScoreResult(spatial_score=0.0, template_error=0.0)
    return ScoreResult(
        spatial_score=float(np.mean([v.satisfied for v in verdicts])),
        template_error=float(np.mean([v.template_error for v in verdicts])),
        verdicts=verdicts,
    )


# Ablations

def _seeds(cfg: ExperimentConfig, seeds: Optional[Sequence[int]]) -> List[int]:
    return [int(s) for s in (seeds if seeds is not None else cfg.seeds)]


def _mean(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def _cell(result: TrainResult, **extra) -> Dict[str, Any]:
    cell = {
        "status": "ok",
        "val_depth_loss": result.final_val_depth_loss,
        "val_diff_loss": result.final_val_diff_loss,
        "stream_digest": result.stream_digest,
        "adapter_calls": result.adapter_calls,
    }
    cell.update(extra)
    return cell


def _failed(error: Exception) -> Dict[str, Any]:
    logger.warning(f"ablation cell failed: {error}")
    return {"status": "failed", "error": str(error)}


def _summarise(report: AblationReport, metrics: Sequence[str]) -> None:
    for variant in report.variants:
        report.means[variant] = {}
        for metric in metrics:
            values = [
                c[metric] for c in report.cells[variant].values()
                if c.get("status") == "ok" and c.get(metric) is not None
            ]
            mean = _mean(values)
            if mean is not None:
                report.means[variant][metric] = mean


def _check_streams(report: AblationReport) -> None:
    """Every ok cell of one seed must have consumed the same batch stream."""
    for seed in report.seeds:
        digests = {
            report.cells[v][str(seed)]["stream_digest"]
            for v in report.variants if report.cells[v][str(seed)].get("status") == "ok"
        }
        if len(digests) > 1:
            raise DataStreamMismatch(f"seed {seed}: ablation variants consumed different batch streams")


def _verdict(report: AblationReport, name: str, metric: str, better: str, worse: str,
             strict: bool = True, soft: bool = False, lower_is_better: bool = True) -> None:
    """Record whether `better` beats `worse` on the mean of `metric`, with per-seed detail."""
    means = report.means
    a, b = means.get(better, {}).get(metric), means.get(worse, {}).get(metric)
    per_seed = {}
    for seed in report.seeds:
        ca, cb = report.cells[better][str(seed)], report.cells[worse][str(seed)]
        if ca.get(metric) is None or cb.get(metric) is None:
            per_seed[str(seed)] = None
        else:
            per_seed[str(seed)] = _ordered(ca[metric], cb[metric], strict, lower_is_better)
    holds = None if a is None or b is None else _ordered(a, b, strict, lower_is_better)
    report.verdicts[name] = {"metric": metric, "holds": holds, "soft": soft, "per_seed": per_seed}


def _ordered(a: float, b: float, strict: bool, lower_is_better: bool) -> bool:
    if lower_is_better:
        return a < b if strict else a <= b
    return a > b if strict else a >= b


def _stage1_only(cfg: ExperimentConfig) -> ExperimentConfig:
    return cfg.replace(train=cfg.train.replace(steps_s2=0))


def _progress_sink(progress: Optional[Callable[[str], None]], label: str) -> None:
    if progress is not None:
        progress(label)


def ablate_sharing(cfg: ExperimentConfig, strategies: Sequence[str] = SHARE_STRATEGIES,
                   seeds: Optional[Sequence[int]] = None,
                   progress: Optional[Callable[[str], None]] = None) -> AblationReport:
    """Stage-1 runs per share strategy and seed, compared on final validation depth loss."""
    seeds = _seeds(cfg, seeds)
    report = AblationReport(axis="share_strategy", variants=list(strategies), seeds=seeds)
    base = _stage1_only(cfg)
    for strategy in strategies:
        report.cells[strategy] = {}
        variant = base.replace(model=base.model.replace(share_strategy=strategy))
        for seed in seeds:
            _progress_sink(progress, f"share_strategy={strategy} seed={seed}")
            try:
                report.cells[strategy][str(seed)] = _cell(Trainer(variant, seed).run())
            except SpatialFusionError as e:
                report.cells[strategy][str(seed)] = _failed(e)
    _check_streams(report)
    _summarise(report, ["val_depth_loss"])
    for shared in ("uniform", "shallow", "deep"):
        if shared in strategies and "none" in strategies:
            _verdict(report, f"{shared}<none", "val_depth_loss", shared, "none")
    return report


def _continue_from(cfg: ExperimentConfig, seed: int, stage1: TrainResult) -> TrainResult:
    trainer = Trainer(cfg, seed)
    trainer.restore(stage1.checkpoint)
    return trainer.run()


def ablate_inject(cfg: ExperimentConfig, modes: Sequence[str] = INJECT_MODES,
                  seeds: Optional[Sequence[int]] = None,
                  progress: Optional[Callable[[str], None]] = None) -> AblationReport:
    """
    One Stage-1 checkpoint per seed, then Stage 2 per inject mode.

    Reports validation diffusion loss, SpatialScore and the number of adapter
    calls made by Stage-2 training steps.
    """
    seeds = _seeds(cfg, seeds)
    report = AblationReport(axis="inject_mode", variants=list(modes), seeds=seeds)
    for mode in modes:
        report.cells[mode] = {}
    for seed in seeds:
        _progress_sink(progress, f"stage 1 seed={seed}")
        stage1 = Trainer(_stage1_only(cfg), seed).run()
        prompts = score_prompts(cfg, seed)
        for mode in modes:
            _progress_sink(progress, f"inject_mode={mode} seed={seed}")
            variant = cfg.replace(model=cfg.model.replace(inject_mode=mode))
            try:
                result = _continue_from(variant, seed, stage1)
                score = spatial_score(result.model, prompts, seed)
                report.cells[mode][str(seed)] = _cell(
                    result, spatial_score=score.spatial_score, template_error=score.template_error)
            except SpatialFusionError as e:
                report.cells[mode][str(seed)] = _failed(e)
    _check_streams(report)
    _summarise(report, ["val_diff_loss", "val_depth_loss", "spatial_score", "template_error"])
    if "add" in modes and "none" in modes:
        _verdict(report, "add>none", "spatial_score", "add", "none", lower_is_better=False)
    if "add" in modes and "concat" in modes:
        _verdict(report, "add>=concat", "spatial_score", "add", "concat", strict=False, soft=True,
                 lower_is_better=False)
    if "concat" in modes and "none" in modes:
        _verdict(report, "concat>none", "spatial_score", "concat", "none", lower_is_better=False)
    return report


def sweep_lambda(cfg: ExperimentConfig, lambdas: Sequence[float] = DEFAULT_LAMBDAS,
                 seeds: Optional[Sequence[int]] = None,
                 progress: Optional[Callable[[str], None]] = None) -> AblationReport:
    """Stage 2 per depth-loss weight from a shared Stage-1 checkpoint per seed."""
    seeds = _seeds(cfg, seeds)
    names = [str(float(lam)) for lam in lambdas]
    report = AblationReport(axis="lambda", variants=names, seeds=seeds)
    for name in names:
        report.cells[name] = {}
    for seed in seeds:
        _progress_sink(progress, f"stage 1 seed={seed}")
        stage1 = Trainer(_stage1_only(cfg), seed).run()
        for lam, name in zip(lambdas, names):
            _progress_sink(progress, f"lambda={name} seed={seed}")
            variant = cfg.replace(model=cfg.model.replace(lam=float(lam)))
            try:
                report.cells[name][str(seed)] = _cell(_continue_from(variant, seed, stage1))
            except SpatialFusionError as e:
                report.cells[name][str(seed)] = _failed(e)
    _check_streams(report)
    _summarise(report, ["val_depth_loss", "val_diff_loss"])

    ordered = sorted(zip(lambdas, names))
    depth_means = [report.means[n].get("val_depth_loss") for _, n in ordered]
    monotone = None
    if all(m is not None for m in depth_means):
        monotone = all(b <= a for a, b in zip(depth_means, depth_means[1:]))
    report.verdicts["depth_nonincreasing"] = {
        "metric": "val_depth_loss", "holds": monotone, "soft": False,
        "per_lambda": dict(zip([n for _, n in ordered], depth_means)),
    }
    if "0.5" in names and len(ordered) > 1 and ordered[-1][1] != "0.5":
        _verdict(report, f"diff[{ordered[-1][1]}]>diff[0.5]", "val_diff_loss", ordered[-1][1], "0.5",
                 lower_is_better=False)
    return report


def compare_probe(cfg: ExperimentConfig, seeds: Optional[Sequence[int]] = None,
                  progress: Optional[Callable[[str], None]] = None) -> AblationReport:
    """Depth probe on frozen semantic states vs Stage-1 training at the same step budget."""
    seeds = _seeds(cfg, seeds)
    variants = ["probe", "spatialfusion"]
    report = AblationReport(axis="depth_source", variants=variants, seeds=seeds,
                            cells={v: {} for v in variants})
    base = _stage1_only(cfg)
    for seed in seeds:
        for variant in variants:
            _progress_sink(progress, f"{variant} seed={seed}")
            try:
                result = Trainer(base, seed, objective=variant).run()
                report.cells[variant][str(seed)] = _cell(result)
            except SpatialFusionError as e:
                report.cells[variant][str(seed)] = _failed(e)
    _check_streams(report)
    _summarise(report, ["val_depth_loss"])
    _verdict(report, "spatialfusion<probe", "val_depth_loss", "spatialfusion", "probe")
    return report


def compare_stages(cfg: ExperimentConfig, seeds: Optional[Sequence[int]] = None,
                   progress: Optional[Callable[[str], None]] = None) -> AblationReport:
    """Two-stage training vs Stage 2 alone at the same total step budget."""
    seeds = _seeds(cfg, seeds)
    total = cfg.train.steps_s1 + cfg.train.steps_s2
    variants = {
        "two_stage": cfg,
        "stage2_only": cfg.replace(train=cfg.train.replace(steps_s1=0, steps_s2=total)),
    }
    report = AblationReport(axis="stages", variants=list(variants), seeds=seeds,
                            cells={v: {} for v in variants})
    for seed in seeds:
        for name, variant in variants.items():
            _progress_sink(progress, f"{name} seed={seed}")
            try:
                report.cells[name][str(seed)] = _cell(Trainer(variant, seed).run())
            except SpatialFusionError as e:
                report.cells[name][str(seed)] = _failed(e)
    _summarise(report, ["val_depth_loss", "val_diff_loss"])
    _verdict(report, "two_stage<stage2_only", "val_depth_loss", "two_stage", "stage2_only")
    return report


def write_report(report: AblationReport, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "ablation.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return path


# Reports

def _flatten(prefix: str, value: Any, out: Dict[str, float]) -> None:
    if isinstance(value, dict):
        for k, v in value.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, out)
    elif isinstance(value, (int, float)) and not isinstance(value, bool):
        out[prefix] = float(value)


def summarise_run(run_dir: Path) -> Dict[str, Any]:
    """Metrics of one run directory: its AblationReport means, or its TrainLog's final values."""
    if not run_dir.is_dir():
        raise MissingRun(f"run directory '{run_dir}' does not exist")
    ablation = run_dir / "ablation.json"
    trainlog = run_dir / "trainlog.jsonl"
    metrics: Dict[str, float] = {}
    kind = None
    if ablation.exists():
        data = json.loads(ablation.read_text())
        _flatten("", data.get("means", {}), metrics)
        kind = f"ablation:{data.get('axis')}"
    elif trainlog.exists():
        records = read_log(trainlog)
        if not records:
            raise MissingRun(f"run directory '{run_dir}' has an empty trainlog")
        last = records[-1]
        metrics["l_depth"] = last.l_depth
        metrics["l_total"] = last.l_total
        if last.l_diff is not None:
            metrics["l_diff"] = last.l_diff
        vals = [r for r in records if r.val_depth_loss is not None]
        if vals:
            metrics["val_depth_loss"] = vals[-1].val_depth_loss
            if vals[-1].val_diff_loss is not None:
                metrics["val_diff_loss"] = vals[-1].val_diff_loss
        metrics["steps"] = float(len(records))
        kind = "train"
    else:
        raise MissingRun(f"run directory '{run_dir}' holds no trainlog.jsonl or ablation.json")
    return {"kind": kind, "metrics": metrics}


def report(run_dirs: Sequence[Path]) -> Dict[str, Any]:
    """
    Aggregate run directories into mean/std per metric.

    Raises:
        MissingRun: No directories, or one without run artifacts
    """
    if not run_dirs:
        raise MissingRun("no run directories given")
    runs = {str(d): summarise_run(Path(d)) for d in run_dirs}
    keys = sorted({k for r in runs.values() for k in r["metrics"]})
    aggregate = {}
    for key in keys:
        values = [r["metrics"][key] for r in runs.values() if key in r["metrics"]]
        aggregate[key] = {"mean": float(np.mean(values)), "std": float(np.std(values)), "n": len(values)}
    return {"schema_version": 1, "runs": runs, "aggregate": aggregate}


# Dataset export

def gen_data(cfg: ExperimentConfig, seed: int, out_dir: Path, count: int, val_fraction: float = 0.1,
             phase: str = "fine") -> Path:
    """
    Write `count` records under out_dir/<index>/ and an index.json with split tags.

    Each record holds prompt.txt (space-separated ids), image.ppm, depth.pgm16,
    mask.pgm and, for edit tasks, source.ppm.
    """
    generator = SceneGenerator(cfg.model, seed)
    H, W = cfg.model.H, cfg.model.W
    n_val = int(round(count * val_fraction))
    entries = []
    for index in range(count):
        split = "val" if index >= count - n_val else "train"
        pair = generator.pair(PHASES[phase], index, cfg.train.task_mix, stream=split)
        image, depth, mask = render(pair.target, H, W)
        record = out_dir / f"{index:05d}"
        record.mkdir(parents=True, exist_ok=True)
        ids = tokenize(pair.target).ids
        (record / "prompt.txt").write_text(" ".join(str(i) for i in ids) + "\n")
        export_image(image, record / "image.ppm")
        export_depth(depth, record / "depth.pgm16")
        export_mask(mask, record / "mask.pgm")
        files = ["prompt.txt", "image.ppm", "depth.pgm16", "mask.pgm"]
        if pair.source is not None:
            export_image(render(pair.source, H, W)[0], record / "source.ppm")
            files.append("source.ppm")
        entries.append({
            "record": record.name,
            "split": split,
            "task": pair.target.task_tag,
            "files": files,
        })
    index_path = out_dir / "index.json"
    index_path.write_text(json.dumps({"schema_version": 1, "seed": seed, "records": entries}, indent=2))
    return index_path


def export_sample(model: SpatialFusionModel, prompts: np.ndarray, seed: int, out_dir: Path) -> List[Path]:
    """Sample each prompt and write image_<k>.ppm, depth_<k>.pgm16 and prompt_<k>.txt."""
    result = sample(model, prompts, Rng(seed, "sample"))
    written = []
    for k, (image, depth, prompt) in enumerate(zip(result.images, result.depths, prompts)):
        export_image(image, out_dir / f"image_{k:03d}.ppm")
        export_depth(depth, out_dir / f"depth_{k:03d}.pgm16")
        ids = [int(i) for i in prompt if int(i) != PAD_ID]
        (out_dir / f"prompt_{k:03d}.txt").write_text(" ".join(map(str, ids)) + "\n")
        written.append(out_dir / f"image_{k:03d}.ppm")
    return written


def export_derived_depth(model: SpatialFusionModel, prompts: np.ndarray, out_dir: Path) -> List[Path]:
    """Write the model's derived depth for each prompt as depth_<k>.pgm16."""
    with no_grad():
        depth = model.depth_for_prompts(prompts).data
    paths = []
    for k, d in enumerate(depth):
        path = out_dir / f"depth_{k:03d}.pgm16"
        export_depth(d, path)
        paths.append(path)
    return paths
