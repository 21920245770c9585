import json
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

import typer
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

from .errors import SpatialFusionError
from .models.config import ExperimentConfig
from .models.models import AblationReport, FINE
from .numcore.array import set_checked
from .services import harness
from .services.scenegen import SceneGenerator
from .services.trainer import Trainer, load_model, plan_segments, run_training
from .utils.config import Config
from .utils.console import console, err_console, set_verbosity

app = typer.Typer(help="Geometry-conditioned diffusion on synthetic desk-scale scenes")

ConfigOption = typer.Option(None, "--config", "-c", help="YAML or JSON experiment config")
SeedOption = typer.Option(0, "--seed", "-s", help="Run seed")
SeedsOption = typer.Option(None, "--seeds", help="Comma-separated seeds (default: run.seeds)")


# Display help when no command is provided
@app.callback(invoke_without_command=True)
def main(
    ctx: typer.Context,
    log_level: str = typer.Option("WARNING", "--log-level", help="Logging level for service logs"),
):
    """Geometry-conditioned diffusion on synthetic desk-scale scenes"""
    set_verbosity(log_level)
    if ctx.invoked_subcommand is None:
        typer.echo(ctx.get_help())
        raise typer.Exit(code=2)


@contextmanager
def handle_errors():
    """Turn library failures into one `error:` line on stderr and exit code 1."""
    try:
        yield
    except (SpatialFusionError, OSError) as e:
        err_console.print(f"error: {e}", markup=False, highlight=False, soft_wrap=True)
        raise typer.Exit(code=1)


def load_config(path: Optional[Path]) -> ExperimentConfig:
    cfg = Config(path).experiment
    set_checked(cfg.checked)
    return cfg


def parse_seeds(seeds: Optional[str], cfg: ExperimentConfig) -> List[int]:
    if not seeds:
        return list(cfg.seeds)
    try:
        return [int(s) for s in seeds.split(",") if s.strip()]
    except ValueError:
        raise typer.BadParameter(f"seeds must be comma-separated integers, got '{seeds}'")


def run_dir(out: Optional[Path], cfg: ExperimentConfig, seed: int) -> Path:
    return out if out is not None else Path(cfg.out_dir) / f"seed{seed}"


def ablation_progress():
    return Progress(SpinnerColumn(), TextColumn("{task.description}"), TimeElapsedColumn(), console=console)


def print_ablation(report: AblationReport) -> None:
    metrics = sorted({m for means in report.means.values() for m in means})
    table = Table(show_header=True, header_style="bold magenta")
    table.add_column(report.axis, style="cyan")
    for metric in metrics:
        table.add_column(metric, justify="right")
    table.add_column("failed", justify="right")
    for variant in report.variants:
        failed = sum(1 for c in report.cells[variant].values() if c.get("status") != "ok")
        row = [variant]
        for metric in metrics:
            value = report.means.get(variant, {}).get(metric)
            row.append("-" if value is None else f"{value:.5f}")
        row.append(str(failed))
        table.add_row(*row)
    console.print(f"[bold]{report.axis} ablation over seeds {report.seeds}:[/bold]")
    console.print(table)
    for name, verdict in report.verdicts.items():
        holds = verdict["holds"]
        colour = "green" if holds else ("yellow" if holds is None or verdict.get("soft") else "red")
        label = {True: "holds", False: "fails", None: "undecided"}[holds]
        soft = " (soft)" if verdict.get("soft") else ""
        console.print(f"[{colour}]{name}{soft}: {label}[/{colour}]")


def finish_ablation(report: AblationReport, out: Optional[Path], cfg: ExperimentConfig, name: str) -> None:
    path = harness.write_report(report, out if out is not None else Path(cfg.out_dir) / name)
    print_ablation(report)
    console.print(f"[green]Report written to {path}[/green]")


@app.command("gen-data")
def gen_data(
    config: Optional[Path] = ConfigOption,
    seed: int = SeedOption,
    out: Path = typer.Option(..., "--out", "-o", help="Dataset directory"),
    count: int = typer.Option(100, "--count", "-n", min=1, help="Number of records"),
    val_fraction: float = typer.Option(0.1, "--val-fraction", min=0.0, max=1.0, help="Share tagged as val"),
    phase: str = typer.Option("fine", "--phase", help="Curriculum phase: coarse or fine"),
):
    """Export rendered scenes with prompts, depth maps and masks"""
    with handle_errors():
        cfg = load_config(config)
        if phase not in ("coarse", "fine"):
            raise typer.BadParameter(f"phase must be coarse or fine, got '{phase}'")
        index = harness.gen_data(cfg, seed, out, count, val_fraction, phase)
        console.print(f"[green]Wrote {count} records to {out} (index: {index.name})[/green]")


@app.command()
def train(
    config: Optional[Path] = ConfigOption,
    seed: int = SeedOption,
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Run directory (default: <run.out_dir>/seed<seed>)"),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Checkpoint to resume from"),
    stop_after: Optional[int] = typer.Option(None, "--stop-after", min=0, help="Stop after this global step"),
):
    """Run the two-stage training schedule for one seed"""
    with handle_errors():
        cfg = load_config(config)
        directory = run_dir(out, cfg, seed)
        segments = plan_segments(cfg.train)
        total = segments[-1].end if segments else 0

        with Progress(
            SpinnerColumn(),
            TextColumn("{task.description}"),
            BarColumn(),
            TextColumn("{task.completed}/{task.total}"),
            TimeElapsedColumn(),
            console=console,
        ) as progress:
            task = progress.add_task("training", total=total)

            def on_step(record):
                progress.update(
                    task,
                    completed=record.step + 1,
                    description=f"stage {record.stage} {record.phase} loss {record.l_total:.4f}",
                )

            result = run_training(cfg, seed, directory, resume=resume, stop_after=stop_after, on_step=on_step)

        table = Table(show_header=True, header_style="bold magenta")
        table.add_column("metric", style="cyan")
        table.add_column("value", justify="right")
        table.add_row("steps", str(len(result.log)))
        if result.final_val_depth_loss is not None:
            table.add_row("val depth loss", f"{result.final_val_depth_loss:.5f}")
        if result.final_val_diff_loss is not None:
            table.add_row("val diffusion loss", f"{result.final_val_diff_loss:.5f}")
        for key, value in sorted(result.prefit.items()):
            table.add_row(f"prefit {key}", f"{value:.5f}")
        table.add_row("adapter calls", str(result.adapter_calls))
        table.add_row("stream digest", result.stream_digest[:16])
        console.print(table)
        console.print(f"[green]Checkpoint written to {result.checkpoint_path}[/green]")


@app.command()
def sample(
    config: Optional[Path] = ConfigOption,
    seed: int = SeedOption,
    out: Path = typer.Option(..., "--out", "-o", help="Directory for sampled images and depth maps"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Default: <run.out_dir>/seed<seed>/final.spfz"),
    count: int = typer.Option(4, "--count", "-n", min=1, help="Number of prompts to sample"),
):
    """Sample images for held-out prompts from a trained checkpoint"""
    with handle_errors():
        cfg = load_config(config)
        path = checkpoint if checkpoint is not None else run_dir(None, cfg, seed) / "final.spfz"
        model = load_model(path, expected=cfg.model)
        prompts = SceneGenerator(cfg.model, seed).prompts(FINE, range(count), harness.SCORE_TASKS, stream="sample")
        written = harness.export_sample(model, prompts, seed, out)
        console.print(f"[green]Sampled {len(written)} images into {out}[/green]")


@app.command("export-depth")
def export_depth(
    config: Optional[Path] = ConfigOption,
    seed: int = SeedOption,
    out: Path = typer.Option(..., "--out", "-o", help="Directory for depth maps"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Default: <run.out_dir>/seed<seed>/final.spfz"),
    count: int = typer.Option(4, "--count", "-n", min=1, help="Number of prompts"),
):
    """Write the derived metric-depth maps of held-out prompts as 16-bit PGM"""
    with handle_errors():
        cfg = load_config(config)
        path = checkpoint if checkpoint is not None else run_dir(None, cfg, seed) / "final.spfz"
        model = load_model(path, expected=cfg.model)
        prompts = SceneGenerator(cfg.model, seed).prompts(FINE, range(count), harness.SCORE_TASKS, stream="sample")
        written = harness.export_derived_depth(model, prompts, out)
        console.print(f"[green]Wrote {len(written)} depth maps into {out}[/green]")


@app.command()
def probe(
    config: Optional[Path] = ConfigOption,
    seed: int = SeedOption,
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Run or report directory"),
    compare: bool = typer.Option(False, "--compare", help="Compare against Stage-1 training over run.seeds"),
    seeds: Optional[str] = SeedsOption,
):
    """Depth probe on frozen semantic states (the no-spatial-transformer baseline)"""
    with handle_errors():
        cfg = load_config(config)
        if compare:
            with ablation_progress() as progress:
                task = progress.add_task("probe comparison", total=None)
                report = harness.compare_probe(
                    cfg, parse_seeds(seeds, cfg),
                    progress=lambda label: progress.update(task, description=label),
                )
            finish_ablation(report, out, cfg, "probe")
            return
        trainer = Trainer(cfg.replace(train=cfg.train.replace(steps_s2=0)), seed,
                          run_dir(out, cfg, seed), objective="probe")
        result = trainer.run()
        console.print(f"[bold]Probe baseline, seed {seed}:[/bold] "
                      f"val depth loss [cyan]{result.final_val_depth_loss:.5f}[/cyan]")


@app.command("ablate-sharing")
def ablate_sharing(
    config: Optional[Path] = ConfigOption,
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Report directory"),
    seeds: Optional[str] = SeedsOption,
    strategies: str = typer.Option("none,shallow,deep,uniform", "--strategies", help="Comma-separated strategies"),
):
    """Stage-1 comparison of attention-sharing strategies"""
    with handle_errors():
        cfg = load_config(config)
        with ablation_progress() as progress:
            task = progress.add_task("sharing ablation", total=None)
            report = harness.ablate_sharing(
                cfg, [s.strip() for s in strategies.split(",") if s.strip()], parse_seeds(seeds, cfg),
                progress=lambda label: progress.update(task, description=label),
            )
        finish_ablation(report, out, cfg, "ablate-sharing")


@app.command("ablate-inject")
def ablate_inject(
    config: Optional[Path] = ConfigOption,
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Report directory"),
    seeds: Optional[str] = SeedsOption,
    modes: str = typer.Option("none,concat,add", "--modes", help="Comma-separated inject modes"),
):
    """Stage-2 comparison of depth injection modes from a shared Stage-1 checkpoint"""
    with handle_errors():
        cfg = load_config(config)
        with ablation_progress() as progress:
            task = progress.add_task("injection ablation", total=None)
            report = harness.ablate_inject(
                cfg, [m.strip() for m in modes.split(",") if m.strip()], parse_seeds(seeds, cfg),
                progress=lambda label: progress.update(task, description=label),
            )
        finish_ablation(report, out, cfg, "ablate-inject")


@app.command("sweep-lambda")
def sweep_lambda(
    config: Optional[Path] = ConfigOption,
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Report directory"),
    seeds: Optional[str] = SeedsOption,
    lambdas: str = typer.Option("0,0.1,0.5,1.0,2.0", "--lambdas", help="Comma-separated depth-loss weights"),
):
    """Stage-2 sweep of the depth-loss weight"""
    with handle_errors():
        cfg = load_config(config)
        try:
            values = [float(v) for v in lambdas.split(",") if v.strip()]
        except ValueError:
            raise typer.BadParameter(f"lambdas must be comma-separated numbers, got '{lambdas}'")
        with ablation_progress() as progress:
            task = progress.add_task("lambda sweep", total=None)
            report = harness.sweep_lambda(
                cfg, values, parse_seeds(seeds, cfg),
                progress=lambda label: progress.update(task, description=label),
            )
        finish_ablation(report, out, cfg, "sweep-lambda")


@app.command("compare-stages")
def compare_stages(
    config: Optional[Path] = ConfigOption,
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Report directory"),
    seeds: Optional[str] = SeedsOption,
):
    """Two-stage training against Stage 2 alone at the same step budget"""
    with handle_errors():
        cfg = load_config(config)
        with ablation_progress() as progress:
            task = progress.add_task("stage comparison", total=None)
            report = harness.compare_stages(
                cfg, parse_seeds(seeds, cfg),
                progress=lambda label: progress.update(task, description=label),
            )
        finish_ablation(report, out, cfg, "compare-stages")


@app.command()
def report(
    run_dirs: List[Path] = typer.Argument(None, help="Run or ablation directories"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Write the JSON report here"),
):
    """Aggregate run directories into one JSON report and a table"""
    with handle_errors():
        summary = harness.report(run_dirs or [])
        table = Table(show_header=True, header_style="bold magenta")
        table.add_column("metric", style="cyan")
        table.add_column("mean", justify="right")
        table.add_column("std", justify="right")
        table.add_column("runs", justify="right")
        for key, agg in summary["aggregate"].items():
            table.add_row(key, f"{agg['mean']:.5f}", f"{agg['std']:.5f}", str(agg["n"]))
        console.print(f"[bold]Report over {len(summary['runs'])} runs:[/bold]")
        console.print(table)
        text = json.dumps(summary, indent=2, sort_keys=True)
        if out is not None:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(text)
            console.print(f"[green]Report written to {out}[/green]")
        else:
            console.print_json(text)


if __name__ == "__main__":
    app()
