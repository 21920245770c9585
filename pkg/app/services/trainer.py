"""
Two-stage training: geometric pre-training with frozen backbones, then joint
geometry-guided diffusion training, each split into a coarse and a fine
curriculum phase.
"""
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Tuple

import numpy as np

from ..errors import ConfigError, FrozenParamGradApplied
from ..models.config import ExperimentConfig, ModelConfig, TrainSettings
from ..models.models import COARSE, FINE, PHASES, Batch, TrainRecord
from ..numcore.array import Array, no_grad
from ..numcore.optim import OptimizerState, adam_step, clip_grads
from ..numcore.params import ParameterStore
from ..numcore.rng import Rng
from ..utils.console import get_logger
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .diffusion import diffusion_loss, fuse_latent, q_sample
from .geometry import depth_loss
from .model import SpatialFusionModel
from .scenegen import SceneGenerator

logger = get_logger(__name__)

OBJECTIVES = ("spatialfusion", "probe")


# Freezing

@dataclass(frozen=True)
class FreezeSpec:
    """The parameter groups a step may update; every other group is frozen."""
    trainable: FrozenSet[str]

    @classmethod
    def stage1(cls) -> "FreezeSpec":
        return cls(frozenset({"spatial", "queries", "depth_head"}))

    @classmethod
    def stage2(cls, cfg: ModelConfig) -> "FreezeSpec":
        groups = {"spatial", "queries", "depth_head", "dit"}
        if cfg.inject_mode != "none":
            groups.add("adapter")
        if cfg.inject_mode == "concat":
            groups.add("fusion")
        return cls(frozenset(groups))

    @classmethod
    def probe(cls) -> "FreezeSpec":
        return cls(frozenset({"probe", "depth_head"}))

    @classmethod
    def only(cls, *groups: str) -> "FreezeSpec":
        return cls(frozenset(groups))

    def apply(self, store: ParameterStore) -> None:
        store.set_trainable(self.trainable)

    def frozen_groups(self, store: ParameterStore) -> List[str]:
        return [g for g in store.groups() if g not in self.trainable]


def freeze_ledger(store: ParameterStore, groups: Iterable[str]) -> Dict[str, str]:
    return {g: store.digest(g) for g in groups}


def verify_ledger(store: ParameterStore, ledger: Dict[str, str]) -> None:
    for group, digest in ledger.items():
        if store.digest(group) != digest:
            raise FrozenParamGradApplied(group)


def apply_update(store: ParameterStore, freeze: FreezeSpec, opt: OptimizerState, loss: Array,
                 grad_clip: Optional[float], verify_freeze: bool = True) -> float:
    """backward, clip, Adam; frozen groups are hashed before and checked after."""
    ledger = freeze_ledger(store, freeze.frozen_groups(store)) if verify_freeze else {}
    loss.backward()
    params = store.trainable()
    norm = clip_grads(params, grad_clip)
    adam_step(params, opt)
    if verify_freeze:
        verify_ledger(store, ledger)
    return norm


# Losses

@dataclass
class JointLoss:
    total: Array
    diff: Array
    depth: Array


def joint_loss(l_diff: Array, l_depth: Array, lam: float) -> Array:
    """L_total = L_diff + lam * L_depth; the depth term stays in the graph at lam = 0."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return l_diff + l_depth * float(lam)


def stage1_loss(model: SpatialFusionModel, batch: Batch) -> Array:
    sem = model.semantic.forward(batch.prompts)
    depth = model.derive_depth(sem, batch.edit_sources)
    return depth_loss(depth, batch.depths, batch.masks)


def probe_loss(model: SpatialFusionModel, batch: Batch) -> Array:
    sem = model.semantic.forward(batch.prompts)
    return depth_loss(model.probe_depth(sem), batch.depths, batch.masks)


def stage2_losses(model: SpatialFusionModel, batch: Batch, lam: float, t: np.ndarray, eps: np.ndarray) -> JointLoss:
    """
    Joint objective for one batch with explicit timesteps and noise.

    D is derived on the fly, passed through the adapter (unless injection is
    off), fused into q_sample(z0, t, eps) and the DiT predicts eps.
    """
    cfg = model.cfg
    with no_grad():
        z0 = model.codec.encode(batch.images).data
    z_t = q_sample(z0, t, eps, model.schedule)
    sem = model.semantic.forward(batch.prompts)
    depth = model.derive_depth(sem, batch.edit_sources)
    l_depth = depth_loss(depth, batch.depths, batch.masks)
    f_depth = model.adapter(depth) if cfg.inject_mode != "none" else None
    z_hat = fuse_latent(z_t, f_depth, cfg.inject_mode, model.fusion)
    eps_pred = model.dit(z_hat, t, sem[-1])
    l_diff = diffusion_loss(eps_pred, eps)
    return JointLoss(total=joint_loss(l_diff, l_depth, lam), diff=l_diff, depth=l_depth)


def draw_noise(rng: Rng, cfg: ModelConfig, batch: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample t uniform in [1, T] and standard-normal eps."""
    t = np.asarray(rng.integers(1, cfg.T + 1, size=batch), dtype=np.int64)
    eps = rng.normal((batch, cfg.h, cfg.w, cfg.c_latent))
    return t, eps


# Steps

def stage1_step(model: SpatialFusionModel, batch: Batch, freeze: FreezeSpec, opt: OptimizerState,
                step: int = 0, phase: str = "coarse", grad_clip: Optional[float] = 1.0,
                verify_freeze: bool = True) -> TrainRecord:
    """One Stage-1 update: depth regression through the spatial stack."""
    started = time.perf_counter()
    freeze.apply(model.store)
    loss = stage1_loss(model, batch)
    value = float(loss.item())
    norm = apply_update(model.store, freeze, opt, loss, grad_clip, verify_freeze)
    return TrainRecord(step=step, stage=1, phase=phase, l_diff=None, l_depth=value, l_total=value,
                       grad_norm=norm, wallclock=time.perf_counter() - started)


def probe_step(model: SpatialFusionModel, batch: Batch, opt: OptimizerState, step: int = 0,
               phase: str = "coarse", grad_clip: Optional[float] = 1.0, verify_freeze: bool = True) -> TrainRecord:
    started = time.perf_counter()
    freeze = FreezeSpec.probe()
    freeze.apply(model.store)
    loss = probe_loss(model, batch)
    value = float(loss.item())
    norm = apply_update(model.store, freeze, opt, loss, grad_clip, verify_freeze)
    return TrainRecord(step=step, stage=1, phase=phase, l_diff=None, l_depth=value, l_total=value,
                       grad_norm=norm, wallclock=time.perf_counter() - started)


def stage2_step(model: SpatialFusionModel, batch: Batch, freeze: FreezeSpec, opt: OptimizerState, lam: float,
                rng: Rng, step: int = 0, phase: str = "coarse", grad_clip: Optional[float] = 1.0,
                verify_freeze: bool = True) -> TrainRecord:
    """One Stage-2 update on L_total = L_diff + lam * L_depth with random t per sample."""
    started = time.perf_counter()
    freeze.apply(model.store)
    t, eps = draw_noise(rng, model.cfg, len(batch))
    losses = stage2_losses(model, batch, lam, t, eps)
    l_diff = float(losses.diff.item())
    l_depth = float(losses.depth.item())
    norm = apply_update(model.store, freeze, opt, losses.total, grad_clip, verify_freeze)
    total = float(np.float64(l_diff) + np.float64(lam) * np.float64(l_depth))
    return TrainRecord(step=step, stage=2, phase=phase, l_diff=l_diff, l_depth=l_depth, l_total=total,
                       grad_norm=norm, wallclock=time.perf_counter() - started)


# Pre-fits

def prefit_semantic(model: SpatialFusionModel, generator: SceneGenerator, settings: TrainSettings) -> float:
    """Next-token pre-fit of the semantic transformer on generated prompts; returns the last loss."""
    freeze = FreezeSpec.only("semantic")
    opt = OptimizerState(lr=settings.lr, betas=tuple(settings.betas), eps=settings.eps)
    last = float("nan")
    size = settings.prefit_batch_size
    for k in range(settings.semantic_prefit_steps):
        phase = COARSE if k % 2 == 0 else FINE
        indices = range(k * size, (k + 1) * size)
        prompts = generator.prompts(phase, indices, settings.task_mix, stream="prefit")
        freeze.apply(model.store)
        loss = model.semantic.lm_loss(prompts)
        last = float(loss.item())
        apply_update(model.store, freeze, opt, loss, settings.grad_clip, settings.verify_freeze)
    logger.info(f"semantic pre-fit: {settings.semantic_prefit_steps} steps, final LM loss {last:.4f}")
    return last


def codec_mae(model: SpatialFusionModel, images: np.ndarray) -> float:
    with no_grad():
        recon = model.codec.decode(model.codec.encode(images)).data
    return float(np.mean(np.abs(recon.astype(np.float64) - images)))


def prefit_codec(model: SpatialFusionModel, generator: SceneGenerator, settings: TrainSettings,
                 held_out: int = 64) -> float:
    """Pixel-MSE pre-fit of the latent codec; sets latent normalisation and returns held-out MAE."""
    freeze = FreezeSpec.only("codec")
    opt = OptimizerState(lr=settings.lr, betas=tuple(settings.betas), eps=settings.eps)
    size = settings.prefit_batch_size
    for k in range(settings.codec_prefit_steps):
        phase = COARSE if k % 2 == 0 else FINE
        batch = generator.make_batch(phase, range(k * size, (k + 1) * size), settings.task_mix, stream="codec")
        freeze.apply(model.store)
        loss = model.codec.reconstruction_loss(batch.images)
        apply_update(model.store, freeze, opt, loss, settings.grad_clip, settings.verify_freeze)
    model.store.set_trainable(())
    fit = generator.make_batch(FINE, range(held_out), settings.task_mix, stream="codec_stats")
    with no_grad():
        model.codec.set_normalisation(model.codec.encode_raw(fit.images).data)
    val = generator.make_batch(FINE, range(held_out), settings.task_mix, stream="codec_val")
    mae = codec_mae(model, val.images)
    logger.info(f"codec pre-fit: {settings.codec_prefit_steps} steps, held-out MAE {mae:.4f}")
    return mae


# Orchestration

@dataclass
class Segment:
    stage: int
    phase: str
    start: int
    end: int  # exclusive


def plan_segments(settings: TrainSettings, objective: str = "spatialfusion") -> List[Segment]:
    """Global step ranges of (stage, phase); empty segments are dropped."""
    segments: List[Segment] = []
    start = 0
    stages = [(1, settings.steps_s1)]
    if objective == "spatialfusion":
        stages.append((2, settings.steps_s2))
    for stage, budget in stages:
        coarse = int(round(budget * settings.phase_split))
        for phase, n in (("coarse", coarse), ("fine", budget - coarse)):
            if n > 0:
                segments.append(Segment(stage, phase, start, start + n))
            start += n
    return segments


@dataclass
class Validation:
    step: int
    depth_loss: float
    diff_loss: Optional[float] = None


@dataclass
class TrainResult:
    """Final state of a run"""
    model: SpatialFusionModel
    log: List[TrainRecord]
    checkpoint: Checkpoint
    stream_digest: str
    adapter_calls: int
    validations: List[Validation] = field(default_factory=list)
    prefit: Dict[str, float] = field(default_factory=dict)
    checkpoint_path: Optional[Path] = None

    @property
    def final_val_depth_loss(self) -> Optional[float]:
        return self.validations[-1].depth_loss if self.validations else None

    @property
    def final_val_diff_loss(self) -> Optional[float]:
        diffs = [v.diff_loss for v in self.validations if v.diff_loss is not None]
        return diffs[-1] if diffs else None


class Trainer:
    """
    Owns the model, optimizer and random streams of one (config, seed) run.

    Batches are addressed by global step, so every variant of an ablation sees
    the same scene stream; the running SHA-256 over batches makes that checkable.
    """

    def __init__(self, cfg: ExperimentConfig, seed: int, out_dir: Optional[Path] = None,
                 objective: str = "spatialfusion"):
        if objective not in OBJECTIVES:
            raise ConfigError(f"unknown training objective '{objective}'")
        self.cfg = cfg
        self.settings = cfg.train
        self.seed = seed
        self.objective = objective
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = SpatialFusionModel(cfg.model, seed)
        self.generator = SceneGenerator(cfg.model, seed, self.settings.workers)
        self.opt = OptimizerState(lr=self.settings.lr, betas=tuple(self.settings.betas), eps=self.settings.eps)
        self.rng = Rng(seed, "trainer")
        self.segments = plan_segments(self.settings, objective)
        self.total_steps = self.segments[-1].end if self.segments else 0
        self.step = 0
        self.log: List[TrainRecord] = []
        self.validations: List[Validation] = []
        self.stream_digest = hashlib.sha256(b"").hexdigest()
        self.prefit: Dict[str, float] = {}
        self.adapter_calls = 0
        self._val_batches: Optional[List[Batch]] = None

    # Data

    def segment_at(self, step: int) -> Segment:
        for seg in self.segments:
            if seg.start <= step < seg.end:
                return seg
        raise IndexError(f"step {step} outside the training plan of {self.total_steps} steps")

    def batch_indices(self, step: int) -> List[int]:
        size = self.settings.batch_size
        indices = [step * size + b for b in range(size)]
        pool = self.settings.train_pool_size
        return [i % pool for i in indices] if pool else indices

    def batch_for(self, step: int) -> Batch:
        seg = self.segment_at(step)
        return self.generator.make_batch(PHASES[seg.phase], self.batch_indices(step), self.settings.task_mix)

    def _chain_digest(self, batch: Batch) -> None:
        self.stream_digest = hashlib.sha256(bytes.fromhex(self.stream_digest) + batch.digest()).hexdigest()

    def validation_batches(self) -> List[Batch]:
        if self._val_batches is None:
            size, n = self.settings.batch_size, self.settings.val_size
            self._val_batches = [
                self.generator.make_batch(FINE, range(lo, min(lo + size, n)), self.settings.task_mix, stream="val")
                for lo in range(0, n, size)
            ]
        return self._val_batches

    # Validation

    def validate(self, stage: int) -> Validation:
        """Depth loss on the held-out set, plus diffusion loss (fixed t and noise) from Stage 2 on."""
        noise = Rng(self.seed, "val_noise")
        depth_total, diff_total, count = 0.0, 0.0, 0
        with no_grad():
            for batch in self.validation_batches():
                n = len(batch)
                if self.objective == "probe":
                    depth_total += float(probe_loss(self.model, batch).item()) * n
                elif stage == 1:
                    depth_total += float(stage1_loss(self.model, batch).item()) * n
                else:
                    t, eps = draw_noise(noise, self.model.cfg, n)
                    losses = stage2_losses(self.model, batch, self.model.cfg.lam, t, eps)
                    depth_total += float(losses.depth.item()) * n
                    diff_total += float(losses.diff.item()) * n
                count += n
        return Validation(
            step=self.step,
            depth_loss=depth_total / count,
            diff_loss=diff_total / count if stage == 2 else None,
        )

    # Checkpoints

    def experiment_dict(self) -> Dict:
        return {"model": self.model.cfg.to_dict(), "train": self.settings.to_dict()}

    def to_checkpoint(self) -> Checkpoint:
        if self.step > 0:
            seg = self.segment_at(self.step - 1)
        else:
            seg = self.segments[0] if self.segments else Segment(1, "coarse", 0, 0)
        return Checkpoint(
            config=self.experiment_dict(),
            params=self.model.store.state_dict(),
            adam_m={k: m for k, (m, _) in self.opt.moments.items()},
            adam_v={k: v for k, (_, v) in self.opt.moments.items()},
            optimizer={"lr": self.opt.lr, "betas": list(self.opt.betas), "eps": self.opt.eps, "step": self.opt.step},
            rng_state=self.rng.get_state(),
            step=self.step,
            stage=seg.stage,
            phase=seg.phase,
            markers={
                "seed": self.seed,
                "objective": self.objective,
                "stream_digest": self.stream_digest,
                "prefit": self.prefit,
                "adapter_calls": self.adapter_calls,
                "trained": self.model.trained,
                "log": [r.replay_dict() for r in self.log],
                "validations": [vars(v) for v in self.validations],
            },
        )

    def restore(self, ckpt: Checkpoint) -> None:
        """Load parameters and run state; the trainer's own config decides what happens next."""
        self.model.store.load_state_dict(ckpt.params)
        self.opt = OptimizerState(
            lr=ckpt.optimizer.get("lr", self.settings.lr),
            betas=tuple(ckpt.optimizer.get("betas", self.settings.betas)),
            eps=ckpt.optimizer.get("eps", self.settings.eps),
            step=int(ckpt.optimizer.get("step", 0)),
            moments={k: (ckpt.adam_m[k].copy(), ckpt.adam_v[k].copy()) for k in ckpt.adam_m},
        )
        if ckpt.rng_state:
            self.rng = Rng.from_state(ckpt.rng_state)
        self.step = ckpt.step
        markers = ckpt.markers
        self.stream_digest = markers.get("stream_digest", self.stream_digest)
        self.prefit = dict(markers.get("prefit", {}))
        self.adapter_calls = int(markers.get("adapter_calls", 0))
        self.model.trained = bool(markers.get("trained", False))
        self.log = [TrainRecord.from_dict(r) for r in markers.get("log", [])]
        self.validations = [Validation(**v) for v in markers.get("validations", [])]

    def save(self, name: str) -> Optional[Path]:
        if self.out_dir is None:
            return None
        return save_checkpoint(self.out_dir / name, self.to_checkpoint())

    # Loop

    def ensure_prefit(self, stage: int) -> None:
        if "semantic_lm_loss" not in self.prefit:
            self.prefit["semantic_lm_loss"] = prefit_semantic(self.model, self.generator, self.settings)
        if stage == 2 and "codec_mae" not in self.prefit:
            self.prefit["codec_mae"] = prefit_codec(self.model, self.generator, self.settings)

    def run(self, stop_after: Optional[int] = None,
            on_step: Optional[Callable[[TrainRecord], None]] = None) -> TrainResult:
        """
        Train until the plan is exhausted or `stop_after` global steps are done.

        Validation runs before the first step, every `val_every` steps and at
        the end; checkpoints are written at phase boundaries when out_dir is set.
        """
        limit = self.total_steps if stop_after is None else min(stop_after, self.total_steps)
        if self.step == 0 and self.segments and not self.validations:
            self.ensure_prefit(self.segments[0].stage)
            self.validations.append(self.validate(self.segments[0].stage))

        while self.step < limit:
            seg = self.segment_at(self.step)
            self.ensure_prefit(seg.stage)
            batch = self.batch_for(self.step)
            self._chain_digest(batch)
            record = self._train_step(seg, batch)

            self.step += 1
            if self.step % self.settings.val_every == 0 or self.step == self.total_steps:
                val = self.validate(seg.stage)
                self.validations.append(val)
                record.val_depth_loss = val.depth_loss
                record.val_diff_loss = val.diff_loss
            self.log.append(record)
            if on_step is not None:
                on_step(record)
            if self.step == seg.end:
                logger.info(f"step {self.step}: finished stage {seg.stage} {seg.phase} phase")
                self.model.trained = True
                self.save(f"stage{seg.stage}-{seg.phase}.spfz")

        self.model.trained = self.model.trained or self.step > 0
        path = self.save("final.spfz") if self.step == self.total_steps else self.save("latest.spfz")
        if self.out_dir is not None:
            self.write_log(self.out_dir / "trainlog.jsonl")
        return TrainResult(
            model=self.model,
            log=list(self.log),
            checkpoint=self.to_checkpoint(),
            stream_digest=self.stream_digest,
            adapter_calls=self.adapter_calls,
            validations=list(self.validations),
            prefit=dict(self.prefit),
            checkpoint_path=path,
        )

    def _train_step(self, seg: Segment, batch: Batch) -> TrainRecord:
        s = self.settings
        if self.objective == "probe":
            return probe_step(self.model, batch, self.opt, self.step, seg.phase, s.grad_clip, s.verify_freeze)
        if seg.stage == 1:
            return stage1_step(self.model, batch, FreezeSpec.stage1(), self.opt, self.step, seg.phase,
                               s.grad_clip, s.verify_freeze)
        before = self.model.adapter.calls
        record = stage2_step(self.model, batch, FreezeSpec.stage2(self.model.cfg), self.opt, self.model.cfg.lam,
                             self.rng, self.step, seg.phase, s.grad_clip, s.verify_freeze)
        self.adapter_calls += self.model.adapter.calls - before
        return record

    def write_log(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for record in self.log:
                f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


def read_log(path: Path) -> List[TrainRecord]:
    with open(path) as f:
        return [TrainRecord.from_dict(json.loads(line)) for line in f if line.strip()]


def run_training(cfg: ExperimentConfig, seed: int, out_dir: Optional[Path] = None,
                 resume: Optional[Path] = None, stop_after: Optional[int] = None,
                 on_step: Optional[Callable[[TrainRecord], None]] = None) -> TrainResult:
    """Run (or resume) the two-stage schedule for one seed."""
    trainer = Trainer(cfg, seed, out_dir)
    if resume is not None:
        trainer.restore(load_checkpoint(resume, expected=cfg.model))
    return trainer.run(stop_after=stop_after, on_step=on_step)


def load_model(path: Path, expected: Optional[ModelConfig] = None) -> SpatialFusionModel:
    """A trained model rebuilt from a checkpoint file."""
    ckpt = load_checkpoint(path, expected)
    model = SpatialFusionModel(ckpt.model_config, int(ckpt.markers.get("seed", 0)))
    model.store.load_state_dict(ckpt.params)
    model.trained = bool(ckpt.markers.get("trained", ckpt.step > 0))
    return model
