"""
Exception hierarchy for spatialfusion.

Every failure the library raises on purpose derives from SpatialFusionError so
the CLI can turn it into a one-line diagnostic.
"""
from typing import Sequence


class SpatialFusionError(Exception):
    """Base class for all spatialfusion errors."""


class ConfigError(SpatialFusionError):
    """Invalid configuration value, unknown key or bad schema version."""


# numcore

class ShapeMismatch(SpatialFusionError):
    def __init__(self, op: str, *shapes: Sequence[int], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        shown = " vs ".join(str(s) for s in self.shapes)
        message = f"{op}: shape mismatch {shown}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class NonFinite(SpatialFusionError):
    """A NaN or Inf appeared while checked mode was on."""


class NonScalarLoss(SpatialFusionError):
    """backward() was called on an array with more than one element."""


class DoubleBackward(SpatialFusionError):
    """backward() reached a graph that was already consumed."""


class NonDeterministicF(SpatialFusionError):
    """Two evaluations of the function under test disagreed."""


class MissingGrad(SpatialFusionError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"trainable parameter '{name}' has no gradient")


# attention / geometry / diffusion

class InvalidLayerIndex(SpatialFusionError):
    """Spatial layer index outside [1, L] or an M <= L pairing."""


class EmptyKeySet(SpatialFusionError):
    """Shared attention was asked to attend over zero keys."""


class UnknownToken(SpatialFusionError):
    """A token id outside the semantic vocabulary."""


class NonSquareTokenGrid(SpatialFusionError):
    """Geo token count cannot be arranged on a square grid."""


class EmptyMask(SpatialFusionError):
    """Depth loss requested over zero valid pixels."""


class TOutOfRange(SpatialFusionError):
    """Diffusion timestep outside [1, T]."""


class UntrainedModel(SpatialFusionError):
    """Sampling requested from a model without trained parameters."""


# scenegen

class MalformedPrompt(SpatialFusionError):
    """Token sequence does not parse as a scene prompt."""


# trainer / checkpoints

class FrozenParamGradApplied(SpatialFusionError):
    def __init__(self, group: str):
        self.group = group
        super().__init__(f"frozen parameter group '{group}' changed during a step")


class BadMagic(SpatialFusionError):
    """Checkpoint file is not a checkpoint, or is truncated or corrupt."""


class VersionMismatch(SpatialFusionError):
    def __init__(self, field: str, expected, found):
        self.field = field
        super().__init__(f"checkpoint field '{field}' mismatch: expected {expected!r}, found {found!r}")


class ShapeMismatchOnLoad(SpatialFusionError):
    def __init__(self, name: str, expected, found):
        self.name = name
        super().__init__(
            f"tensor '{name}' has shape {tuple(found)} in checkpoint, model expects {tuple(expected)}"
        )


class DataStreamMismatch(SpatialFusionError):
    """Ablation variants were fed different batch streams."""


# harness

class MissingRun(SpatialFusionError):
    """A run directory is absent or holds no run artifacts."""


class IoError(SpatialFusionError):
    """Reading or writing an artifact file failed."""
