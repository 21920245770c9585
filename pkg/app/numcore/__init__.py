"""
Dense-array numerics: tape autodiff, Adam, gradient checking, seeded streams.
"""

from .array import (
    Array,
    constant,
    parameter,
    zeros,
    ones,
    no_grad,
    precision,
    set_checked,
    is_checked,
)
from .gradcheck import GradReport, grad_check
from .optim import OptimizerState, adam_step, clip_grads, global_grad_norm
from .params import ParameterStore
from .rng import Rng

__all__ = [
    'Array',
    'constant',
    'parameter',
    'zeros',
    'ones',
    'no_grad',
    'precision',
    'set_checked',
    'is_checked',
    'GradReport',
    'grad_check',
    'OptimizerState',
    'adam_step',
    'clip_grads',
    'global_grad_norm',
    'ParameterStore',
    'Rng',
]
