"""
Adaptive-moment optimizer over named parameters.
"""
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from ..errors import MissingGrad
from .array import Array


@dataclass
class OptimizerState:
    """Adam state. Moment buffers are kept only for trainable parameters."""

    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def sync(self, params: Mapping[str, Array]) -> None:
        """Create buffers for newly trainable parameters and drop frozen ones."""
        for name, p in params.items():
            if p.requires_grad and name not in self.moments:
                self.moments[name] = (
                    np.zeros_like(p.data, dtype=np.float32),
                    np.zeros_like(p.data, dtype=np.float32),
                )
        for name in list(self.moments):
            if name not in params or not params[name].requires_grad:
                del self.moments[name]


def global_grad_norm(params: Mapping[str, Array]) -> float:
    total = 0.0
    for p in params.values():
        if p.requires_grad and p.grad is not None:
            g = p.grad.astype(np.float64)
            total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_grads(params: Mapping[str, Array], max_norm: Optional[float]) -> float:
    """Scale gradients in place so their global norm is at most max_norm; returns the norm before clipping."""
    norm = global_grad_norm(params)
    if max_norm and norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-12))
        for p in params.values():
            if p.requires_grad and p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


def adam_step(params: Mapping[str, Array], state: OptimizerState, lr: Optional[float] = None) -> None:
    """
    Apply one bias-corrected Adam update to every trainable parameter.

    Args:
        params: Named parameters; frozen ones (requires_grad False) are skipped
        state: Optimizer state, updated in place
        lr: Optional learning-rate override for this step

    Raises:
        MissingGrad: A trainable parameter has no gradient
    """
    for name, p in params.items():
        if p.requires_grad and p.grad is None:
            raise MissingGrad(name)

    state.sync(params)
    state.step += 1
    rate = state.lr if lr is None else lr
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step

    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad.astype(np.float64)
        m, v = state.moments[name]
        m64 = b1 * m.astype(np.float64) + (1.0 - b1) * g
        v64 = b2 * v.astype(np.float64) + (1.0 - b2) * g * g
        update = rate * (m64 / c1) / (np.sqrt(v64 / c2) + state.eps)
        p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)
        state.moments[name] = (m64.astype(np.float32), v64.astype(np.float32))
        p.grad = None
