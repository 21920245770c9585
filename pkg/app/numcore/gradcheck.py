"""
Finite-difference verification of tape gradients.
"""
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from ..errors import NonDeterministicF, NonScalarLoss
from .array import Array, no_grad, precision
from .rng import Rng

Target = Union[Array, Sequence[Array]]


@dataclass
class GradReport:
    max_rel_err: float
    passed: bool
    checked: int
    worst: Optional[str] = None


def _value(f: Callable, x: Target) -> float:
    with no_grad():
        out = f(x)
    if out.size != 1:
        raise NonScalarLoss(f"grad_check needs a scalar function, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def grad_check(
    f: Callable[[Target], Array],
    x: Target,
    eps: float = 1e-3,
    rtol: float = 1e-3,
    atol: float = 1e-5,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> GradReport:
    """
    Compare backward() gradients with central finite differences.

    Everything is evaluated in float64 for the duration of the check. An element
    passes when |analytic - numeric| <= max(rtol * max(|analytic|, |numeric|), atol).

    Args:
        f: Deterministic scalar function; called with `x` exactly as given
        x: One array or a sequence of arrays (e.g. all trainable parameters)
        eps: Central-difference step
        max_elements: If set, check at most this many randomly chosen elements per array

    Returns:
        GradReport with the worst relative error over checked elements
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    targets: List[Array] = [x] if isinstance(x, Array) else list(x)
    saved = [(t.data, t.requires_grad, t.grad) for t in targets]
    floor = atol / rtol
    worst_err, worst_label, checked = 0.0, None, 0

    try:
        with precision(np.float64):
            for t in targets:
                t.data = t.data.astype(np.float64)
                t.requires_grad = True
                t.grad = None

            if _value(f, x) != _value(f, x):
                raise NonDeterministicF("f(x) returned different values on repeated evaluation")

            loss = f(x)
            loss.backward()
            analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in targets]

            picker = Rng(seed, "grad_check")
            for k, t in enumerate(targets):
                flat = t.data.reshape(-1)
                indices = np.arange(flat.size)
                if max_elements is not None and flat.size > max_elements:
                    indices = np.sort(picker.permutation(flat.size)[:max_elements])
                for i in indices:
                    original = flat[i]
                    flat[i] = original + eps
                    f_plus = _value(f, x)
                    flat[i] = original - eps
                    f_minus = _value(f, x)
                    flat[i] = original
                    numeric = (f_plus - f_minus) / (2.0 * eps)
                    a = float(analytic[k].reshape(-1)[i])
                    err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                    checked += 1
                    if err > worst_err:
                        worst_err = err
                        worst_label = f"{t.name or f'input[{k}]'}[{int(i)}]"
    finally:
        for t, (data, requires_grad, grad) in zip(targets, saved):
            t.data, t.requires_grad, t.grad = data, requires_grad, grad

    return GradReport(max_rel_err=worst_err, passed=worst_err <= rtol, checked=checked, worst=worst_label)
