"""
Named parameter storage, grouped by pathway.

Parameter names are "<group>.<local name>"; the group is what freeze rules
and checkpoint hashes operate on.
"""
import hashlib
import math
from typing import Dict, Iterable, List, Mapping

import numpy as np

from ..errors import ShapeMismatchOnLoad
from .array import Array
from .rng import Rng


class ParameterStore:
    def __init__(self):
        self._params: Dict[str, Array] = {}

    def add(self, group: str, name: str, data: np.ndarray) -> Array:
        full = f"{group}.{name}"
        if full in self._params:
            raise KeyError(f"parameter '{full}' registered twice")
        param = Array(np.asarray(data, dtype=np.float32), requires_grad=False, name=full)
        self._params[full] = param
        return param

    def __getitem__(self, name: str) -> Array:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def named(self) -> Dict[str, Array]:
        return dict(self._params)

    def group(self, group: str) -> Dict[str, Array]:
        prefix = f"{group}."
        return {n: p for n, p in self._params.items() if n.startswith(prefix)}

    def groups(self) -> List[str]:
        seen: List[str] = []
        for name in self._params:
            g = name.split(".", 1)[0]
            if g not in seen:
                seen.append(g)
        return seen

    def trainable(self) -> Dict[str, Array]:
        return {n: p for n, p in self._params.items() if p.requires_grad}

    def set_trainable(self, groups: Iterable[str]) -> None:
        allowed = set(groups)
        for name, p in self._params.items():
            p.requires_grad = name.split(".", 1)[0] in allowed
            if not p.requires_grad:
                p.grad = None

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def digest(self, group: str) -> str:
        """SHA-256 over names, shapes and raw bytes of one group."""
        h = hashlib.sha256()
        for name, p in self.group(group).items():
            h.update(name.encode("utf-8"))
            h.update(str(p.shape).encode("utf-8"))
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            if name not in state:
                raise ShapeMismatchOnLoad(name, p.shape, ())
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeMismatchOnLoad(name, p.shape, value.shape)
            p.data = value.astype(np.float32).copy()
            p.grad = None


# Initialisers

def dense_init(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal((fan_in, fan_out), scale=1.0 / math.sqrt(fan_in))


def conv_init(rng: Rng, kh: int, kw: int, c_in: int, c_out: int) -> np.ndarray:
    return rng.normal((kh, kw, c_in, c_out), scale=1.0 / math.sqrt(kh * kw * c_in))
