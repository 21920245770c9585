"""
Named, seed-keyed random streams.

A stream is identified by (seed, stream name, optional index). Identical keys
give identical draws on every platform: the key goes through numpy's
SeedSequence and the bit generator is PCG64.
"""
import zlib
from typing import Any, Dict, Optional, Sequence

import numpy as np


def _stream_key(stream: str) -> int:
    return zlib.crc32(stream.encode("utf-8"))


class Rng:
    """A deterministic random stream."""

    def __init__(self, seed: int, stream: str = "root", index: Optional[int] = None):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = stream
        self.index = index
        entropy = [self.seed, _stream_key(stream)]
        if index is not None:
            entropy.append(int(index))
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, stream: str, index: Optional[int] = None) -> "Rng":
        """A substream that depends only on the key, never on draws made so far."""
        parent = self.stream if self.index is None else f"{self.stream}#{self.index}"
        return Rng(self.seed, f"{parent}/{stream}", index)

    # Draws

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        draw = self._gen.standard_normal(size=shape, dtype=np.float32)
        return (draw * np.float32(scale)).astype(np.float32)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def choice(self, options: Sequence[Any], p: Optional[Sequence[float]] = None):
        idx = self._gen.choice(len(options), p=p)
        return options[int(idx)]

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    # State

    def get_state(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "stream": self.stream,
            "index": self.index,
            "bit_generator": self._gen.bit_generator.state,
        }

    def set_state(self, state: Dict[str, Any]) -> None:
        self._gen.bit_generator.state = state["bit_generator"]

    @classmethod
    def from_state(cls, state: Dict[str, Any]) -> "Rng":
        rng = cls(state["seed"], state["stream"], state.get("index"))
        rng.set_state(state)
        return rng
