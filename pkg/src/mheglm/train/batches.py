"""Deterministic mini-batch schedules shared by the encrypted run and its shadow."""
from __future__ import annotations

import numpy as np

from ..ring import derive_rng


class BatchSchedule:
    """Batch t of a party: seeded cyclic shuffling (or uniform sampling)."""

    def __init__(self, n: int, b: int, seed: int, pid: int, mode: str = "cyclic"):
        self.n, self.b, self.mode = n, b, mode
        self._rng = derive_rng(seed, "batches", pid)
        self._stream: list[int] = []
        self._batches: list[np.ndarray] = []

    def __getitem__(self, t: int) -> np.ndarray:
        while len(self._batches) <= t:
            if self.mode == "uniform":
                self._batches.append(np.sort(self._rng.choice(self.n, self.b, replace=False)))
                continue
            while len(self._stream) < self.b:
                self._stream.extend(self._rng.permutation(self.n).tolist())
            self._batches.append(np.array(self._stream[: self.b]))
            del self._stream[: self.b]
        return self._batches[t]
