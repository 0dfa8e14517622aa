"""Allocation accounting for engine arrays.

Every array whose size scales with the problem (anything that is at least
``O(T)`` or ``O(U)`` elements and lives past a single expression) is created
through :func:`empty`, :func:`zeros`, :func:`full` or registered with
:func:`track`.  Registration adds ``nbytes`` to a process-wide counter, and a
``weakref.finalize`` hook subtracts it again when the buffer is garbage
collected, so ``peak`` is an exact high-water mark of live tracked bytes.

This is deliberately not process RSS: the numbers are deterministic and
isolate algorithmic memory (e.g. a ``(T, U+1, V)`` grid versus ``(T, S, V)``).
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


@dataclass
class PhaseStats:
    name: str
    baseline: int = 0
    peak: int = 0
    allocated: int = 0
    allocations: int = 0

    @property
    def peak_delta(self) -> int:
        """High-water mark above the live bytes at phase entry."""
        return self.peak - self.baseline


@dataclass
class AllocationTracker:
    current: int = 0
    peak: int = 0
    allocations: int = 0
    _phases: list = field(default_factory=list, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def register(self, arr: np.ndarray) -> np.ndarray:
        # views share their base's buffer, which is accounted separately
        if arr.base is not None or arr.nbytes == 0:
            return arr
        nbytes = int(arr.nbytes)
        with self._lock:
            self.current += nbytes
            self.allocations += 1
            if self.current > self.peak:
                self.peak = self.current
            for ph in self._phases:
                ph.allocated += nbytes
                ph.allocations += 1
                if self.current > ph.peak:
                    ph.peak = self.current
        weakref.finalize(arr, self._release, nbytes)
        return arr

    def _release(self, nbytes: int) -> None:
        with self._lock:
            self.current -= nbytes

    def reset_peak(self) -> None:
        with self._lock:
            self.peak = self.current

    @contextmanager
    def phase(self, name: str):
        """Measure the tracked high-water mark while the block runs.

        Phases nest; stats are process-wide, so concurrent threads allocating
        during a phase are counted in it.
        """
        with self._lock:
            ph = PhaseStats(name, baseline=self.current, peak=self.current)
            self._phases.append(ph)
        try:
            yield ph
        finally:
            with self._lock:
                self._phases.remove(ph)


TRACKER = AllocationTracker()


def track(arr: np.ndarray) -> np.ndarray:
    return TRACKER.register(arr)


def empty(shape, dtype=np.float64) -> np.ndarray:
    return TRACKER.register(np.empty(shape, dtype=dtype))


def zeros(shape, dtype=np.float64) -> np.ndarray:
    return TRACKER.register(np.zeros(shape, dtype=dtype))


def full(shape, fill_value, dtype=np.float64) -> np.ndarray:
    return TRACKER.register(np.full(shape, fill_value, dtype=dtype))
