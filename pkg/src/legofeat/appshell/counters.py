"""Event counters for training and evaluation runs."""

from __future__ import annotations

import time


class StepCounter:
    """Named monotone counters plus wall-clock timers.

    Use ``add`` for discrete events (steps, utterances, tokens) and
    ``timed`` to accumulate seconds under a name.
    """

    def __init__(self):
        self._counts: dict[str, float] = {}

    def add(self, name: str, n: float = 1) -> None:
        self._counts[name] = self._counts.get(name, 0) + n

    def get(self, name: str) -> float:
        return self._counts.get(name, 0)

    def timed(self, name: str):
        counter = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()
                return self

            def __exit__(self, *exc):
                counter.add(name, time.perf_counter() - self.t0)

        return _Timer()

    def as_dict(self) -> dict[str, float]:
        return dict(self._counts)

    def merge(self, other: "StepCounter") -> None:
        for name, n in other._counts.items():
            self.add(name, n)
