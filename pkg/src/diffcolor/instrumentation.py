"""Process-wide gradient-step counter.

Every optimizer step taken by a training loop bumps this counter. The
service's render path asserts the counter does not move, which is the
mechanical proof that editing never trains.
"""

from __future__ import annotations

import threading


class _GradStepCounter:
    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def increment(self, n: int = 1) -> None:
        with self._lock:
            self._count += n

    def read(self) -> int:
        with self._lock:
            return self._count


gradient_steps = _GradStepCounter()
