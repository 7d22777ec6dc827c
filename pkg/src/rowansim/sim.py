"""Deterministic discrete-event loop.

Logical time is integer nanoseconds.  Ties break on scheduling order, so a run
is reproducible from its seed alone; no wall-clock or hash-order dependence.
"""

import heapq

US = 1_000
MS = 1_000_000


class EventLoop:
    def __init__(self):
        self.now = 0
        self._heap = []
        self._seq = 0

    def call_at(self, t, fn, *args):
        if t < self.now:
            t = self.now
        heapq.heappush(self._heap, (t, self._seq, fn, args))
        self._seq += 1

    def call_later(self, delay, fn, *args):
        self.call_at(self.now + delay, fn, *args)

    def step(self):
        """Run the next event; returns False when the heap is empty."""
        if not self._heap:
            return False
        t, _, fn, args = heapq.heappop(self._heap)
        self.now = max(self.now, t)
        fn(*args)
        return True

    def run_until(self, t):
        """Run all events scheduled up to and including time ``t``."""
        while self._heap and self._heap[0][0] <= t:
            self.step()
        self.now = max(self.now, t)

    def run_until_idle(self, max_time=None):
        while self._heap:
            if max_time is not None and self._heap[0][0] > max_time:
                break
            self.step()

    def pending(self):
        return len(self._heap)
