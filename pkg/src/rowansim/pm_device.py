"""Persistent-memory DIMM model with a bounded write-combining buffer.

The device accepts byte writes at arbitrary (8-byte aligned) offsets, stages
them in a small buffer of media lines (256B each by default) and emits one
full-line media write per eviction.  The ratio of media bytes to request bytes
is the device-level write amplification (DLWA) of the workload it saw.

Writes are durable once accepted: the combining buffer belongs to the
persistence domain, so a simulated crash preserves staged data.  Reads always
observe staged data overlaid on the media.
"""

import numpy as np

from . import _kernels as K

XPLINE_SIZE = 256
XPBUFFER_LINES = 64  # ~16KB combining capacity


class BoundsError(IndexError):
    """Access outside the device's registered capacity."""


class CounterUndefinedError(ValueError):
    """DLWA requested before any write was accepted."""


class PmDevice:
    def __init__(self, capacity, xpline_size=XPLINE_SIZE,
                 xpbuffer_capacity=XPBUFFER_LINES):
        if capacity <= 0 or capacity % xpline_size != 0:
            raise ValueError("capacity must be a positive multiple of the line size")
        self.capacity = capacity
        self.xpline_size = xpline_size
        self.xpbuffer_capacity = xpbuffer_capacity
        self.media = np.zeros(capacity, dtype=np.uint8)
        self._slot_line = np.full(xpbuffer_capacity, -1, dtype=np.int64)
        self._slot_touch = np.zeros(xpbuffer_capacity, dtype=np.int64)
        self._slot_staged = np.zeros((xpbuffer_capacity, xpline_size), dtype=np.uint8)
        self._slot_dirty = np.zeros((xpbuffer_capacity, xpline_size), dtype=np.bool_)
        self._slot_fill = np.zeros(xpbuffer_capacity, dtype=np.int64)
        self._counters = np.zeros(K.N_COUNTERS, dtype=np.int64)

    # -- counters ----------------------------------------------------------

    @property
    def request_bytes(self):
        return int(self._counters[K.REQUEST_BYTES])

    @property
    def media_bytes(self):
        return int(self._counters[K.MEDIA_BYTES])

    @property
    def subword_writes(self):
        """Count of accepted writes that were not 64B-aligned multiples of 64B."""
        return int(self._counters[K.SUBWORD_WRITES])

    def dlwa(self):
        if self.request_bytes == 0:
            raise CounterUndefinedError("no accepted writes; DLWA is undefined")
        return self.media_bytes / self.request_bytes

    def reset_counters(self):
        self._counters[K.REQUEST_BYTES] = 0
        self._counters[K.MEDIA_BYTES] = 0
        self._counters[K.SUBWORD_WRITES] = 0

    def counter_row(self, label):
        """One CSV row of the counter snapshot: (label, request, media, dlwa)."""
        req, med = self.request_bytes, self.media_bytes
        return (label, req, med, med / req if req else float("nan"))

    # -- data path ----------------------------------------------------------

    def _check_range(self, addr, length):
        if addr < 0 or length < 0 or addr + length > self.capacity:
            raise BoundsError(f"[{addr}, {addr + length}) outside capacity {self.capacity}")

    def write(self, addr, data):
        """Accept a durable write of ``data`` at byte offset ``addr``."""
        buf = np.frombuffer(bytes(data), dtype=np.uint8)
        self._check_range(addr, len(buf))
        if addr % 8 != 0:
            raise ValueError("write address must be 8-byte aligned")
        if len(buf) == 0:
            return
        K.pm_write(self.media, self._slot_line, self._slot_touch,
                   self._slot_staged, self._slot_dirty, self._slot_fill,
                   self._counters, self.xpline_size, addr, buf)

    def write_stream_batch(self, addrs, data):
        """Apply one fixed-size write per address (the DLWA-sweep hot path)."""
        addrs = np.ascontiguousarray(addrs, dtype=np.int64)
        buf = np.frombuffer(bytes(data), dtype=np.uint8)
        if addrs.size:
            self._check_range(int(addrs.min()), 0)
            self._check_range(int(addrs.max()), len(buf))
        K.write_stream_batch(self.media, self._slot_line, self._slot_touch,
                             self._slot_staged, self._slot_dirty,
                             self._slot_fill, self._counters,
                             self.xpline_size, addrs, buf)

    def read(self, addr, length):
        """Current logical contents (staged data overlays media)."""
        self._check_range(addr, length)
        out = np.empty(length, dtype=np.uint8)
        if length:
            K.pm_read(self.media, self._slot_line, self._slot_staged,
                      self._slot_dirty, self.xpline_size, addr, out)
        return out.tobytes()

    def flush_all(self):
        """Evict every buffered line so the media counters settle."""
        K.pm_flush(self.media, self._slot_line, self._slot_staged,
                   self._slot_dirty, self._slot_fill, self._counters,
                   self.xpline_size)

    def trim(self, addr, length):
        """Zero a range without touching the write counters.

        Models a device-level erase used when recycling log segments; keeps
        stale bytes from aliasing as valid log records after reuse.
        """
        self._check_range(addr, length)
        self.media[addr:addr + length] = 0
        first = addr // self.xpline_size
        last = (addr + length - 1) // self.xpline_size
        for slot in range(self.xpbuffer_capacity):
            if first <= self._slot_line[slot] <= last:
                self._slot_line[slot] = -1
                self._slot_fill[slot] = 0
                self._slot_dirty[slot, :] = False

    # -- introspection -------------------------------------------------------

    def buffered_lines(self):
        """Mapping of resident XPLine index -> (last_touch, dirty byte count)."""
        out = {}
        for slot in range(self.xpbuffer_capacity):
            line = int(self._slot_line[slot])
            if line >= 0:
                out[line] = (int(self._slot_touch[slot]),
                             int(self._slot_dirty[slot].sum()))
        return out
