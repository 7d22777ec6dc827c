"""Segment lifecycle and the PM-resident segment meta table.

The meta table lives at a fixed device offset, 16 bytes per segment (state,
owner, reserved).  State changes are persisted with a 64B read-modify-write
so the device never sees sub-cacheline traffic.  A DRAM free heap serves
allocation and is rebuilt from the table on cold start.
"""

import heapq

SEGMENT_SIZE = 4 << 20
META_BYTES = 16

FREE = 0
USING = 1
USED = 2
COMMITTED = 3

OWNER_NONE = 0
OWNER_WORKER = 1
OWNER_CONTROL = 2
OWNER_CLEAN = 3

STATE_NAMES = {FREE: "Free", USING: "Using", USED: "Used", COMMITTED: "Committed"}

_LEGAL = {
    (FREE, USING),       # allocation, any owner
    (USING, COMMITTED),  # worker/clean path: full and known replicated
    (USING, USED),       # backup path: handed over by the control loop
    (USED, COMMITTED),   # backup path: versions covered by CommitVer
    (COMMITTED, FREE),   # reclaimed by GC
}


class IllegalTransition(RuntimeError):
    pass


class AllocationError(RuntimeError):
    pass


class SegmentTable:
    def __init__(self, device, num_segments, segment_size=SEGMENT_SIZE,
                 table_offset=0):
        self.device = device
        self.num_segments = num_segments
        self.segment_size = segment_size
        self.table_offset = table_offset
        table_bytes = -(-num_segments * META_BYTES // 4096) * 4096
        self.data_offset = table_offset + table_bytes
        if self.data_offset + num_segments * segment_size > device.capacity:
            raise ValueError("device too small for the segment layout")
        self._free = list(range(num_segments))
        heapq.heapify(self._free)
        self.transition_hook = None  # hook(seg, old_state, new_state)

    @classmethod
    def required_capacity(cls, num_segments, segment_size=SEGMENT_SIZE):
        return -(-num_segments * META_BYTES // 4096) * 4096 + num_segments * segment_size

    def address(self, seg):
        return self.data_offset + seg * self.segment_size

    def segment_of(self, addr):
        if addr < self.data_offset:
            return None
        return (addr - self.data_offset) // self.segment_size

    # -- persisted metadata ---------------------------------------------------

    def _meta_addr(self, seg):
        return self.table_offset + seg * META_BYTES

    def _write_meta(self, seg, state, owner):
        addr = self._meta_addr(seg)
        block = addr - addr % 64
        row = bytearray(self.device.read(block, 64))
        at = addr - block
        row[at] = state
        row[at + 1] = owner
        self.device.write(block, bytes(row))

    def state(self, seg):
        raw = self.device.read(self._meta_addr(seg), 2)
        return raw[0]

    def owner(self, seg):
        raw = self.device.read(self._meta_addr(seg), 2)
        return raw[1]

    # -- lifecycle --------------------------------------------------------------

    def free_count(self):
        return len(self._free)

    def alloc(self, owner):
        if not self._free:
            raise AllocationError("no Free segments")
        seg = heapq.heappop(self._free)
        self._set_state(seg, USING, owner)
        return seg

    def alloc_batch(self, count, owner):
        """Up to ``count`` Free segments in increasing address order."""
        got = []
        while len(got) < count and self._free:
            got.append(self.alloc(owner))
        return got

    def alloc_contiguous(self, count, owner):
        """A run of address-contiguous segments (sequencer-style layouts)."""
        free = sorted(self._free)
        for i in range(len(free) - count + 1):
            if free[i + count - 1] - free[i] == count - 1:
                run = free[i:i + count]
                self._free = [s for s in self._free if s not in set(run)]
                heapq.heapify(self._free)
                for seg in run:
                    self._set_state(seg, USING, owner)
                return run
        raise AllocationError(f"no contiguous run of {count} segments")

    def transition(self, seg, new_state):
        old = self.state(seg)
        if (old, new_state) not in _LEGAL:
            raise IllegalTransition(
                f"segment {seg}: {STATE_NAMES[old]} -> {STATE_NAMES[new_state]}")
        owner = self.owner(seg)
        if new_state == FREE:
            owner = OWNER_NONE
            self.device.trim(self.address(seg), self.segment_size)
            heapq.heappush(self._free, seg)
        self._set_state(seg, new_state, owner, old_state=old)

    def _set_state(self, seg, state, owner, old_state=None):
        if old_state is None:
            old_state = self.state(seg)
        self._write_meta(seg, state, owner)
        if self.transition_hook is not None:
            self.transition_hook(seg, old_state, state)

    def rebuild_free_heap(self):
        """Re-derive the DRAM free heap from the persisted table (cold start)."""
        self._free = [seg for seg in range(self.num_segments)
                      if self.state(seg) == FREE]
        heapq.heapify(self._free)

    def segments_in_state(self, state, owner=None):
        out = []
        for seg in range(self.num_segments):
            if self.state(seg) == state and (owner is None or self.owner(seg) == owner):
                out.append(seg)
        return out
