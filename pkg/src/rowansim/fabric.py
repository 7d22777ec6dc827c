"""Simulated RDMA fabric: queue pairs, verbs, shared receive queues, CQs.

The fabric is the "hardware" of the simulation.  Delivering a message performs
only NIC-side work: placing bytes into receiver persistent memory, executing
READ/FAA against remote memory, and generating completions.  Anything that
needs receiver CPU (RPC handling) goes through per-server inboxes consumed by
the actor layer.

Nondeterminism is confined to two seeded knobs: per-message latency jitter and
the cross-pair interleaving chosen inside ``deliver_step``.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

SEND = "SEND"
WRITE = "WRITE"
READ = "READ"
FAA = "FAA"
RECV = "RECV"

OK = "ok"
RECV_BUFFER_TOO_SMALL = "receive-buffer-too-small"
RETRY_EXCEEDED = "retry-exceeded"


class FabricError(Exception):
    pass


@dataclass
class WorkRequest:
    verb: str
    payload: bytes = b""
    raddr: int = 0
    length: int = 0
    add: int = 0
    signaled: bool = True
    work_id: object = None


@dataclass
class Completion:
    work_id: object
    status: str
    qp_id: int
    verb: str
    placements: list = None
    data: bytes = b""
    faa_old: int = 0
    time: int = 0


class CompletionQueue:
    """FIFO by default; in ring mode the producer overwrites and never blocks."""

    def __init__(self, cq_id, ring_mode=False, ring_capacity=0):
        self.id = cq_id
        self.ring_mode = ring_mode
        self.ring_capacity = ring_capacity
        self.entries = deque(maxlen=ring_capacity if ring_mode else None)
        self.callback = None
        self.produced = 0

    def push(self, completion):
        self.entries.append(completion)  # deque maxlen gives ring overwrite
        self.produced += 1
        if self.callback is not None:
            self.callback(completion)

    def poll(self, max_entries):
        if self.ring_mode:
            return list(self.entries)[:max_entries]
        out = []
        while self.entries and len(out) < max_entries:
            out.append(self.entries.popleft())
        return out


class MpSrq:
    """Shared receive queue; multi-packet mode lands many messages per buffer."""

    def __init__(self, srq_id, server, cq, stride=64, multi_packet=True):
        self.id = srq_id
        self.server = server
        self.cq = cq
        self.stride = stride
        self.multi_packet = multi_packet
        self.buffer_queue = deque()
        self.active = None  # (base, length, next_stride_offset)
        self.consumed_bases = []  # pop order, for placement-law checks

    def post_recv(self, base, length):
        if length <= 0 or length % self.stride != 0:
            raise ValueError("receive buffer length must be a positive stride multiple")
        self.buffer_queue.append((base, length))

    def available_bytes(self):
        rem = sum(length for _, length in self.buffer_queue)
        if self.active is not None:
            base, length, off = self.active
            rem += length - off
        return rem

    def place(self, nbytes):
        """Stride-aligned landing address for one packet, or None if out of space."""
        need = -(-nbytes // self.stride) * self.stride
        if self.active is not None:
            base, length, off = self.active
            if length - off >= need:
                self.active = (base, length, off + need)
                return base + off
            self.active = None  # leftover strides are abandoned, never reused
        if not self.buffer_queue:
            return None
        base, length = self.buffer_queue.popleft()
        self.consumed_bases.append(base)
        if length < need:
            return None  # a single packet never spans buffers
        self.active = (base, length, need)
        return base


@dataclass
class QueuePair:
    id: int
    owner: object  # server id
    peer: int  # peer qp id
    kind: str = "RC"
    mtu: int = 1024
    cq: object = None
    srq: object = None  # receive side on the *peer*: set on the destination qp
    inbox: object = None


@dataclass
class _Packet:
    qp: QueuePair
    verb: str
    payload: bytes
    raddr: int
    length: int
    add: int
    work_id: object
    signaled: bool
    msg_seq: int
    last: bool
    deliver_time: int
    placements: list


class RdmaFabric:
    def __init__(self, seed=0, loop=None, base_latency=0, jitter=0,
                 ack_latency=None, faa_penalty=0, pair_gap=0, trace=False):
        self.loop = loop
        self.base_latency = base_latency
        self.jitter = jitter
        self.ack_latency = base_latency if ack_latency is None else ack_latency
        self.faa_penalty = faa_penalty
        self.pair_gap = pair_gap  # per-pair serialization spacing
        self._rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xFAB,)))
        self.devices = {}
        self.qps = {}
        self.cqs = {}
        self.srqs = {}
        self.inboxes = {}
        self.inbox_callbacks = {}
        self._next_id = 1
        self._in_flight = {}  # qp_id -> deque[_Packet]
        self._last_deliver_time = {}  # qp_id -> monotone per-pair delivery floor
        self._ready = set()  # qp ids with queued packets
        self._posted_during = set()
        self._msg_seq = 0
        self.trace = [] if trace else None
        self.delivered_payload_bytes = 0
        self.sent_payload_bytes = 0
        self._pump_scheduled = False

    # -- topology -----------------------------------------------------------

    def _alloc_id(self):
        self._next_id += 1
        return self._next_id - 1

    def register_memory(self, server, device):
        self.devices[server] = device

    def create_cq(self, ring_mode=False, ring_capacity=0):
        cq = CompletionQueue(self._alloc_id(), ring_mode, ring_capacity)
        self.cqs[cq.id] = cq
        return cq

    def create_mp_srq(self, server, cq, stride=64, multi_packet=True):
        srq = MpSrq(self._alloc_id(), server, cq, stride, multi_packet)
        self.srqs[srq.id] = srq
        return srq

    def create_inbox(self, server, name, callback=None):
        key = (server, name)
        self.inboxes[key] = deque()
        if callback is not None:
            self.inbox_callbacks[key] = callback
        return key

    def connect(self, src, dst, cq=None, srq=None, inbox=None, mtu=1024, kind="RC"):
        """One directed channel src -> dst; returns the sender-side QP."""
        qp_id = self._alloc_id()
        peer_id = self._alloc_id()
        qp = QueuePair(qp_id, src, peer_id, kind, mtu, cq, srq, inbox)
        peer = QueuePair(peer_id, dst, qp_id, kind, mtu, None, srq, inbox)
        self.qps[qp_id] = qp
        self.qps[peer_id] = peer
        self._in_flight[qp_id] = deque()
        self._last_deliver_time[qp_id] = 0
        return qp

    def destroy_pairs_to(self, server):
        """Drop channels touching a failed server; in-flight traffic is lost."""
        dead = [qid for qid, qp in self.qps.items()
                if self.qps[qp.peer].owner == server or qp.owner == server]
        for qid in dead:
            self._in_flight.pop(qid, None)
            self._ready.discard(qid)
        for qid in dead:
            self.qps.pop(qid, None)

    # -- verbs ----------------------------------------------------------------

    def post_send(self, qp, wr):
        if qp.id not in self.qps:
            raise FabricError("queue pair is not established")
        if wr.verb == SEND and qp.inbox is None and len(wr.payload) == 0:
            raise ValueError("SEND payload must be non-empty")
        if wr.verb in (WRITE, READ, FAA):
            device = self.devices[self.qps[qp.peer].owner]
            length = len(wr.payload) if wr.verb == WRITE else (wr.length or 8)
            if wr.raddr < 0 or wr.raddr + length > device.capacity:
                raise FabricError("remote address range invalid")
        now = self.loop.now if self.loop is not None else 0
        base = now + self.base_latency
        if self.jitter:
            base += int(self._rng.integers(0, self.jitter + 1))
        if wr.verb == FAA:
            base += self.faa_penalty
        deliver = max(base, self._last_deliver_time[qp.id] + self.pair_gap)
        self._last_deliver_time[qp.id] = deliver
        self._msg_seq += 1
        queue = self._in_flight[qp.id]
        if wr.verb == SEND and qp.inbox is not None:
            # application message channel (DRAM buffers): one unit, no PM landing
            queue.append(_Packet(qp, SEND, wr.payload, 0, wr.length, 0,
                                 wr.work_id, wr.signaled, self._msg_seq,
                                 True, deliver, []))
        elif wr.verb == SEND:
            self.sent_payload_bytes += len(wr.payload)
            chunks = [wr.payload[i:i + qp.mtu]
                      for i in range(0, len(wr.payload), qp.mtu)]
            shared_placements = []
            for i, chunk in enumerate(chunks):
                queue.append(_Packet(qp, SEND, chunk, 0, len(chunk), 0,
                                     wr.work_id, wr.signaled, self._msg_seq,
                                     i == len(chunks) - 1, deliver,
                                     shared_placements))
        else:
            queue.append(_Packet(qp, wr.verb, wr.payload, wr.raddr,
                                 wr.length, wr.add, wr.work_id, wr.signaled,
                                 self._msg_seq, True, deliver, []))
        self._ready.add(qp.id)
        self._posted_during.add(qp.id)
        self._schedule_pump(deliver)

    def post_recv(self, srq, base, length):
        srq.post_recv(base, length)
        self._schedule_pump(self.loop.now if self.loop is not None else 0)

    def poll_cq(self, cq, max_entries):
        return cq.poll(max_entries)

    # -- delivery -------------------------------------------------------------

    def _schedule_pump(self, t):
        if self.loop is None:
            return
        self.loop.call_at(t, self._pump)

    def _pump(self):
        self.deliver_step(self.loop.now)

    def deliver_step(self, now=None, seed=None, picker=None):
        """Deliver due in-flight messages in a seeded cross-pair interleaving.

        Per-pair order is preserved; the scheduler repeatedly picks one
        eligible pair at random and delivers its head packet.  ``picker`` may
        replace the RNG with an explicit chooser (index <- f(n_candidates))
        for exhaustive interleaving enumeration.
        """
        from bisect import insort

        rng = (np.random.default_rng(seed) if seed is not None else self._rng)
        completions = []
        stalled = set()
        tick = now if now is not None else 0

        def due(qid):
            queue = self._in_flight.get(qid)
            return bool(queue) and (now is None or queue[0].deliver_time <= now)

        candidates = sorted(qid for qid in self._ready if due(qid))
        self._posted_during.clear()
        while candidates:
            if picker is not None:
                i = picker(len(candidates))
            else:
                i = int(rng.integers(0, len(candidates)))
            qid = candidates[i]
            pkt = self._in_flight[qid][0]
            outcome = self._deliver_packet(pkt, tick, completions)
            if outcome == "stall":
                stalled.add(qid)
                candidates.pop(i)
            else:
                self._in_flight[qid].popleft()
                if not self._in_flight[qid]:
                    self._ready.discard(qid)
                if not due(qid):
                    candidates.pop(i)
            # inline handlers (RPC responses) may have posted new traffic
            if self._posted_during:
                for new_qid in self._posted_during:
                    if (new_qid not in stalled and due(new_qid)
                            and new_qid not in candidates):
                        insort(candidates, new_qid)
                self._posted_during.clear()
        return completions

    def _deliver_packet(self, pkt, now, completions):
        qp = pkt.qp
        dst = self.qps[qp.peer].owner
        if pkt.verb == SEND:
            if qp.inbox is not None:
                self.inboxes[qp.inbox].append((qp.id, pkt.payload))
                self._trace(now, qp, SEND, pkt.length, -1)
                cb = self.inbox_callbacks.get(qp.inbox)
                if cb is not None:
                    cb(qp.id, pkt.payload)
                if pkt.last and pkt.signaled:
                    self._complete(pkt, OK, completions)
                return "ok"
            srq = qp.srq
            if not srq.multi_packet:
                if not srq.buffer_queue:
                    return "stall"
                base, length = srq.buffer_queue[0]
                if len(pkt.payload) > length:
                    srq.buffer_queue.popleft()
                    srq.consumed_bases.append(base)
                    err = Completion(pkt.work_id, RECV_BUFFER_TOO_SMALL,
                                     qp.id, SEND, time=now)
                    srq.cq.push(err)
                    self._complete(pkt, RECV_BUFFER_TOO_SMALL, completions)
                    return "ok"
                srq.buffer_queue.popleft()
                srq.consumed_bases.append(base)
                addr = base
            else:
                addr = srq.place(len(pkt.payload))
                if addr is None:
                    return "stall"
            self.devices[srq.server].write(addr, pkt.payload)
            self.delivered_payload_bytes += len(pkt.payload)
            self._trace(now, qp, SEND, len(pkt.payload), addr)
            pkt.placements.append((addr, len(pkt.payload)))
            if pkt.last:
                ce = Completion(pkt.work_id, OK, qp.id, RECV,
                                placements=list(pkt.placements), time=now)
                srq.cq.push(ce)
                completions.append(ce)
                if pkt.signaled:
                    self._complete(pkt, OK, completions)
            return "ok"
        device = self.devices[dst]
        if pkt.verb == WRITE:
            device.write(pkt.raddr, pkt.payload)
            self.delivered_payload_bytes += len(pkt.payload)
            self._trace(now, qp, WRITE, len(pkt.payload), pkt.raddr)
            if pkt.signaled:
                self._complete(pkt, OK, completions)
        elif pkt.verb == READ:
            data = device.read(pkt.raddr, pkt.length)
            self._trace(now, qp, READ, pkt.length, pkt.raddr)
            self._complete(pkt, OK, completions, data=data)
        elif pkt.verb == FAA:
            old = int.from_bytes(device.read(pkt.raddr, 8), "little")
            device.write(pkt.raddr, ((old + pkt.add) % (1 << 64)).to_bytes(8, "little"))
            self._trace(now, qp, FAA, 8, pkt.raddr)
            self._complete(pkt, OK, completions, faa_old=old)
        return "ok"

    def _complete(self, pkt, status, completions, data=b"", faa_old=0):
        comp = Completion(pkt.work_id, status, pkt.qp.id, pkt.verb,
                          placements=list(pkt.placements) or None,
                          data=data, faa_old=faa_old)
        completions.append(comp)
        cq = pkt.qp.cq
        if cq is None:
            return
        if self.loop is not None and self.ack_latency:
            comp.time = self.loop.now + self.ack_latency
            self.loop.call_at(comp.time, cq.push, comp)
        else:
            comp.time = self.loop.now if self.loop is not None else 0
            cq.push(comp)

    def _trace(self, now, qp, verb, nbytes, dest):
        if self.trace is not None:
            self.trace.append((now, qp.id, verb, nbytes, dest))

    def trace_csv_rows(self):
        yield ("time", "qp", "verb", "bytes", "dest_address")
        for row in self.trace or ():
            yield row
