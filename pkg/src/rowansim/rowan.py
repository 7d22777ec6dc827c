"""One-sided fan-in write abstraction.

Senders issue a SEND followed by a 1-byte READ on the same reliable pair; the
receiver-side NIC lands payloads sequentially into persistent-memory segments
fed by a control loop, and the READ completion doubles as the durability ack.
No receiver CPU runs on the data path.

Also provides the straightforward two-round-trip realization (remote
fetch-and-add for an address, then a WRITE), kept as a baseline.
"""

from dataclasses import dataclass, field

from . import fabric as fab
from .rowankv.segments import OWNER_CONTROL, USED, USING
from .sim import MS

DEFAULT_QUIESCENCE_WAIT = 2 * MS
DEFAULT_RETRY_TIMEOUT = 1 * MS
DEFAULT_INITIAL_POST = 512
DEFAULT_BATCH = 128


class ConfigError(ValueError):
    pass


class OpenError(RuntimeError):
    pass


@dataclass
class RowanAck:
    work_id: object
    persisted: bool


@dataclass
class RowanMetrics:
    segments_posted: int = 0
    segments_used: int = 0
    alloc_stalls: int = 0


class RowanInstance:
    """Receiver side: one MP SRQ over PM segments plus the control loop state."""

    def __init__(self, receiver, fabric, segtable, loop=None, stride=64,
                 initial_post=DEFAULT_INITIAL_POST, batch=DEFAULT_BATCH,
                 quiescence_wait=DEFAULT_QUIESCENCE_WAIT,
                 retry_timeout=DEFAULT_RETRY_TIMEOUT):
        if not retry_timeout < quiescence_wait:
            raise ConfigError("retry_timeout must be below quiescence_wait; "
                              "quiescence soundness relies on it")
        if not hasattr(fabric, "rowan_receivers"):
            fabric.rowan_receivers = {}
        if receiver in fabric.rowan_receivers:
            raise OpenError(f"{receiver} already runs a fan-in log instance")
        self.receiver = receiver
        self.fabric = fabric
        self.segtable = segtable
        self.loop = loop
        self.quiescence_wait = quiescence_wait
        self.retry_timeout = retry_timeout
        self.batch = batch
        self.initial_post = initial_post
        self.cq = fabric.create_cq(ring_mode=True, ring_capacity=4096)
        self.srq = fabric.create_mp_srq(receiver, self.cq, stride=stride)
        self.posted = []  # segment ids in post order
        self._done = 0  # posted[:_done] already returned as Used
        self._probe = 0  # posted[:_probe] observed non-zero
        self._maturing = []  # (frontier_index, first_observed_time)
        self.metrics = RowanMetrics()
        self._post_segments(initial_post, required=True)
        fabric.rowan_receivers[receiver] = self

    @property
    def outstanding(self):
        return len(self.posted) - self._done

    def _post_segments(self, count, required=False):
        segs = self.segtable.alloc_batch(count, OWNER_CONTROL)
        if required and len(segs) < count:
            raise OpenError(f"needed {count} Free segments, found {len(segs)}")
        if len(segs) < count:
            self.metrics.alloc_stalls += 1
        for seg in sorted(segs):  # increasing address order
            addr = self.segtable.address(seg)
            self.segtable.device.write(addr, bytes(64))  # zero the probe word
            self.fabric.post_recv(self.srq, addr, self.segtable.segment_size)
            self.posted.append(seg)
            self.metrics.segments_posted += 1

    def control_step(self, now=0):
        """Identify quiesced segments, mark them Used, and repost buffers.

        A posted segment whose first 64 bits turned nonzero proves the NIC
        moved past every earlier segment; those become Used once the
        quiescence window has elapsed since that observation.
        """
        while self._probe < len(self.posted):
            seg = self.posted[self._probe]
            first = self.segtable.device.read(self.segtable.address(seg), 8)
            if first == bytes(8):
                break
            self._probe += 1
        # posted[_probe - 1] is the active segment; only the ones before it
        # are proven fully consumed
        frontier = self._probe - 2
        if frontier > self._done - 1:
            if not self._maturing or self._maturing[-1][0] < frontier:
                self._maturing.append((frontier, now))
        used = []
        matured = self._done - 1
        while self._maturing and now - self._maturing[0][1] >= self.quiescence_wait:
            matured = max(matured, self._maturing.pop(0)[0])
        for i in range(self._done, matured + 1):
            seg = self.posted[i]
            self.segtable.transition(seg, USED)
            used.append(seg)
            self.metrics.segments_used += 1
        if matured + 1 > self._done:
            self._done = matured + 1
        if used:
            deficit = self.initial_post - self.outstanding
            if deficit > 0:
                self._post_segments(min(self.batch, deficit))
        if self._probe >= len(self.posted):
            # every posted segment already started filling; feed the queue so
            # stalled senders can make progress (flow control)
            self._post_segments(self.batch)
        return used

    def close(self):
        self.fabric.rowan_receivers.pop(self.receiver, None)


def open_instance(receiver, fabric, segtable, **kwargs):
    return RowanInstance(receiver, fabric, segtable, **kwargs)


@dataclass
class _PendingWrite:
    work_id: object
    payload: bytes
    callback: object
    retries: int = 0
    done: bool = False


class RowanSender:
    """Sender side of one (worker, receiver) reliable pair."""

    def __init__(self, fabric, qp, loop=None,
                 retry_timeout=DEFAULT_RETRY_TIMEOUT, max_retries=8):
        self.fabric = fabric
        self.qp = qp
        self.loop = loop
        self.retry_timeout = retry_timeout
        self.max_retries = max_retries
        self.pending = {}
        self.ops_completed = 0
        self.retries = 0
        self.round_trips = 0

    def write(self, payload, work_id, callback=None):
        if len(payload) == 0 or len(payload) % 64 != 0:
            raise ValueError("payload must be a positive multiple of 64B")
        self.pending[work_id] = _PendingWrite(work_id, payload, callback)
        self._post(work_id)
        return self.pending[work_id]

    def _post(self, work_id):
        pw = self.pending[work_id]
        try:
            self.fabric.post_send(self.qp, fab.WorkRequest(
                fab.SEND, payload=pw.payload, signaled=False))
            self.fabric.post_send(self.qp, fab.WorkRequest(
                fab.READ, raddr=0, length=1, work_id=("rowan", work_id)))
        except fab.FabricError:
            # pairs to a failed receiver are gone; reconfiguration resolves
            # the pending write
            return
        self.round_trips += 1
        if self.loop is not None:
            self.loop.call_later(self.retry_timeout, self._check_retry,
                                 work_id, pw.retries)

    def _check_retry(self, work_id, retries_at_post):
        pw = self.pending.get(work_id)
        if pw is None or pw.done or pw.retries != retries_at_post:
            return
        if pw.retries >= self.max_retries:
            pw.done = True
            del self.pending[work_id]
            if pw.callback is not None:
                pw.callback(RowanAck(work_id, persisted=False))
            return
        pw.retries += 1
        self.retries += 1
        self._post(work_id)

    def on_completion(self, completion):
        """Route a READ completion from the shared CQ; True if it was ours."""
        wid = completion.work_id
        if not (isinstance(wid, tuple) and len(wid) == 2 and wid[0] == "rowan"):
            return False
        pw = self.pending.pop(wid[1], None)
        if pw is None or pw.done:
            return True  # late duplicate ack from a retry
        pw.done = True
        self.ops_completed += 1
        if pw.callback is not None:
            pw.callback(RowanAck(wid[1], persisted=True))
        return True


class FaaWriteChannel:
    """Two-round-trip baseline: FAA reserves an address, WRITE lands the data.

    Yields the same durable payload set as the fan-in instance for the same
    workload, at twice the round trips per write.
    """

    SEQUENCER_BYTES = 64

    def __init__(self, receiver, fabric, segtable, log_segments=4):
        run = segtable.alloc_contiguous(log_segments + 1, OWNER_CONTROL)
        self.receiver = receiver
        self.fabric = fabric
        self.segtable = segtable
        self.seq_addr = segtable.address(run[0])
        self.log_base = segtable.address(run[1])
        self.log_len = log_segments * segtable.segment_size
        self.segments = run

    def sender(self, qp):
        return _FaaWriteSender(self, qp)


class _FaaWriteSender:
    def __init__(self, channel, qp):
        self.channel = channel
        self.qp = qp
        self.fabric = channel.fabric
        self.pending = {}
        self.ops_completed = 0
        self.round_trips = 0

    def write(self, payload, work_id, callback=None):
        if len(payload) == 0 or len(payload) % 64 != 0:
            raise ValueError("payload must be a positive multiple of 64B")
        self.pending[work_id] = (payload, callback)
        self.fabric.post_send(self.qp, fab.WorkRequest(
            fab.FAA, raddr=self.channel.seq_addr, add=len(payload),
            work_id=("faa", work_id)))
        self.round_trips += 1

    def on_completion(self, completion):
        wid = completion.work_id
        if not isinstance(wid, tuple):
            return False
        if wid[0] == "faa":
            payload, _ = self.pending[wid[1]]
            offset = completion.faa_old
            if offset + len(payload) > self.channel.log_len:
                raise RuntimeError("baseline log area exhausted")
            self.fabric.post_send(self.qp, fab.WorkRequest(
                fab.WRITE, payload=payload,
                raddr=self.channel.log_base + offset, signaled=False))
            self.fabric.post_send(self.qp, fab.WorkRequest(
                fab.READ, raddr=self.channel.seq_addr, length=1,
                work_id=("faa-ack", wid[1])))
            self.round_trips += 1
            return True
        if wid[0] == "faa-ack":
            payload, callback = self.pending.pop(wid[1])
            self.ops_completed += 1
            if callback is not None:
                callback(RowanAck(wid[1], persisted=True))
            return True
        return False
