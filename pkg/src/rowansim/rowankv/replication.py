"""Pluggable replication paths between a worker and its backups.

Five strategies, each producing a different PM write-stream profile at the
backup:

* ROWAN  -- one SEND+READ into the backup's single fan-in log (1 stream).
* RPC    -- message to a backup worker, which appends to its own local
            backup log (n streams, backup CPU on the critical path).
* WRITE  -- one-sided WRITE into a log exclusive to this (worker, backup)
            pair ((m-1)*n streams per server).
* BATCH  -- WRITE variant that accumulates entries until 256B or a 5us
            timeout before emitting.
* SHARE  -- WRITE variant where all workers of a server share one remote
            log per backup, claiming offsets from a local counter; the
            fabric may land them out of order ((m-1) streams per server).
"""

from .. import fabric as fab
from ..sim import US

ROWAN = "ROWAN"
RPC = "RPC"
WRITE = "WRITE"
BATCH = "BATCH"
SHARE = "SHARE"

STRATEGIES = (ROWAN, RPC, WRITE, BATCH, SHARE)

BATCH_FLUSH_BYTES = 256
BATCH_FLUSH_TIMEOUT = 5 * US


class RemoteLogWriter:
    """Sender-side cursor over segments granted by a remote server.

    Used by WRITE/BATCH (one per worker and backup) and SHARE (one per server
    pair, shared by all local workers).  The grantee seals a segment back to
    the owner once it is full and every write into it has been acked.
    """

    def __init__(self, server, dst, stream_key):
        self.server = server
        self.dst = dst
        self.stream_key = stream_key
        self.segments = []  # (seg_id, base_addr, limit)
        self.offset = 0  # within the active segment
        self.active = None
        self.outstanding = {}  # seg_id -> in-flight write count
        self.filled = set()
        self.sealed = set()
        self.waiting = []  # payload backlog while no grant is available
        self.grant_requested = False

    def add_grant(self, seg, base, length):
        self.segments.append((seg, base, length))
        self.grant_requested = False
        if self.waiting:
            backlog, self.waiting = self.waiting, []
            for payload, on_addr in backlog:
                self.claim(len(payload), on_addr, payload)

    def _advance(self):
        if self.segments:
            self.active = self.segments.pop(0)
            self.offset = 0
            self.outstanding.setdefault(self.active[0], 0)
            return True
        self.active = None
        if not self.grant_requested:
            self.grant_requested = True
            self.server.request_grant(self.dst, self.stream_key)
        return False

    def claim(self, nbytes, on_addr, payload):
        """Reserve the next ``nbytes``; calls ``on_addr(seg, addr)`` when space
        exists (possibly later, after a grant arrives)."""
        if self.active is not None:
            seg, base, limit = self.active
            if self.offset + nbytes > limit:
                self._mark_filled(seg)
                self.active = None
            else:
                addr = base + self.offset
                self.offset += nbytes
                self.outstanding[seg] += 1
                on_addr(seg, addr)
                return
        if self._advance():
            self.claim(nbytes, on_addr, payload)
        else:
            self.waiting.append((payload, on_addr))
            self.server.metrics["replication_stalls"] += 1

    def _mark_filled(self, seg):
        self.filled.add(seg)
        self._try_seal(seg)

    def write_done(self, seg):
        self.outstanding[seg] -= 1
        self._try_seal(seg)

    def _try_seal(self, seg):
        if (seg in self.filled and seg not in self.sealed
                and self.outstanding.get(seg, 0) == 0):
            self.sealed.add(seg)
            self.server.send_seal(self.dst, seg)


class WorkerReplication:
    """Per-worker strategy facade; fans one record out to all backups."""

    def __init__(self, worker, strategy):
        self.worker = worker
        self.server = worker.server
        self.strategy = strategy
        self._batches = {}  # dst -> (payloads, ctx_keys, first_time)
        self._batch_timer = {}

    # -- entry point ---------------------------------------------------------

    def replicate(self, blob, backups, ack_key):
        """Send ``blob`` (joined record blocks) toward each backup.

        ``ack_key(dst)`` names the per-destination completion the worker
        expects back; the worker's ``on_replication_ack`` fires once per
        destination.

        Emissions toward a destination whose pairs were destroyed (failed
        server) are dropped; the pending request is resolved by the
        reconfiguration that follows.
        """
        for dst in backups:
            try:
                self._replicate_one(dst, blob, ack_key)
            except fab.FabricError:
                self.server.metrics["replication_to_dead"] += 1

    def _replicate_one(self, dst, blob, ack_key):
        if self.strategy == ROWAN:
            sender = self.worker.rowan_sender(dst)
            sender.write(blob, ack_key(dst),
                         lambda ack, d=dst: self.worker.on_replication_ack(
                             ack.work_id, persisted=ack.persisted))
        elif self.strategy == RPC:
            self.server.send_rpc(dst, ("repl", self.server.server_id,
                                       self.worker.idx, blob, ack_key(dst)),
                                 nbytes=len(blob) + 32)
        elif self.strategy == WRITE:
            self._write_path(dst, blob, [ack_key(dst)])
        elif self.strategy == SHARE:
            self._share_path(dst, blob, ack_key(dst))
        elif self.strategy == BATCH:
            self._batch_path(dst, blob, ack_key(dst))
        else:
            raise ValueError(f"unknown strategy {self.strategy}")

    # -- WRITE ----------------------------------------------------------------

    def _write_path(self, dst, blob, ack_keys, writer=None):
        writer = writer or self.worker.remote_log(dst)
        qp = self.worker.write_qp(dst)

        def on_addr(seg, addr):
            self.server.fabric.post_send(qp, fab.WorkRequest(
                fab.WRITE, payload=blob, raddr=addr, signaled=False))
            self.server.fabric.post_send(qp, fab.WorkRequest(
                fab.READ, raddr=addr, length=1,
                work_id=("ws", writer.stream_key, seg, tuple(ack_keys))))

        writer.claim(len(blob), on_addr, blob)

    # -- SHARE ----------------------------------------------------------------

    def _share_path(self, dst, blob, ack_key):
        writer = self.server.shared_log(dst)
        self._write_path(dst, blob, [ack_key], writer=writer)

    # -- BATCH ----------------------------------------------------------------

    def _batch_path(self, dst, blob, ack_key):
        payloads, keys, _ = self._batches.setdefault(dst, ([], [], 0))
        payloads.append(blob)
        keys.append(ack_key)
        total = sum(len(p) for p in payloads)
        if total >= self.server.config.batch_flush_bytes:
            self.flush_batch(dst)
        elif len(payloads) == 1 and self.server.loop is not None:
            token = self._batch_timer.get(dst, 0) + 1
            self._batch_timer[dst] = token
            self.server.loop.call_later(
                self.server.config.batch_flush_timeout,
                self._batch_timeout, dst, token)

    def _batch_timeout(self, dst, token):
        if self._batch_timer.get(dst) == token and dst in self._batches:
            self.flush_batch(dst)

    def flush_batch(self, dst=None):
        targets = [dst] if dst is not None else list(self._batches)
        for d in targets:
            entry = self._batches.pop(d, None)
            if not entry or not entry[0]:
                continue
            payloads, keys, _ = entry
            self._batch_timer[d] = self._batch_timer.get(d, 0) + 1
            self._write_path(d, b"".join(payloads), keys)

    def on_write_ack(self, work_id):
        """READ completion for a WRITE/BATCH/SHARE emission."""
        _, stream_key, seg, ack_keys = work_id
        writer = self.server.writer_by_key(stream_key)
        if writer is not None:
            writer.write_done(seg)
        for key in ack_keys:
            self.worker.on_replication_ack(key, persisted=True)


def backup_stream_count(strategy, num_servers, num_workers):
    """Replication-side PM append streams terminating at one server."""
    if strategy == ROWAN:
        return 1
    if strategy == RPC:
        return num_workers
    if strategy in (WRITE, BATCH):
        return (num_servers - 1) * num_workers
    if strategy == SHARE:
        return num_servers - 1
    raise ValueError(strategy)
