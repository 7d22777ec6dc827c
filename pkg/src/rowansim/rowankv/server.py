"""One KV server: worker request paths, per-worker t-logs, the fan-in backup
log, DRAM indexes, segment digest, and garbage collection.

A PUT appends the record to the worker's t-log, replicates it to every backup
through the configured strategy, and only acks the client (and publishes the
record in the index) once every backup ack arrived.  Digest actors parse used
backup-log segments into the indexes and retire segments whose versions are
covered by the per-shard commit horizon.
"""

import heapq
from collections import defaultdict, deque
from dataclasses import dataclass, field

from .. import fabric as fab
from .. import rowan as rowan_lib
from ..sim import MS, US
from . import replication as repl
from .index import ShardIndex, hash_key
from .log_entry import (
    HEADER_LEN, OP_COMMITVER, OP_DEL, OP_PUT, block_length, decode_scan,
    encode_log_entry, entry_length, parse_block,
)
from .segments import (
    COMMITTED, FREE, OWNER_CLEAN, OWNER_CONTROL, OWNER_WORKER, USED, USING,
    AllocationError, SegmentTable,
)


class SaturationError(RuntimeError):
    """Free segments ran out and the run cannot make progress."""


class CommittedSafetyViolation(AssertionError):
    """A segment tried to commit versions beyond the commit horizon."""


@dataclass
class ServerConfig:
    num_workers: int = 4
    num_digest: int = 2
    num_clean: int = 1
    num_segments: int = 128
    segment_size: int = 64 * 1024
    mtu: int = 1024
    xpbuffer_capacity: int = 64
    xpline_size: int = 256
    index_buckets: int = 1024
    gc_threshold: float = 0.75
    commit_tick: int = 15 * MS
    control_interval: int = 50 * US
    digest_interval: int = 100 * US
    gc_interval: int = 1 * MS
    digest_segments_per_step: int = 8
    max_inflight_per_worker: int = 16
    strategy: str = repl.ROWAN
    batch_flush_bytes: int = repl.BATCH_FLUSH_BYTES
    batch_flush_timeout: int = repl.BATCH_FLUSH_TIMEOUT
    rowan_initial_post: int = 8
    rowan_batch: int = 4
    rowan_quiescence: int = 2 * MS
    rowan_retry: int = 1 * MS


@dataclass
class Result:
    status: str  # ok | not_found | wrong_shard | blocked | aborted | saturated
    value: bytes = None
    term: int = 0
    server: object = None


@dataclass
class ShardState:
    shard_id: int
    role: str  # primary | backup
    shard_version: int = 0
    commit_sent: int = 0

    def next_version(self):
        self.shard_version += 1
        return self.shard_version


class VersionWindow:
    """Highest version v such that all versions <= v are resolved."""

    def __init__(self, base=0):
        self.base = base
        self._heap = []

    def resolve(self, version):
        heapq.heappush(self._heap, version)
        while self._heap and self._heap[0] == self.base + 1:
            heapq.heappop(self._heap)
            self.base += 1


@dataclass
class PutCtx:
    ctx_id: int
    op: int
    shard: int
    version: int
    key: bytes
    entry_len: int
    seg: int
    addr: int
    needed: int
    submit_time: int
    done: object
    acked: int = 0
    finished: bool = False


class AppendLog:
    """Current Using segment plus cursor for one log owner."""

    def __init__(self, server, owner, on_seal):
        self.server = server
        self.owner = owner
        self.on_seal = on_seal
        self.seg = None
        self.offset = 0

    def append(self, blob):
        table = self.server.segtable
        if len(blob) > table.segment_size:
            raise ValueError("record larger than a segment")
        if self.seg is not None and self.offset + len(blob) > table.segment_size:
            seg, self.seg = self.seg, None
            self.on_seal(seg)
        if self.seg is None:
            try:
                self.seg = table.alloc(self.owner)
            except AllocationError:
                return None
            self.offset = 0
        addr = table.address(self.seg) + self.offset
        self.server.device.write(addr, blob)
        self.offset += len(blob)
        return self.seg, addr

    def seal_now(self):
        if self.seg is not None and self.offset > 0:
            seg, self.seg = self.seg, None
            self.on_seal(seg)


class Worker:
    def __init__(self, server, idx):
        self.server = server
        self.idx = idx
        self.cq = None
        self.tlog = AppendLog(server, OWNER_WORKER, server._tlog_sealed)
        self.inflight = {}
        self.queue = deque()
        self.senders_by_qp = {}
        self.rowan_senders = {}
        self.write_qps = {}
        self.remote_logs = {}
        self.repl = repl.WorkerReplication(self, server.config.strategy)
        self._ctx_seq = 0

    # -- wiring ----------------------------------------------------------------

    def attach(self, fabric):
        self.cq = fabric.create_cq()
        self.cq.callback = self._on_completion

    def connect_rowan(self, dst, srq):
        qp = self.server.fabric.connect(self.server.server_id, dst,
                                        cq=self.cq, srq=srq,
                                        mtu=self.server.config.mtu)
        sender = rowan_lib.RowanSender(
            self.server.fabric, qp, loop=self.server.loop,
            retry_timeout=self.server.config.rowan_retry)
        self.rowan_senders[dst] = sender
        self.senders_by_qp[qp.id] = sender

    def connect_write(self, dst):
        qp = self.server.fabric.connect(self.server.server_id, dst,
                                        cq=self.cq,
                                        mtu=self.server.config.mtu)
        self.write_qps[dst] = qp

    def rowan_sender(self, dst):
        return self.rowan_senders[dst]

    def write_qp(self, dst):
        return self.write_qps[dst]

    def remote_log(self, dst):
        writer = self.remote_logs.get(dst)
        if writer is None:
            key = ("w", self.server.server_id, self.idx, dst)
            writer = repl.RemoteLogWriter(self.server, dst, key)
            self.remote_logs[dst] = writer
            self.server.writers[key] = writer
            self.server.request_grant(dst, key)
        return writer

    # -- request path ---------------------------------------------------------

    def enqueue(self, op, key, value, done, submit_time):
        if op == "get":
            self._do_get(key, done)
            return
        if len(self.inflight) >= self.server.config.max_inflight_per_worker:
            self.queue.append((op, key, value, done, submit_time))
        else:
            self._start_put(op, key, value, done, submit_time)

    def _do_get(self, key, done):
        server = self.server
        shard = server.cluster.shard_of(key)
        index = server.indexes.get(shard)
        hit = index.lookup(key, server.entry_meta_reader) if index else None
        if hit is None:
            source = server.migration_sources.get(shard)
            if source is not None:
                server.cluster.route_get(source, key, done)
                return
            done(Result("not_found", server=server.server_id))
            return
        _, addr = hit
        op, value = server.read_value(addr)
        if op == OP_DEL:
            done(Result("not_found", server=server.server_id))
        else:
            done(Result("ok", value=value, server=server.server_id))

    def _start_put(self, op, key, value, done, submit_time):
        server = self.server
        shard = server.cluster.shard_of(key)
        state = server.shard_states[shard]
        version = state.next_version()
        opcode = OP_PUT if op == "put" else OP_DEL
        blocks = encode_log_entry(opcode, shard, version, key, value,
                                  mtu=server.config.mtu)
        blob = b"".join(blocks)
        landed = self.tlog.append(blob)
        if landed is None:
            server.metrics["saturated_puts"] += 1
            server.version_windows[shard].resolve(version)
            done(Result("saturated", server=server.server_id))
            raise SaturationError(f"server {server.server_id} out of segments")
        seg, addr = landed
        server.seg_outstanding[seg] += 1
        self._ctx_seq += 1
        backups = server.cluster.backups_of(shard)
        ctx = PutCtx(self._ctx_seq, opcode, shard, version, key, len(blob),
                     seg, addr, len(backups), submit_time, done)
        if not backups:
            self._finish(ctx)
            return
        self.inflight[ctx.ctx_id] = ctx
        server.repl_counts[shard] += 1
        self.repl.replicate(
            blob, backups, lambda dst: (self.idx, ctx.ctx_id, dst))

    def on_replication_ack(self, ack_key, persisted):
        if ack_key[0] == "cv":
            return  # commit-horizon broadcasts carry no request context
        ctx = self.inflight.get(ack_key[1])
        if ctx is None or ctx.finished:
            return
        if not persisted:
            self._abort(ctx, "replication_failed")
            return
        ctx.acked += 1
        if ctx.acked >= ctx.needed:
            del self.inflight[ctx.ctx_id]
            self._finish(ctx)

    def _finish(self, ctx):
        ctx.finished = True
        server = self.server
        server._index_install(ctx.shard, ctx.key, ctx.version, ctx.addr,
                              ctx.entry_len)
        server._release_outstanding(ctx.seg)
        server.version_windows[ctx.shard].resolve(ctx.version)
        server.metrics["puts_acked"] += 1
        latency = (server.loop.now - ctx.submit_time) if server.loop else 0
        ctx.done(Result("ok", server=server.server_id))
        server.put_latencies.append(latency)
        self._pump_queue()

    def _abort(self, ctx, status):
        ctx.finished = True
        self.inflight.pop(ctx.ctx_id, None)
        server = self.server
        server._release_outstanding(ctx.seg)
        server.version_windows[ctx.shard].resolve(ctx.version)
        ctx.done(Result(status, term=server.term, server=server.server_id))
        self._pump_queue()

    def abort_all(self, status="aborted"):
        for ctx in list(self.inflight.values()):
            self._abort(ctx, status)
        while self.queue:
            _, _, _, done, _ = self.queue.popleft()
            done(Result(status, term=self.server.term,
                        server=self.server.server_id))

    def _pump_queue(self):
        while (self.queue and
               len(self.inflight) < self.server.config.max_inflight_per_worker):
            op, key, value, done, t = self.queue.popleft()
            self._start_put(op, key, value, done, t)

    def _on_completion(self, completion):
        wid = completion.work_id
        sender = self.senders_by_qp.get(completion.qp_id)
        if sender is not None and sender.on_completion(completion):
            return
        if isinstance(wid, tuple) and wid and wid[0] == "ws":
            self.repl.on_write_ack(wid)
        elif isinstance(wid, tuple) and wid and wid[0] == "mig":
            self.server.cluster.on_migration_ack(wid)


class Server:
    def __init__(self, server_id, config, device, fabric, loop, cluster):
        self.server_id = server_id
        self.config = config
        self.device = device
        self.fabric = fabric
        self.loop = loop
        self.cluster = cluster
        self.alive = True
        self.term = 0
        self.segtable = SegmentTable(device, config.num_segments,
                                     config.segment_size)
        self.shard_states = {}
        self.indexes = {}
        self.version_windows = {}
        self.commit_ver_array = {}
        self.registry = {}  # (shard, version) -> [key, [block addrs]]
        self.partial_groups = {}  # (shard, version, cnt) -> {seq: addr}
        self.digest_queue = deque()
        self.await_commit = {}
        self.committed_segs = set()
        self.live_bytes = defaultdict(int)
        self.seg_outstanding = defaultdict(int)
        self.sealed_tlogs = set()
        self.writers = {}
        self.shared_logs = {}
        self.rpc_blogs = {}
        self.rpc_qps = {}
        self.migration_sources = {}
        self.blocked_all = False
        self.blocked_shards = set()
        self.work_items = 0
        self.metrics = defaultdict(int)
        self.request_counts = defaultdict(int)
        self.repl_counts = defaultdict(int)
        self.put_latencies = []
        self.rowan = None
        self.clean_log = AppendLog(self, OWNER_CLEAN, self._clean_sealed)
        self.workers = [Worker(self, i) for i in range(config.num_workers)]
        self.commit_checks = 0

    # -- lifecycle ---------------------------------------------------------------

    def start(self):
        self.fabric.register_memory(self.server_id, self.device)
        self.fabric.create_inbox(self.server_id, "rpc", self._on_rpc)
        for worker in self.workers:
            worker.attach(self.fabric)
        self.rowan = rowan_lib.RowanInstance(
            self.server_id, self.fabric, self.segtable, loop=self.loop,
            initial_post=self.config.rowan_initial_post,
            batch=self.config.rowan_batch,
            quiescence_wait=self.config.rowan_quiescence,
            retry_timeout=self.config.rowan_retry)
        if self.loop is not None:
            self._tick(self._control_tick, self.config.control_interval)
            self._tick(self._digest_tick, self.config.digest_interval)
            self._tick(self._gc_tick, self.config.gc_interval)
            self._tick(self._commit_tick, self.config.commit_tick)

    def _tick(self, fn, interval):
        def wrapper():
            if not self.alive:
                return
            fn()
            self.loop.call_later(interval, wrapper)
        self.loop.call_later(interval, wrapper)

    def connect_to(self, other):
        for worker in self.workers:
            worker.connect_rowan(other.server_id, other.rowan.srq)
            worker.connect_write(other.server_id)
        self.rpc_qps[other.server_id] = self.fabric.connect(
            self.server_id, other.server_id,
            inbox=(other.server_id, "rpc"), kind="UD")

    def crash(self):
        """Lose all volatile state; PM (device contents) survives."""
        self.alive = False
        self.indexes.clear()
        self.shard_states.clear()
        self.version_windows.clear()
        self.commit_ver_array.clear()
        self.registry.clear()
        self.partial_groups.clear()
        self.digest_queue.clear()
        self.await_commit.clear()
        self.live_bytes.clear()
        self.writers.clear()
        self.shared_logs.clear()
        for worker in self.workers:
            worker.inflight.clear()
            worker.queue.clear()
        if self.rowan is not None:
            self.rowan.close()

    # -- shard assignment ---------------------------------------------------------

    def assign_shard(self, shard, role, shard_version=0):
        self.shard_states[shard] = ShardState(shard, role, shard_version)
        self.version_windows[shard] = VersionWindow(shard_version)
        if shard not in self.indexes:
            self.indexes[shard] = ShardIndex(self.config.index_buckets)
        self.commit_ver_array.setdefault(shard, 0)

    def drop_shard(self, shard):
        self.shard_states.pop(shard, None)
        self.version_windows.pop(shard, None)
        index = self.indexes.pop(shard, None)
        if index is not None:
            for addr in index.addresses():
                seg = self.segtable.segment_of(addr)
                if seg is not None:
                    self.live_bytes[seg] -= self._entry_len_at(addr)

    # -- client requests -----------------------------------------------------------

    def accepts(self, shard):
        return (self.alive and not self.blocked_all
                and shard not in self.blocked_shards
                and shard in self.shard_states
                and self.shard_states[shard].role == "primary")

    def submit(self, op, key, value, done, client_id=0):
        if not self.alive:
            done(Result("dead", server=self.server_id))
            return
        shard = self.cluster.shard_of(key)
        if not self.accepts(shard):
            status = "blocked" if (self.blocked_all or shard in self.blocked_shards) \
                else "wrong_shard"
            self.metrics["rejects"] += 1
            done(Result(status, term=self.term, server=self.server_id))
            return
        self.cluster.record_accept(shard, self.server_id)
        self.request_counts[shard] += 1
        # clients pin a worker per server, so worker load tracks client
        # count rather than key popularity
        worker = self.workers[client_id % len(self.workers)]
        now = self.loop.now if self.loop else 0
        worker.enqueue(op, key, value, done, now)

    # -- log reading helpers ----------------------------------------------------------

    def _header_at(self, addr):
        raw = self.device.read(addr, HEADER_LEN)
        op = raw[0]
        shard = int.from_bytes(raw[2:4], "little")
        version = int.from_bytes(raw[4:10], "little")
        cnt = int.from_bytes(raw[14:16], "little")
        key_len = int.from_bytes(raw[18:20], "little")
        val_len = int.from_bytes(raw[20:24], "little")
        return op, shard, version, cnt, key_len, val_len

    def entry_meta_reader(self, addr):
        op, shard, version, cnt, key_len, val_len = self._header_at(addr)
        key = self.device.read(addr + HEADER_LEN, key_len)
        return key, version

    def _entry_len_at(self, addr):
        _, _, _, _, key_len, val_len = self._header_at(addr)
        return entry_length(key_len, val_len, self.config.mtu)

    def _block_addrs(self, addr, shard, version, cnt, key_len, val_len):
        reg = self.registry.get((shard, version))
        if reg is not None:
            return reg[1]
        addrs = [addr]
        for seq in range(1, cnt):
            addrs.append(addrs[-1] + block_length(key_len, val_len, seq - 1,
                                                  self.config.mtu))
        return addrs

    def read_value(self, addr):
        op, shard, version, cnt, key_len, val_len = self._header_at(addr)
        cap = self.config.mtu - HEADER_LEN
        total = key_len + val_len
        payload = b""
        for seq, block_addr in enumerate(self._block_addrs(
                addr, shard, version, cnt, key_len, val_len)):
            chunk = min(cap, total - seq * cap)
            payload += self.device.read(block_addr + HEADER_LEN, chunk)
        return op, payload[key_len:key_len + val_len]

    def read_entry_record(self, addr):
        """Full (op, shard, version, key, value) of the record at ``addr``."""
        op, shard, version, cnt, key_len, val_len = self._header_at(addr)
        _, value = self.read_value(addr)
        key = self.device.read(addr + HEADER_LEN, key_len)
        return op, shard, version, key, value

    # -- index + liveness accounting -----------------------------------------------

    def _index_install(self, shard, key, version, addr, entry_len):
        index = self.indexes.get(shard)
        if index is None:
            return False
        accepted, old_addr = index.upsert(key, version, addr,
                                          self.entry_meta_reader)
        if accepted:
            seg = self.segtable.segment_of(addr)
            if seg is not None:
                self.live_bytes[seg] += entry_len
            if old_addr is not None:
                old_seg = self.segtable.segment_of(old_addr)
                if old_seg is not None:
                    self.live_bytes[old_seg] -= self._entry_len_at(old_addr)
        return accepted

    # -- t-log sealing ----------------------------------------------------------------

    def _tlog_sealed(self, seg):
        self.sealed_tlogs.add(seg)
        self._maybe_commit_tlog(seg)

    def _release_outstanding(self, seg):
        self.seg_outstanding[seg] -= 1
        self._maybe_commit_tlog(seg)

    def _maybe_commit_tlog(self, seg):
        if seg in self.sealed_tlogs and self.seg_outstanding[seg] == 0:
            self.sealed_tlogs.discard(seg)
            self.segtable.transition(seg, COMMITTED)
            self.committed_segs.add(seg)

    def _clean_sealed(self, seg):
        self.segtable.transition(seg, COMMITTED)
        self.committed_segs.add(seg)

    # -- RPC plumbing ---------------------------------------------------------------------

    def send_rpc(self, dst, msg, nbytes=64):
        qp = self.rpc_qps.get(dst)
        if qp is None:
            return
        self.fabric.post_send(qp, fab.WorkRequest(
            fab.SEND, payload=msg, length=nbytes, signaled=False))

    def request_grant(self, dst, stream_key):
        self.send_rpc(dst, ("grant", self.server_id, stream_key))

    def send_seal(self, dst, seg):
        self.send_rpc(dst, ("seal", seg))

    def shared_log(self, dst):
        writer = self.shared_logs.get(dst)
        if writer is None:
            key = ("s", self.server_id, dst)
            writer = repl.RemoteLogWriter(self, dst, key)
            self.shared_logs[dst] = writer
            self.writers[key] = writer
            self.request_grant(dst, key)
        return writer

    def writer_by_key(self, key):
        return self.writers.get(key)

    def _on_rpc(self, qp_id, msg):
        if not self.alive:
            return
        self.work_items += 1
        kind = msg[0]
        if kind == "repl":
            _, src, worker_idx, blob, ack_key = msg
            log = self.rpc_blogs.get(worker_idx)
            if log is None:
                log = AppendLog(self, OWNER_CONTROL, self._backup_seg_sealed)
                self.rpc_blogs[worker_idx] = log
            if log.append(blob) is None:
                raise SaturationError(f"{self.server_id}: rpc b-log exhausted")
            self.cluster.reply_rpc(self.server_id, src, ("repl_ack", ack_key))
        elif kind == "repl_ack":
            _, ack_key = msg
            if ack_key[0] != "cv":
                self.workers[ack_key[0]].on_replication_ack(ack_key, True)
        elif kind == "grant":
            _, src, stream_key = msg
            try:
                seg = self.segtable.alloc(OWNER_CONTROL)
            except AllocationError:
                self.cluster.reply_rpc(self.server_id, src,
                                       ("grant_fail", stream_key))
                return
            self.cluster.reply_rpc(
                self.server_id, src,
                ("grant_ok", stream_key, seg, self.segtable.address(seg),
                 self.segtable.segment_size))
        elif kind == "grant_ok":
            _, stream_key, seg, addr, length = msg
            writer = self.writers.get(stream_key)
            if writer is not None:
                writer.add_grant(seg, addr, length)
        elif kind == "grant_fail":
            _, stream_key = msg
            self.metrics["grant_failures"] += 1
            writer = self.writers.get(stream_key)
            if writer is not None:
                writer.grant_requested = False
        elif kind == "seal":
            _, seg = msg
            self._backup_seg_sealed(seg)
        else:
            self.cluster.on_server_rpc(self, msg)

    def _backup_seg_sealed(self, seg):
        self.segtable.transition(seg, USED)
        self.digest_queue.append(seg)

    # -- background actors -------------------------------------------------------------------

    def _control_tick(self):
        used = self.rowan.control_step(self.loop.now if self.loop else 0)
        self.digest_queue.extend(used)

    def control_step(self, now=None):
        if now is None:
            now = self.loop.now if self.loop else 0
        used = self.rowan.control_step(now)
        self.digest_queue.extend(used)
        return used

    def _digest_tick(self):
        self.digest_step()

    def digest_step(self):
        done = []
        budget = self.config.digest_segments_per_step
        while self.digest_queue and budget > 0:
            seg = self.digest_queue.popleft()
            self._digest_segment(seg)
            budget -= 1
        done.extend(self._try_commit_transitions())
        return done

    def _digest_segment(self, seg):
        base = self.segtable.address(seg)
        buf = self.device.read(base, self.segtable.segment_size)
        result = decode_scan(buf, mtu=self.config.mtu, base=base)
        maxver = {}
        for entry in result.entries:
            self._digest_entry(entry, maxver)
        for shard, version, cnt, offsets in result.incomplete:
            group = self.partial_groups.setdefault((shard, version, cnt), {})
            group.update(offsets)
            maxver[shard] = max(maxver.get(shard, 0), version)
            if len(group) == cnt:
                entry = self._assemble_group(shard, version, cnt, group)
                if entry is not None:
                    self._digest_entry(entry, maxver)
                del self.partial_groups[(shard, version, cnt)]
        if maxver:
            self.await_commit[seg] = maxver
        else:
            self._commit_backup_segment(seg, {})

    def _assemble_group(self, shard, version, cnt, group):
        blocks = {}
        for seq, addr in group.items():
            raw = self.device.read(addr, self._padded_block_len(addr))
            head = parse_block(raw, 0, self.config.mtu)
            if head is None:
                return None
            blocks[seq] = (addr, head)
        first = blocks[0][1]
        payload = b"".join(blocks[s][1].payload for s in range(cnt))
        key = payload[:first.key_len]
        value = payload[first.key_len:first.key_len + first.val_len]
        from .log_entry import LogEntry
        return LogEntry(first.op, shard, version, key, value,
                        checksum=first.checksum, cnt=cnt,
                        block_offsets=[blocks[s][0] for s in range(cnt)],
                        length=entry_length(first.key_len, first.val_len,
                                            self.config.mtu))

    def _padded_block_len(self, addr):
        _, _, _, cnt, key_len, val_len = self._header_at(addr)
        raw = self.device.read(addr + 16, 2)
        seq = int.from_bytes(raw, "little")
        return block_length(key_len, val_len, seq, self.config.mtu)

    def _digest_entry(self, entry, maxver):
        if entry.op == OP_COMMITVER:
            cur = self.commit_ver_array.get(entry.shard_id, 0)
            self.commit_ver_array[entry.shard_id] = max(cur, entry.version)
            return
        maxver[entry.shard_id] = max(maxver.get(entry.shard_id, 0),
                                     entry.version)
        if entry.cnt > 1:
            self.registry[(entry.shard_id, entry.version)] = [
                entry.key, list(entry.block_offsets)]
        if entry.shard_id in self.indexes:
            self._index_install(entry.shard_id, entry.key, entry.version,
                                entry.block_offsets[0], entry.length)

    def _try_commit_transitions(self):
        committed = []
        for seg in sorted(self.await_commit):
            maxver = self.await_commit[seg]
            covered = all(
                version <= self.commit_ver_array.get(shard, 0)
                for shard, version in maxver.items()
                if shard in self.shard_states)
            if covered:
                del self.await_commit[seg]
                self._commit_backup_segment(seg, maxver)
                committed.append(seg)
        return committed

    def _commit_backup_segment(self, seg, maxver):
        # committed-safety instrumentation: re-verify the horizon condition
        # at the transition itself
        for shard, version in maxver.items():
            if shard in self.shard_states and \
                    version > self.commit_ver_array.get(shard, 0):
                raise CommittedSafetyViolation(
                    f"segment {seg}: shard {shard} max version {version} "
                    f"beyond commit horizon")
        self.commit_checks += 1
        self.segtable.transition(seg, COMMITTED)
        self.committed_segs.add(seg)

    def _commit_tick(self):
        self.broadcast_commit_vers()

    def broadcast_commit_vers(self):
        """Push fresh per-shard commit horizons into the backups' logs."""
        for shard, state in self.shard_states.items():
            if state.role != "primary":
                continue
            horizon = self.version_windows[shard].base
            if horizon <= state.commit_sent:
                continue
            backups = self.cluster.backups_of(shard)
            if not backups:
                state.commit_sent = horizon
                continue
            blob = b"".join(encode_log_entry(OP_COMMITVER, shard, horizon,
                                             b"", b"", mtu=self.config.mtu))
            worker = self.workers[shard % len(self.workers)]
            worker.repl.replicate(blob, backups,
                                  lambda dst: ("cv", shard, horizon, dst))
            state.commit_sent = horizon

    # -- garbage collection ------------------------------------------------------------------

    def _gc_tick(self):
        if self.segtable.free_count() < max(4, self.config.num_segments // 8):
            self.gc_step()

    def gc_step(self, threshold=None):
        th = self.config.gc_threshold if threshold is None else threshold
        freed = []
        for seg in sorted(self.committed_segs):
            utilization = self.live_bytes.get(seg, 0) / self.segtable.segment_size
            if utilization < th:
                if self._collect_segment(seg):
                    freed.append(seg)
        return freed

    def _collect_segment(self, seg):
        if self.segtable.free_count() == 0 and self.live_bytes.get(seg, 0) > 0:
            return False  # nowhere to relocate live records
        base = self.segtable.address(seg)
        buf = self.device.read(base, self.segtable.segment_size)
        result = decode_scan(buf, mtu=self.config.mtu, base=base)
        for entry in result.entries:
            index = self.indexes.get(entry.shard_id)
            if index is None:
                continue
            hit = index.lookup(entry.key, self.entry_meta_reader)
            if hit is None or hit[1] != entry.block_offsets[0]:
                continue
            landed = self.clean_log.append(b"".join(encode_log_entry(
                entry.op, entry.shard_id, entry.version, entry.key,
                entry.value, mtu=self.config.mtu)))
            if landed is None:
                return False
            _, new_addr = landed
            index.relocate(entry.key, entry.block_offsets[0], new_addr)
            new_seg = self.segtable.segment_of(new_addr)
            self.live_bytes[new_seg] += entry.length
            if entry.cnt > 1:
                addrs = [new_addr]
                for seq in range(1, entry.cnt):
                    addrs.append(addrs[-1] + block_length(
                        len(entry.key), len(entry.value), seq - 1,
                        self.config.mtu))
                self.registry[(entry.shard_id, entry.version)] = [
                    entry.key, addrs]
        for shard, version, cnt, offsets in result.incomplete:
            reg = self.registry.get((shard, version))
            if reg is None:
                continue  # never fully assembled: dead blocks
            key, addrs = reg
            index = self.indexes.get(shard)
            if index is None:
                continue
            hit = index.lookup(key, self.entry_meta_reader)
            if hit is None or hit[1] != addrs[0]:
                continue
            for seq, old_addr in sorted(offsets.items()):
                _, _, _, _, key_len, val_len = self._header_at(old_addr)
                raw = self.device.read(old_addr,
                                       self._padded_block_len(old_addr))
                landed = self.clean_log.append(raw)
                if landed is None:
                    return False
                _, new_addr = landed
                addrs[seq] = new_addr
                if seq == 0:
                    index.relocate(key, old_addr, new_addr)
                    new_seg = self.segtable.segment_of(new_addr)
                    self.live_bytes[new_seg] += entry_length(
                        key_len, val_len, self.config.mtu)
        for group_key in list(self.partial_groups):
            offsets = self.partial_groups[group_key]
            for seq in [s for s, a in offsets.items()
                        if base <= a < base + self.segtable.segment_size]:
                del offsets[seq]
            if not offsets:
                del self.partial_groups[group_key]
        self.committed_segs.discard(seg)
        self.live_bytes.pop(seg, None)
        self.segtable.transition(seg, FREE)
        return True

    # -- recovery helpers --------------------------------------------------------------------

    def scan_segments(self, segs):
        """Decode a set of segments, merging multi-block groups across them."""
        entries = []
        pending = {}  # (shard, version, cnt) -> {seq: addr}
        for seg in segs:
            base = self.segtable.address(seg)
            buf = self.device.read(base, self.segtable.segment_size)
            result = decode_scan(buf, mtu=self.config.mtu, base=base)
            entries.extend(result.entries)
            for shard, version, cnt, offsets in result.incomplete:
                group = pending.setdefault((shard, version, cnt), {})
                group.update(offsets)
                if len(group) == cnt:
                    entry = self._assemble_group(shard, version, cnt, group)
                    if entry is not None:
                        entries.append(entry)
                    del pending[(shard, version, cnt)]
        return entries, pending

    def collect_shard_entries(self, shard, states=(USING, USED),
                              owners=(OWNER_CONTROL,)):
        """Decode records for one shard from matching segments (failover)."""
        segs = []
        for owner in owners:
            for state in states:
                segs.extend(self.segtable.segments_in_state(state, owner))
        scanned, _ = self.scan_segments(sorted(set(segs)))
        entries = {}
        for e in scanned:
            if e.shard_id == shard and e.op != OP_COMMITVER:
                entries[(e.version, e.key, e.checksum)] = e
        return entries

    def store_entries(self, shard, entries):
        """Persist a reconciled record set and fold it into the shard index."""
        for (version, key, _), entry in sorted(entries.items()):
            blob = b"".join(encode_log_entry(entry.op, shard, version, key,
                                             entry.value,
                                             mtu=self.config.mtu))
            landed = self.clean_log.append(blob)
            if landed is None:
                raise SaturationError(
                    f"{self.server_id}: no space for recovered records")
            _, addr = landed
            self._index_install(shard, key, version, addr, len(blob))

    def shard_entry_multiset(self, shard):
        """(version, key, checksum) multiset visible through the shard index.

        The stored block-0 checksum is content-derived, so relocation by GC
        or recovery does not perturb the comparison across replicas.
        """
        index = self.indexes.get(shard)
        if index is None:
            return []
        out = []
        for addr in index.addresses():
            _, _, version, _, key_len, _ = self._header_at(addr)
            key = self.device.read(addr + HEADER_LEN, key_len)
            checksum = int.from_bytes(self.device.read(addr + 10, 4), "little")
            out.append((version, key, checksum))
        return sorted(out)

    def max_shard_version_on_media(self, shard):
        best = 0
        for seg in range(self.segtable.num_segments):
            if self.segtable.state(seg) == FREE:
                continue
            base = self.segtable.address(seg)
            buf = self.device.read(base, self.segtable.segment_size)
            result = decode_scan(buf, mtu=self.config.mtu, base=base)
            for e in result.entries:
                if e.shard_id == shard and e.op != OP_COMMITVER:
                    best = max(best, e.version)
            for g_shard, version, _, _ in result.incomplete:
                if g_shard == shard:
                    best = max(best, version)
        return best
