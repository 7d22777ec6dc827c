"""Cluster orchestration: configuration, failover, resharding, cold start.

The configuration manager (CM) runs co-located with the harness.  Data-plane
traffic (replication, log writes) crosses the simulated fabric; control-plane
messages (config pushes, gather/scatter, migration copies) are modeled as
scheduled events with configurable latency.

A configuration names a term, the live membership, the shard distribution and
any in-flight migration tasks; it is durably stored in a simulated
linearizable config store that survives full-cluster crashes.
"""

from collections import defaultdict
from dataclasses import dataclass, field, replace

from .fabric import RdmaFabric
from .pm_device import PmDevice
from .rowankv.index import hash_key
from .rowankv.segments import (
    COMMITTED, FREE, OWNER_CLEAN, OWNER_CONTROL, OWNER_WORKER, USED, USING,
    SegmentTable,
)
from .rowankv.server import Result, Server, ServerConfig
from .sim import MS, US, EventLoop

DEFAULT_LEASE = 10 * MS
DEFAULT_STAT_WINDOW = 500 * MS
OVERLOAD_FACTOR = 1.3
BALANCE_GOAL = 0.05


@dataclass(frozen=True)
class MigrationTask:
    source: int
    target: int
    shard: int


@dataclass(frozen=True)
class Configuration:
    term: int
    membership: tuple
    shard_distribution: dict  # shard -> (primary, tuple(backups))
    migration_list: tuple = ()

    def validate(self, k):
        members = set(self.membership)
        effective = min(k, len(members))  # degrade when survivors < k
        for shard, (primary, backups) in self.shard_distribution.items():
            assert primary in members, f"shard {shard} primary not live"
            assert len(backups) == effective - 1, \
                f"shard {shard} short of replicas"
            assert all(b in members for b in backups)
            assert primary not in backups

    def replicas(self, shard):
        primary, backups = self.shard_distribution[shard]
        return (primary, *backups)


class ConfigStore:
    """Durable single-writer register with term-fenced writes."""

    def __init__(self):
        self._committed = None

    def write(self, config):
        if self._committed is not None and config.term <= self._committed.term:
            raise ValueError("configuration terms must strictly increase")
        self._committed = config

    def read(self):
        return self._committed


class SingleOwnerViolation(AssertionError):
    pass


class SingleOwnerMonitor:
    """Event-loop assertion: one accepting server per shard at any instant."""

    def __init__(self, cluster):
        self.cluster = cluster
        self.accepts = defaultdict(lambda: defaultdict(int))  # shard -> sid -> n

    def record(self, shard, sid):
        claimants = [s.server_id for s in self.cluster.servers.values()
                     if s.accepts(shard)]
        if claimants != [sid]:
            raise SingleOwnerViolation(
                f"shard {shard} accepted at {sid} while claimants={claimants} "
                f"at t={self.cluster.loop.now}")
        self.accepts[shard][sid] += 1


def detect_overload(loads, shard_loads):
    """Migration triples for servers loaded over 1.3x the average.

    ``loads``: server -> total request count in the window.
    ``shard_loads``: server -> {shard: count} for its primary shards.
    Greedy: hottest shard first, onto the currently coldest server, until the
    source is within 5% of the average.
    """
    if not loads:
        return []
    average = sum(loads.values()) / len(loads)
    if average == 0:
        return []
    working = dict(loads)
    tasks = []
    overloaded = sorted((s for s, l in loads.items()
                         if l > OVERLOAD_FACTOR * average),
                        key=lambda s: -loads[s])
    for src in overloaded:
        shards = sorted(shard_loads.get(src, {}).items(),
                        key=lambda kv: (-kv[1], kv[0]))
        for shard, load in shards:
            if working[src] <= (1 + BALANCE_GOAL) * average:
                break
            candidates = sorted((s for s in working if s != src),
                                key=lambda s: (working[s], s))
            target = candidates[0]
            if working[target] + load > working[src] - load:
                continue  # moving it would just flip the imbalance
            tasks.append(MigrationTask(src, target, shard))
            working[src] -= load
            working[target] += load
    return tasks


class Cluster:
    def __init__(self, num_servers=3, k=3, num_shards=None,
                 server_config=None, seed=0, base_latency=2 * US,
                 jitter=2 * US, pair_gap=0, control_latency=200 * US,
                 config_store_latency=1 * MS, lease_period=DEFAULT_LEASE,
                 stat_window=DEFAULT_STAT_WINDOW, auto_failover=True):
        assert k <= num_servers
        self.k = k
        self.num_shards = num_shards if num_shards is not None else 4 * num_servers
        self.seed = seed
        self.loop = EventLoop()
        self.fabric = RdmaFabric(seed=seed, loop=self.loop,
                                 base_latency=base_latency, jitter=jitter,
                                 pair_gap=pair_gap)
        self.server_config = server_config or ServerConfig()
        self.control_latency = control_latency
        self.config_store_latency = config_store_latency
        self.lease_period = lease_period
        self.stat_window = stat_window
        self.auto_failover = auto_failover
        self.store = ConfigStore()
        self.monitor = SingleOwnerMonitor(self)
        self.servers = {}
        self.devices = {}
        self.leases = {}
        self.failing = set()
        self.failover_log = []  # (time, phase, detail) timeline markers
        self.last_phase2_report = {}
        self.migration_done = {}
        self._shard_load_window = defaultdict(dict)
        distribution = {}
        sids = list(range(num_servers))
        for shard in range(self.num_shards):
            primary = shard % num_servers
            backups = tuple(sids[(primary + j) % num_servers]
                            for j in range(1, k))
            distribution[shard] = (primary, backups)
        config = Configuration(1, tuple(sids), distribution)
        config.validate(k)
        self.store.write(config)
        for sid in sids:
            capacity = SegmentTable.required_capacity(
                self.server_config.num_segments, self.server_config.segment_size)
            device = PmDevice(capacity,
                              xpline_size=self.server_config.xpline_size,
                              xpbuffer_capacity=self.server_config.xpbuffer_capacity)
            self.devices[sid] = device
            self.servers[sid] = Server(sid, self.server_config, device,
                                       self.fabric, self.loop, self)
        for server in self.servers.values():
            server.start()
        for a in sids:
            for b in sids:
                if a != b:
                    self.servers[a].connect_to(self.servers[b])
        for server in self.servers.values():
            self._apply_config(server, config, block=False, bootstrap=True)
            server.blocked_all = False
        for sid in sids:
            self.leases[sid] = self.loop.now + lease_period
        self._schedule_lease_ticks()

    # -- routing helpers ----------------------------------------------------------

    def current_config(self):
        return self.store.read()

    def shard_of(self, key):
        return (hash_key(key) * self.num_shards) >> 64

    def primary_of(self, shard):
        return self.current_config().shard_distribution[shard][0]

    def backups_of(self, shard):
        return list(self.current_config().shard_distribution[shard][1])

    def record_accept(self, shard, sid):
        self.monitor.record(shard, sid)

    def reply_rpc(self, from_sid, to_sid, msg):
        self.servers[from_sid].send_rpc(to_sid, msg)

    def on_server_rpc(self, server, msg):
        raise ValueError(f"unhandled rpc {msg[0]}")

    def on_migration_ack(self, work_id):
        pass

    def route_get(self, source_sid, key, done):
        """Forward a GET miss on a migration target back to the source."""
        source = self.servers[source_sid]

        def answer():
            source.work_items += 1
            shard = self.shard_of(key)
            index = source.indexes.get(shard)
            hit = index.lookup(key, source.entry_meta_reader) if index else None
            if hit is None:
                result = Result("not_found", server=source_sid)
            else:
                op, value = source.read_value(hit[1])
                from .rowankv.log_entry import OP_DEL
                if op == OP_DEL:
                    result = Result("not_found", server=source_sid)
                else:
                    result = Result("ok", value=value, server=source_sid)
            result.routed = True
            self.loop.call_later(self.control_latency, done, result)

        self.loop.call_later(self.control_latency, answer)

    # -- running ------------------------------------------------------------------

    def run_for(self, duration):
        self.loop.run_until(self.loop.now + duration)

    # -- lease and failure detection -------------------------------------------------

    def _schedule_lease_ticks(self):
        def renew():
            for sid, server in self.servers.items():
                if server.alive and sid not in self.failing:
                    self.leases[sid] = self.loop.now + self.lease_period
            self.loop.call_later(self.lease_period // 2, renew)

        def detect():
            if self.auto_failover:
                config = self.current_config()
                for sid in config.membership:
                    if (self.loop.now >= self.leases.get(sid, 0)
                            and not self.servers[sid].alive
                            and sid not in self._failover_running):
                        self._start_failover(sid)
            self.loop.call_later(1 * MS, detect)

        self._failover_running = set()
        self.loop.call_later(self.lease_period // 2, renew)
        self.loop.call_later(1 * MS, detect)

    def fail_server(self, sid, run=False):
        """Crash a server (volatile state lost, PM preserved)."""
        self.failing.add(sid)
        server = self.servers[sid]
        server.crash()
        self.fabric.destroy_pairs_to(sid)
        self.failover_log.append((self.loop.now, "kill", sid))
        if run:
            self.run_until_failover_complete(sid)
        return self.current_config()

    def run_until_failover_complete(self, sid, budget=500 * MS):
        deadline = self.loop.now + budget
        while self.loop.now < deadline:
            self.loop.run_until(self.loop.now + 1 * MS)
            config = self.current_config()
            if sid not in config.membership and not self._failover_running \
                    and not any(s.blocked_all or s.blocked_shards
                                for s in self.servers.values() if s.alive):
                return config
        raise TimeoutError("failover did not complete in budget")

    # -- failover -----------------------------------------------------------------------

    def _start_failover(self, failed):
        self._failover_running.add(failed)
        self.failover_log.append((self.loop.now, "detect", failed))
        self.loop.call_later(self.config_store_latency,
                             self._failover_phase1, failed)

    def _next_distribution(self, old, failed):
        """Reassign shards away from the failed server, keeping k replicas."""
        members = [s for s in old.membership if s != failed]
        counts = defaultdict(int)
        for shard, (primary, backups) in old.shard_distribution.items():
            for sid in (primary, *backups):
                if sid != failed:
                    counts[sid] += 1
        promoted = []
        distribution = {}
        migration_list = []
        rolled_back = {}
        for task in old.migration_list:
            if failed in (task.source, task.target):
                # interrupted migration: roll the shard back, drop the task
                rolled_back[task.shard] = task
                if self.servers[task.target].alive:
                    self._release_migration_target(task)
            else:
                migration_list.append(task)
        for shard, (primary, backups) in old.shard_distribution.items():
            if shard in rolled_back:
                task = rolled_back[shard]
                primary = task.source
            new_backups = [b for b in backups if b != failed]
            if primary == failed:
                primary = new_backups.pop(0)
                promoted.append((shard, primary))
            effective = min(self.k, len(members))
            while len(new_backups) < effective - 1:
                candidates = sorted(
                    (s for s in members
                     if s != primary and s not in new_backups),
                    key=lambda s: (counts[s], s))
                new_backups.append(candidates[0])
                counts[candidates[0]] += 1
            distribution[shard] = (primary, tuple(new_backups))
        return Configuration(old.term + 1, tuple(members), distribution,
                             tuple(migration_list)), promoted

    def _failover_phase1(self, failed):
        old = self.current_config()
        if failed not in old.membership:
            self._failover_running.discard(failed)
            return
        new, promoted = self._next_distribution(old, failed)
        new.validate(self.k)
        self.store.write(new)
        self.failover_log.append((self.loop.now, "config-written", new.term))
        acks = {"n": 0}
        alive = [s for s in self.servers.values() if s.alive]

        def push(server):
            self._apply_config(server, new, block=True, failed=failed)

            def respond():
                acks["n"] += 1
                if acks["n"] == len(alive):
                    commit_at = max(self.loop.now, self.leases.get(failed, 0))
                    self.loop.call_at(commit_at, commit)

            self.loop.call_later(self.control_latency, respond)

        def commit():
            self.failover_log.append((self.loop.now, "commit-config", new.term))
            for server in alive:
                server.blocked_all = False
            self.loop.call_later(self.control_latency,
                                 self._failover_phase2, new, promoted, failed)

        for server in alive:
            self.loop.call_later(self.control_latency, push, server)

    def _failover_phase2(self, config, promoted, failed):
        report = {}
        for shard, new_primary in promoted:
            holders = [sid for sid in config.replicas(shard)
                       if self.servers[sid].alive
                       and shard in self.servers[sid].shard_states
                       and self.servers[sid].shard_states[shard].role
                       != "rereplicating"]
            union = {}
            for sid in holders:
                union.update(self.servers[sid].collect_shard_entries(shard))
            for sid in holders:
                server = self.servers[sid]
                server.store_entries(shard, union)
            top = max((v for v, _, _ in union), default=0)
            for sid in holders:
                server = self.servers[sid]
                observed = max(top, self._max_indexed_version(server, shard))
                server.commit_ver_array[shard] = max(
                    server.commit_ver_array.get(shard, 0), observed)
                state = server.shard_states[shard]
                if sid == new_primary:
                    state.shard_version = observed
                    server.version_windows[shard].base = observed
                    server.version_windows[shard]._heap.clear()
                    state.commit_sent = observed
            self.servers[new_primary].blocked_shards.discard(shard)
            report[shard] = {sid: self.servers[sid].shard_entry_multiset(shard)
                             for sid in holders}
        self.last_phase2_report = report
        self.failover_log.append((self.loop.now, "finish-promotion", len(promoted)))
        self.loop.call_later(self.control_latency,
                             self._failover_phase3, config, failed)

    def _max_indexed_version(self, server, shard):
        index = server.indexes.get(shard)
        if index is None:
            return 0
        best = 0
        for addr in index.addresses():
            _, _, version, _, _, _ = server._header_at(addr)
            best = max(best, version)
        return best

    def _failover_phase3(self, config, failed):
        for shard, (primary, backups) in config.shard_distribution.items():
            for sid in backups:
                server = self.servers[sid]
                state = server.shard_states.get(shard)
                if state is not None and state.role == "rereplicating":
                    self._stream_to_new_backup(shard, primary, sid)
        self.failover_log.append((self.loop.now, "rereplication-started", failed))
        self._failover_running.discard(failed)

    def _stream_to_new_backup(self, shard, primary_sid, backup_sid):
        primary = self.servers[primary_sid]
        backup = self.servers[backup_sid]

        def stream():
            index = primary.indexes.get(shard)
            entries = {}
            if index is not None:
                for addr in list(index.addresses()):
                    op, _, version, key, value = primary.read_entry_record(addr)
                    from .rowankv.log_entry import LogEntry, encode_log_entry
                    blocks = encode_log_entry(op, shard, version, key, value,
                                              mtu=primary.config.mtu)
                    checksum = int.from_bytes(blocks[0][10:14], "little")
                    entries[(version, key, checksum)] = LogEntry(
                        op, shard, version, key, value, checksum=checksum)
            backup.store_entries(shard, entries)
            backup.shard_states[shard].role = "backup"

        self.loop.call_later(self.control_latency, stream)

    # -- config application ----------------------------------------------------------------

    def _apply_config(self, server, config, block, failed=None,
                      bootstrap=False):
        server.term = config.term
        server.cached_config = config
        if block:
            server.blocked_all = True
            for worker in server.workers:
                worker.abort_all()
        mig_by_shard = {t.shard: t for t in config.migration_list}
        assigned = set()
        for shard, (primary, backups) in config.shard_distribution.items():
            task = mig_by_shard.get(shard)
            sid = server.server_id
            if task is not None and sid == task.source:
                state = server.shard_states.get(shard)
                if state is not None:
                    state.role = "migrating-out"
                assigned.add(shard)
                continue
            if sid == primary:
                state = server.shard_states.get(shard)
                if state is None:
                    server.assign_shard(shard, "primary")
                    if task is not None and sid == task.target:
                        server.blocked_shards.add(shard)
                        server.migration_sources[shard] = task.source
                elif state.role != "primary":
                    # promotion: backup index stays; blocked until phase 2
                    state.role = "primary"
                    server.blocked_shards.add(shard)
                assigned.add(shard)
            elif sid in backups:
                state = server.shard_states.get(shard)
                if state is None:
                    server.assign_shard(shard, "backup")
                    if not bootstrap:
                        # gained mid-life: historical records stream in later
                        server.shard_states[shard].role = "rereplicating"
                elif state.role == "primary":
                    state.role = "backup"
                assigned.add(shard)
        for shard in list(server.shard_states):
            if shard not in assigned:
                server.drop_shard(shard)

    # -- dynamic resharding --------------------------------------------------------------------

    def collect_window_stats(self):
        """Pull and reset the per-window load counters (CM's 500ms poll)."""
        loads = {}
        shard_loads = {}
        repl_attribution = defaultdict(int)
        for sid, server in self.servers.items():
            if not server.alive:
                continue
            own = dict(server.request_counts)
            shard_loads[sid] = {sh: n for sh, n in own.items()
                                if server.shard_states.get(sh) is not None
                                and server.shard_states[sh].role == "primary"}
            loads[sid] = sum(own.values())
            for shard, n in server.repl_counts.items():
                for backup in self.backups_of(shard):
                    repl_attribution[backup] += n
            server.request_counts.clear()
            server.repl_counts.clear()
        for sid, extra in repl_attribution.items():
            if sid in loads:
                loads[sid] += extra
        return loads, shard_loads

    def maybe_reshard(self):
        loads, shard_loads = self.collect_window_stats()
        tasks = detect_overload(loads, shard_loads)
        if tasks:
            self._start_migrations(tasks)
        return tasks

    def _start_migrations(self, tasks):
        old = self.current_config()
        distribution = dict(old.shard_distribution)
        effective = min(self.k, len(old.membership))
        for task in tasks:
            primary, backups = distribution[task.shard]
            assert primary == task.source
            new_backups = tuple(b for b in backups if b != task.target)
            while len(new_backups) < effective - 1:
                new_backups += (task.source,)
            distribution[task.shard] = (task.target, new_backups)
        new = Configuration(old.term + 1, old.membership, distribution,
                            old.migration_list + tuple(tasks))
        new.validate(self.k)
        self.store.write(new)
        self.failover_log.append((self.loop.now, "migration-config", new.term))
        for server in self.servers.values():
            if server.alive:
                self.loop.call_later(self.control_latency,
                                     self._apply_config, server, new, False)
        for task in tasks:
            self.loop.call_later(2 * self.control_latency,
                                 self._migration_send_version, task)

    def _migration_send_version(self, task):
        source = self.servers[task.source]
        state = source.shard_states.get(task.shard)
        version = state.shard_version if state else 0

        def deliver():
            target = self.servers[task.target]
            if not target.alive:
                return
            st = target.shard_states.get(task.shard)
            if st is not None:
                st.shard_version = max(st.shard_version, version)
                target.version_windows[task.shard].base = st.shard_version
            target.blocked_shards.discard(task.shard)
            self.failover_log.append((self.loop.now, "migration-serving",
                                      task.shard))
            self.loop.call_later(self.control_latency, self._migration_copy,
                                 task, 0)

        self.loop.call_later(self.control_latency, deliver)

    def _migration_copy(self, task, cursor, batch=64):
        source = self.servers[task.source]
        target = self.servers[task.target]
        if not source.alive or not target.alive:
            return
        index = source.indexes.get(task.shard)
        if index is None:
            return
        addrs = sorted(index.addresses())
        chunk = addrs[cursor:cursor + batch]
        from .rowankv.log_entry import LogEntry, encode_log_entry
        entries = {}
        for addr in chunk:
            op, _, version, key, value = source.read_entry_record(addr)
            blocks = encode_log_entry(op, task.shard, version, key, value,
                                      mtu=source.config.mtu)
            checksum = int.from_bytes(blocks[0][10:14], "little")
            entries[(version, key, checksum)] = LogEntry(
                op, task.shard, version, key, value, checksum=checksum)
        target.store_entries(task.shard, entries)
        if cursor + batch < len(addrs):
            self.loop.call_later(self.control_latency, self._migration_copy,
                                 task, cursor + batch)
        else:
            self.loop.call_later(self.control_latency,
                                 self._migration_finish, task)

    def _migration_finish(self, task):
        old = self.current_config()
        if task not in old.migration_list:
            return
        new = Configuration(old.term + 1, old.membership,
                            dict(old.shard_distribution),
                            tuple(t for t in old.migration_list if t != task))
        new.validate(self.k)
        self.store.write(new)
        self.migration_done[task.shard] = self.loop.now
        self.failover_log.append((self.loop.now, "migration-done", task.shard))
        for server in self.servers.values():
            if server.alive:
                self.loop.call_later(self.control_latency,
                                     self._apply_config, server, new, False)
        source = self.servers[task.source]
        target = self.servers[task.target]
        self.loop.call_later(self.control_latency,
                             lambda: source.drop_shard(task.shard))
        self.loop.call_later(self.control_latency,
                             lambda: target.migration_sources.pop(task.shard,
                                                                  None))

    def _release_migration_target(self, task):
        target = self.servers[task.target]
        target.migration_sources.pop(task.shard, None)
        target.blocked_shards.discard(task.shard)
        target.drop_shard(task.shard)

    # -- cold start ---------------------------------------------------------------------------

    def crash_all(self):
        for sid in list(self.servers):
            server = self.servers[sid]
            if server.alive:
                server.crash()
        self.fabric = None

    def cold_start(self):
        """Bring every server back from preserved PM plus the config store."""
        config = self.current_config()
        self.fabric = RdmaFabric(seed=self.seed + 1, loop=self.loop,
                                 base_latency=0, jitter=0)
        new_servers = {}
        for sid in config.membership:
            server = Server(sid, self.server_config, self.devices[sid],
                            self.fabric, self.loop, self)
            server.segtable.rebuild_free_heap()
            new_servers[sid] = server
        self.servers = new_servers
        for server in self.servers.values():
            old_nonfree = [seg for seg in range(server.segtable.num_segments)
                           if server.segtable.state(seg) != FREE]
            server._coldstart_segments = old_nonfree
            server.start()
        sids = sorted(self.servers)
        for a in sids:
            for b in sids:
                if a != b:
                    self.servers[a].connect_to(self.servers[b])
        for server in self.servers.values():
            self._apply_config(server, config, block=False, bootstrap=True)
            server.blocked_all = False
        # per-server replay: indexes and commit horizons from full scans
        scans = {}
        worker_using = {}
        for sid, server in self.servers.items():
            segs = server._coldstart_segments
            worker_using[sid] = [
                seg for seg in segs
                if server.segtable.state(seg) == USING
                and server.segtable.owner(seg) == OWNER_WORKER]
            entries, _ = server.scan_segments(segs)
            scans[sid] = entries
            for entry in entries:
                if entry.op == 3:  # commit horizon markers
                    cur = server.commit_ver_array.get(entry.shard_id, 0)
                    server.commit_ver_array[entry.shard_id] = max(
                        cur, entry.version)
                    continue
                if entry.shard_id in server.indexes:
                    server._digest_entry(entry, {})
        # reconcile the uncommitted frontier so all replicas own the same set
        for shard, (primary, backups) in config.shard_distribution.items():
            union = {}
            p_server = self.servers[primary]
            for entry in scans[primary]:
                if entry.shard_id == shard and entry.op != 3:
                    seg = p_server.segtable.segment_of(entry.block_offsets[0])
                    if seg in worker_using[primary]:
                        union[(entry.version, entry.key, entry.checksum)] = entry
            for sid in backups:
                server = self.servers[sid]
                for entry in scans[sid]:
                    if entry.shard_id == shard and entry.op != 3:
                        seg = server.segtable.segment_of(entry.block_offsets[0])
                        state = server.segtable.state(seg)
                        owner = server.segtable.owner(seg)
                        if owner == OWNER_CONTROL and state in (USING, USED):
                            union[(entry.version, entry.key, entry.checksum)] = entry
            for sid in config.replicas(shard):
                self.servers[sid].store_entries(shard, union)
            top = max((v for v, _, _ in union), default=0)
            for sid in config.replicas(shard):
                server = self.servers[sid]
                observed = max(top, self._max_indexed_version(server, shard))
                server.commit_ver_array[shard] = max(
                    server.commit_ver_array.get(shard, 0), observed)
                state = server.shard_states[shard]
                if state.role == "rereplicating":
                    state.role = "backup"
                if sid == primary:
                    state.shard_version = observed
                    server.version_windows[shard].base = observed
                    state.commit_sent = observed
        # retire pre-crash segments: their contents are replayed; recycle them
        for sid, server in self.servers.items():
            for seg in server._coldstart_segments:
                state = server.segtable.state(seg)
                if state == USING:
                    server.segtable.transition(seg, COMMITTED)
                elif state == USED:
                    server.segtable.transition(seg, COMMITTED)
                if server.segtable.state(seg) == COMMITTED:
                    server.committed_segs.add(seg)
        for task in config.migration_list:
            self.loop.call_later(self.control_latency,
                                 self._migration_send_version, task)


class Client:
    """Closed-loop driver that tracks the acked shadow map."""

    def __init__(self, cluster, max_attempts=100, retry_delay=300 * US,
                 client_id=0):
        self.cluster = cluster
        self.max_attempts = max_attempts
        self.retry_delay = retry_delay
        self.client_id = client_id
        self.shadow = {}
        self.latencies = []
        self.failed = []
        self.inflight = 0

    def _primary_for(self, key):
        shard = self.cluster.shard_of(key)
        config = self.cluster.current_config()
        return config.shard_distribution[shard][0]

    def issue(self, op, key, value=b"", on_done=None, attempt=0,
              client_id=None):
        self.inflight += 1
        start = self.cluster.loop.now
        cid = self.client_id if client_id is None else client_id

        def done(result):
            self.inflight -= 1
            if result.status in ("wrong_shard", "blocked", "aborted", "dead"):
                if attempt + 1 >= self.max_attempts:
                    self.failed.append((op, key, result.status))
                    if on_done:
                        on_done(result)
                    return
                self.cluster.loop.call_later(
                    self.retry_delay, self.issue, op, key, value, on_done,
                    attempt + 1, cid)
                return
            if result.status == "ok" and op in ("put", "del"):
                self.shadow[key] = value if op == "put" else None
                self.latencies.append(self.cluster.loop.now - start)
            if on_done:
                on_done(result)

        sid = self._primary_for(key)
        server = self.cluster.servers.get(sid)
        if server is None or not server.alive:
            done(Result("dead", server=sid))
            return
        server.submit(op, key, value, done, client_id=cid)

    def get(self, key, on_done):
        self.issue("get", key, b"", on_done)
