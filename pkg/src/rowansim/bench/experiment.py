"""Experiment orchestration: build a cluster, drive a request stream through
it, settle the device counters, and report per-server DLWA plus latency
percentiles.  Identical seeds produce byte-identical CSV output.
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from ..cluster import Client, Cluster
from ..pm_device import PmDevice
from ..rowankv.replication import backup_stream_count
from ..rowankv.server import SaturationError, ServerConfig
from ..sim import MS, US
from .workload import WorkloadSpec, gen_workload, key_bytes, value_bytes

CSV_COLUMNS = ("server", "strategy", "request_bytes", "media_bytes", "dlwa",
               "ops", "p50", "p99")


@dataclass(frozen=True)
class ExperimentConfig:
    num_servers: int = 6
    k: int = 3
    num_workers: int = 24
    num_shards: int = 48
    strategy: str = "ROWAN"
    requests: int = 20_000
    concurrency: int = 96
    seed: int = 0
    segment_size: int = 64 * 1024
    num_segments: int = 256
    xpbuffer_capacity: int = 64
    jitter: int = 2 * US
    pair_gap: int = 500  # ns between messages of one pair
    populate: bool = True
    spec: WorkloadSpec = field(default_factory=WorkloadSpec)


@dataclass
class ExperimentResult:
    strategy: str
    seed: int
    status: str  # ok | saturated
    rows: list  # per-server tuples in CSV_COLUMNS order
    aggregate: tuple
    streams_per_server: int

    def dlwa_by_server(self):
        return {row[0]: row[4] for row in self.rows}

    def max_dlwa(self):
        return max(row[4] for row in self.rows)


def _percentile(values, q):
    if not values:
        return 0.0
    return float(np.percentile(np.array(values, dtype=np.float64), q))


def _build_cluster(cfg):
    server_config = ServerConfig(
        num_workers=cfg.num_workers,
        num_segments=cfg.num_segments,
        segment_size=cfg.segment_size,
        xpbuffer_capacity=cfg.xpbuffer_capacity,
        strategy=cfg.strategy,
    )
    return Cluster(num_servers=cfg.num_servers, k=cfg.k,
                   num_shards=cfg.num_shards, server_config=server_config,
                   seed=cfg.seed, jitter=cfg.jitter, pair_gap=cfg.pair_gap,
                   auto_failover=False)


class _Driver:
    """Closed-loop request driver with fixed concurrency."""

    def __init__(self, cluster, client, ops, concurrency):
        self.cluster = cluster
        self.client = client
        self.ops = ops
        self.concurrency = concurrency
        self.cursor = 0
        self.completed = 0
        self.latencies = {}  # server -> list of ns
        self.op_counts = {}  # server -> completed ops

    def run(self, horizon=60_000 * MS):
        for slot in range(min(self.concurrency, len(self.ops))):
            self._issue_next(slot)
        stall_guard = [self.completed, self.cluster.loop.now]
        while self.completed < len(self.ops):
            self.cluster.run_for(1 * MS)
            if self.cluster.loop.now > horizon:
                raise SaturationError("experiment horizon exceeded")
            if self.completed == stall_guard[0]:
                if self.cluster.loop.now - stall_guard[1] > 200 * MS:
                    raise SaturationError("driver stalled: no completions")
            else:
                stall_guard = [self.completed, self.cluster.loop.now]

    def _issue_next(self, slot):
        if self.cursor >= len(self.ops):
            return
        op, key_index, size = self.ops[self.cursor]
        op_index = self.cursor
        self.cursor += 1
        key = key_bytes(key_index)
        value = value_bytes(key_index, op_index, size) if op == "put" else b""
        start = self.cluster.loop.now

        def done(result):
            self.completed += 1
            if result.status in ("ok", "not_found") and result.server is not None:
                self.latencies.setdefault(result.server, []).append(
                    self.cluster.loop.now - start)
                self.op_counts[result.server] = \
                    self.op_counts.get(result.server, 0) + 1
            self._issue_next(slot)

        self.client.issue(op, key, value, on_done=done, client_id=slot)


def run_experiment(cfg):
    """Build, populate, drive, settle, measure."""
    cluster = _build_cluster(cfg)
    client = Client(cluster)
    status = "ok"
    try:
        if cfg.populate and cfg.spec.put_ratio < 1.0:
            populate_ops = [("put", i, 128) for i in range(cfg.spec.key_count)]
            _Driver(cluster, client, populate_ops, cfg.concurrency).run()
        for device in cluster.devices.values():
            device.flush_all()
            device.reset_counters()
        ops = gen_workload(cfg.spec, cfg.requests)
        driver = _Driver(cluster, client, ops, cfg.concurrency)
        driver.run()
        cluster.run_for(5 * MS)  # drain replication tails
    except SaturationError:
        status = "saturated"
        driver = locals().get("driver")
    for device in cluster.devices.values():
        device.flush_all()
    rows = []
    latencies = driver.latencies if driver else {}
    op_counts = driver.op_counts if driver else {}
    for sid in sorted(cluster.servers):
        device = cluster.devices[sid]
        lats = [l / 1000 for l in latencies.get(sid, [])]  # ns -> us
        req, med = device.request_bytes, device.media_bytes
        rows.append((sid, cfg.strategy, req, med,
                     med / req if req else 0.0,
                     op_counts.get(sid, 0),
                     _percentile(lats, 50), _percentile(lats, 99)))
    total_req = sum(r[2] for r in rows)
    total_med = sum(r[3] for r in rows)
    all_lats = [l / 1000 for ls in latencies.values() for l in ls]
    aggregate = ("all", cfg.strategy, total_req, total_med,
                 total_med / total_req if total_req else 0.0,
                 sum(op_counts.values()),
                 _percentile(all_lats, 50), _percentile(all_lats, 99))
    streams = (cfg.num_workers
               + backup_stream_count(cfg.strategy, cfg.num_servers,
                                     cfg.num_workers)
               + cluster.server_config.num_clean)
    return ExperimentResult(cfg.strategy, cfg.seed, status, rows, aggregate,
                            streams)


def dlwa_sweep(stream_counts=(1, 32, 64, 96, 128), write_size=64,
               writes_per_stream=None, xpbuffer_capacity=64, xpline_size=256,
               single_stream_bytes=1 << 20):
    """Round-robin small-write streams against one device, per stream count.

    The single-stream point writes ``single_stream_bytes`` sequentially; the
    multi-stream points interleave the streams round-robin over strided
    regions.  Returns [(streams, request_bytes, media_bytes, dlwa)].
    """
    out = []
    for streams in stream_counts:
        if streams == 1:
            per_stream = single_stream_bytes // write_size
        elif writes_per_stream is None:
            per_stream = 512
        else:
            per_stream = writes_per_stream
        region = -(-per_stream * write_size // xpline_size) * xpline_size
        device = PmDevice(streams * region,
                          xpline_size=xpline_size,
                          xpbuffer_capacity=xpbuffer_capacity)
        total = streams * per_stream
        idx = np.arange(total, dtype=np.int64)
        addrs = (idx % streams) * region + (idx // streams) * write_size
        device.write_stream_batch(addrs, b"\xa5" * write_size)
        device.flush_all()
        out.append((streams, device.request_bytes, device.media_bytes,
                    device.dlwa()))
    return out


def emit_csv(result, path):
    """Header, one per-server row, then the aggregate row; stable formats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in result.rows + [result.aggregate]:
            writer.writerow(_format_row(row))


def _format_row(row):
    server, strategy, req, med, dlwa, ops, p50, p99 = row
    return (server, strategy, req, med, f"{dlwa:.6f}", ops,
            f"{p50:.3f}", f"{p99:.3f}")


def parse_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        assert header == CSV_COLUMNS
        rows = []
        for raw in reader:
            rows.append((raw[0] if raw[0] == "all" else int(raw[0]), raw[1],
                         int(raw[2]), int(raw[3]), float(raw[4]), int(raw[5]),
                         float(raw[6]), float(raw[7])))
    return rows
