"""Fabric semantics: placement law, ordering, completions, ring CQ."""

import itertools

import pytest

from rowansim.fabric import (
    FAA, OK, READ, RECV_BUFFER_TOO_SMALL, SEND, WRITE, RdmaFabric, WorkRequest,
)
from rowansim.pm_device import PmDevice


def oracle_placements(buffers, stride, packet_lengths):
    """Brute-force re-derivation of MP-SRQ placement from first principles.

    Buffers are consumed strictly in post order; each packet starts stride
    aligned in the active buffer and never spans two buffers.
    """
    placements = []
    consumed = []
    pending = list(buffers)
    active = None  # [base, length, offset]
    for length in packet_lengths:
        need = -(-length // stride) * stride
        if active is None or active[1] - active[2] < need:
            base, buflen = pending.pop(0)
            consumed.append(base)
            active = [base, buflen, 0]
        placements.append((active[0] + active[2], length))
        active[2] += need
    return placements, consumed


def make_receiver(fabric, server="rx", capacity=1 << 22, stride=64):
    dev = PmDevice(capacity)
    fabric.register_memory(server, dev)
    ring = fabric.create_cq(ring_mode=True, ring_capacity=1024)
    srq = fabric.create_mp_srq(server, ring, stride=stride)
    return dev, srq


def test_post_recv_appends_in_order():
    fabric = RdmaFabric()
    _, srq = make_receiver(fabric)
    fabric.post_recv(srq, 0, 1 << 22)
    assert len(srq.buffer_queue) == 1
    fabric.post_recv(srq, 1 << 22, 1 << 22)
    assert [b for b, _ in srq.buffer_queue] == [0, 1 << 22]


def test_post_recv_rejects_misaligned_length():
    fabric = RdmaFabric()
    _, srq = make_receiver(fabric)
    with pytest.raises(ValueError):
        fabric.post_recv(srq, 0, 100)


def test_small_sends_share_the_first_xpline():
    fabric = RdmaFabric()
    dev, srq = make_receiver(fabric)
    fabric.post_recv(srq, 0, 4096)
    cq = fabric.create_cq()
    qp = fabric.connect("a", "rx", cq=cq, srq=srq)
    fabric.post_send(qp, WorkRequest(SEND, payload=b"x" * 32, work_id=1))
    fabric.post_send(qp, WorkRequest(SEND, payload=b"y" * 56, work_id=2))
    comps = fabric.deliver_step()
    placed = [c.placements for c in comps if c.verb == "RECV"]
    assert placed == [[(0, 32)], [(64, 56)]]
    assert dev.read(0, 32) == b"x" * 32
    assert dev.read(64, 56) == b"y" * 56


def test_multi_stride_send_lands_after_prior_occupancy():
    fabric = RdmaFabric()
    _, srq = make_receiver(fabric)
    fabric.post_recv(srq, 0, 4096)
    qp = fabric.connect("a", "rx", cq=fabric.create_cq(), srq=srq)
    fabric.post_send(qp, WorkRequest(SEND, payload=b"a" * 32))
    fabric.post_send(qp, WorkRequest(SEND, payload=b"b" * 56))
    fabric.post_send(qp, WorkRequest(SEND, payload=b"c" * 384))
    comps = fabric.deliver_step()
    recv = [c for c in comps if c.verb == "RECV"]
    assert recv[2].placements == [(128, 384)]  # ceil(384/64)=6 strides at offset 128


def test_faa_returns_prior_value():
    fabric = RdmaFabric()
    dev = PmDevice(4096)
    fabric.register_memory("rx", dev)
    qp = fabric.connect("a", "rx", cq=fabric.create_cq())
    fabric.post_send(qp, WorkRequest(FAA, raddr=0, add=1, work_id="f1"))
    fabric.post_send(qp, WorkRequest(FAA, raddr=0, add=1, work_id="f2"))
    comps = fabric.deliver_step()
    faa = [c for c in comps if c.verb == FAA]
    assert [c.faa_old for c in faa] == [0, 1]
    assert int.from_bytes(dev.read(0, 8), "little") == 2


def test_two_senders_combine_into_one_xpline():
    fabric = RdmaFabric(seed=7)
    dev, srq = make_receiver(fabric)
    fabric.post_recv(srq, 0, 4096)
    qp1 = fabric.connect("a", "rx", cq=fabric.create_cq(), srq=srq)
    qp2 = fabric.connect("b", "rx", cq=fabric.create_cq(), srq=srq)
    fabric.post_send(qp1, WorkRequest(SEND, payload=b"1" * 64))
    fabric.post_send(qp2, WorkRequest(SEND, payload=b"2" * 64))
    fabric.deliver_step()
    lines = {addr for addr, _ in
             [(0, 64), (64, 64)]}  # both strides fall in XPLine 0
    assert lines == {0, 64}
    dev.flush_all()
    assert dev.media_bytes == 256  # single combined line write


def test_same_seed_same_outcome():
    def run(seed):
        fabric = RdmaFabric(seed=seed)
        dev, srq = make_receiver(fabric)
        fabric.post_recv(srq, 0, 1 << 20)
        qps = [fabric.connect(f"s{i}", "rx", cq=fabric.create_cq(), srq=srq)
               for i in range(4)]
        for i, qp in enumerate(qps):
            for j in range(5):
                fabric.post_send(qp, WorkRequest(
                    SEND, payload=bytes([i * 16 + j]) * 64))
        comps = fabric.deliver_step(seed=seed)
        return [(c.work_id, c.placements) for c in comps if c.verb == "RECV"]

    assert run(3) == run(3)
    assert run(3) != run(4) or True  # different seeds may coincide; no assert


def test_seeds_can_order_either_pair_first():
    def first_sender(seed):
        fabric = RdmaFabric()
        dev, srq = make_receiver(fabric)
        fabric.post_recv(srq, 0, 4096)
        qp_a = fabric.connect("a", "rx", cq=fabric.create_cq(), srq=srq)
        qp_b = fabric.connect("b", "rx", cq=fabric.create_cq(), srq=srq)
        fabric.post_send(qp_a, WorkRequest(SEND, payload=b"A" * 64))
        fabric.post_send(qp_b, WorkRequest(SEND, payload=b"B" * 64))
        fabric.deliver_step(seed=seed)
        return dev.read(0, 1)

    seen = {bytes(first_sender(seed)) for seed in range(16)}
    assert seen == {b"A", b"B"}


def test_oversized_send_without_multipacket_errors():
    fabric = RdmaFabric()
    dev = PmDevice(1 << 20)
    fabric.register_memory("rx", dev)
    cq = fabric.create_cq(ring_mode=True, ring_capacity=64)
    srq = fabric.create_mp_srq("rx", cq, stride=64, multi_packet=False)
    fabric.post_recv(srq, 0, 64)
    qp = fabric.connect("a", "rx", cq=fabric.create_cq(), srq=srq)
    fabric.post_send(qp, WorkRequest(SEND, payload=b"z" * 384, work_id=9))
    comps = fabric.deliver_step()
    assert any(c.status == RECV_BUFFER_TOO_SMALL for c in comps)
    assert all(c.placements is None for c in comps
               if c.status == RECV_BUFFER_TOO_SMALL)


def test_ring_cq_overwrites_oldest():
    fabric = RdmaFabric()
    dev, srq = make_receiver(fabric)
    srq.cq.entries = type(srq.cq.entries)(maxlen=4)
    srq.cq.ring_capacity = 4
    fabric.post_recv(srq, 0, 1 << 20)
    qp = fabric.connect("a", "rx", cq=fabric.create_cq(), srq=srq)
    for i in range(6):
        fabric.post_send(qp, WorkRequest(SEND, payload=bytes([i]) * 64,
                                         work_id=i))
    fabric.deliver_step()
    snap = fabric.poll_cq(srq.cq, 10)
    assert [c.work_id for c in snap] == [2, 3, 4, 5]
    assert srq.cq.produced == 6  # producer never blocked


def test_fifo_cq_poll_consumes_in_order():
    fabric = RdmaFabric()
    cq = fabric.create_cq()
    dev = PmDevice(4096)
    fabric.register_memory("rx", dev)
    qp = fabric.connect("a", "rx", cq=cq)
    for i in range(3):
        fabric.post_send(qp, WorkRequest(READ, raddr=0, length=8, work_id=i))
    fabric.deliver_step()
    assert [c.work_id for c in fabric.poll_cq(cq, 2)] == [0, 1]
    assert [c.work_id for c in fabric.poll_cq(cq, 2)] == [2]
    assert fabric.poll_cq(cq, 2) == []


def test_send_then_read_orders_read_after_data():
    fabric = RdmaFabric()
    dev, srq = make_receiver(fabric)
    fabric.post_recv(srq, 0, 4096)
    cq = fabric.create_cq()
    qp = fabric.connect("a", "rx", cq=cq, srq=srq)
    fabric.post_send(qp, WorkRequest(SEND, payload=b"Q" * 64, signaled=False))
    fabric.post_send(qp, WorkRequest(READ, raddr=0, length=1, work_id="ack"))
    comps = fabric.deliver_step()
    ack = [c for c in comps if c.work_id == "ack"][0]
    assert ack.data == b"Q"  # the SEND's bytes were already durable


def enumerate_interleavings(n_msgs_per_pair, depth):
    """All pick sequences of the scheduler up to the given depth."""
    total = sum(n_msgs_per_pair)
    for seq in itertools.product(range(4), repeat=min(depth, total)):
        yield seq


def run_with_picks(sends, buffers, picks, stride=64):
    """Drive a fabric with an explicit interleaving; returns observations."""
    fabric = RdmaFabric()
    dev = PmDevice(1 << 22)
    fabric.register_memory("rx", dev)
    ring = fabric.create_cq(ring_mode=True, ring_capacity=4096)
    srq = fabric.create_mp_srq("rx", ring, stride=stride)
    for base, length in buffers:
        fabric.post_recv(srq, base, length)
    qps = {}
    for sender, payload in sends:
        if sender not in qps:
            qps[sender] = fabric.connect(sender, "rx",
                                         cq=fabric.create_cq(), srq=srq)
        fabric.post_send(qps[sender], WorkRequest(SEND, payload=payload))
    picks_iter = iter(picks)

    def picker(n):
        try:
            return next(picks_iter) % n
        except StopIteration:
            return 0

    comps = fabric.deliver_step(picker=picker)
    recv = [c for c in comps if c.verb == "RECV"]
    order = []
    for _, _, verb, nbytes, dest in fabric.trace or []:
        order.append((nbytes, dest))
    return fabric, srq, recv, dev


def test_placement_law_exhaustive_small_instances():
    # <=4 senders, small message count, all pick sequences at depth <= 6:
    # placements must match the brute-force oracle applied to the delivered
    # packet order, stay stride aligned, never overlap, and consume buffers
    # in post order.
    sends = [("s0", b"a" * 32), ("s0", b"b" * 128), ("s1", b"c" * 64),
             ("s2", b"d" * 320), ("s3", b"e" * 64), ("s1", b"f" * 192)]
    buffers = [(0, 512), (512, 512), (1024, 1024)]
    for picks in itertools.product(range(4), repeat=6):
        fabric = RdmaFabric(trace=True)
        dev = PmDevice(1 << 22)
        fabric.register_memory("rx", dev)
        ring = fabric.create_cq(ring_mode=True, ring_capacity=4096)
        srq = fabric.create_mp_srq("rx", ring, stride=64)
        for base, length in buffers:
            fabric.post_recv(srq, base, length)
        qps = {}
        for sender, payload in sends:
            if sender not in qps:
                qps[sender] = fabric.connect(sender, "rx",
                                             cq=fabric.create_cq(), srq=srq)
            fabric.post_send(qps[sender], WorkRequest(SEND, payload=payload))
        it = iter(picks)

        def picker(n):
            try:
                return next(it) % n
            except StopIteration:
                return 0

        fabric.deliver_step(picker=picker)
        delivered = [(nbytes, dest) for _, _, verb, nbytes, dest
                     in fabric.trace if verb == SEND]
        expect, consumed = oracle_placements(buffers, 64,
                                             [n for n, _ in delivered])
        assert [(dest, nbytes) for nbytes, dest in delivered] == expect
        assert srq.consumed_bases == consumed
        # stride alignment and non-overlap
        spans = sorted((dest, dest + -(-nbytes // 64) * 64)
                       for nbytes, dest in delivered)
        for (lo1, hi1), (lo2, hi2) in zip(spans, spans[1:]):
            assert hi1 <= lo2
        for lo, _ in spans:
            assert lo % 64 == 0


def test_total_delivered_equals_total_sent():
    fabric = RdmaFabric(seed=5)
    dev, srq = make_receiver(fabric)
    fabric.post_recv(srq, 0, 1 << 20)
    qps = [fabric.connect(f"s{i}", "rx", cq=fabric.create_cq(), srq=srq)
           for i in range(3)]
    total = 0
    for i, qp in enumerate(qps):
        for j in range(10):
            n = 64 * (1 + (i + j) % 4)
            total += n
            fabric.post_send(qp, WorkRequest(SEND, payload=b"p" * n))
    fabric.deliver_step()
    assert fabric.delivered_payload_bytes == fabric.sent_payload_bytes == total


def test_send_stalls_until_buffers_posted():
    fabric = RdmaFabric()
    dev, srq = make_receiver(fabric)
    qp = fabric.connect("a", "rx", cq=fabric.create_cq(), srq=srq)
    fabric.post_send(qp, WorkRequest(SEND, payload=b"w" * 64, work_id=1))
    comps = fabric.deliver_step()
    assert comps == []  # no buffer space: write stalls
    fabric.post_recv(srq, 0, 4096)
    comps = fabric.deliver_step()
    assert any(c.verb == "RECV" and c.status == OK for c in comps)


def test_mtu_segmentation_may_interleave_packets():
    fabric = RdmaFabric(trace=True)
    dev, srq = make_receiver(fabric)
    fabric.post_recv(srq, 0, 1 << 20)
    qp_a = fabric.connect("a", "rx", cq=fabric.create_cq(), srq=srq, mtu=1024)
    qp_b = fabric.connect("b", "rx", cq=fabric.create_cq(), srq=srq, mtu=1024)
    fabric.post_send(qp_a, WorkRequest(SEND, payload=b"A" * 2048, work_id="big"))
    fabric.post_send(qp_b, WorkRequest(SEND, payload=b"B" * 64))
    # force interleave: a's first packet, then b, then a's second packet
    picks = iter([0, 1, 0])
    comps = fabric.deliver_step(picker=lambda n: next(picks) % n)
    big = [c for c in comps if c.work_id == "big" and c.verb == "RECV"][0]
    assert big.placements == [(0, 1024), (1088, 1024)]  # non-adjacent
    assert dev.read(1024, 64) == b"B" * 64
