"""Log record layout, per-block checksums, multi-block reassembly."""

import pytest
from hypothesis import given, settings, strategies as st

from rowansim.rowankv.log_entry import (
    HEADER_LEN, OP_COMMITVER, OP_DEL, OP_PUT, SizeError, block_length,
    decode_scan, encode_log_entry, entry_length, parse_block,
)


def test_small_put_is_one_64b_block():
    blocks = encode_log_entry(OP_PUT, 3, 9, b"k", b"0123456789", mtu=1024)
    assert len(blocks) == 1
    assert len(blocks[0]) == 64  # 24B header + 11B payload + padding
    assert blocks[0][0] == OP_PUT
    assert blocks[0][:8] != bytes(8)  # nonzero first 64 bits


def test_two_mtu_entry_has_two_tagged_blocks():
    value = bytes(1500)
    blocks = encode_log_entry(OP_PUT, 0xA, 64, b"key", value, mtu=1024)
    assert len(blocks) == 2
    for seq, raw in enumerate(blocks):
        blk = parse_block(raw, 0, mtu=1024)
        assert blk is not None
        assert (blk.shard_id, blk.version) == (0xA, 64)
        assert (blk.cnt, blk.seq) == (2, seq)
        assert len(raw) <= 1024


def test_del_carries_key_only():
    blocks = encode_log_entry(OP_DEL, 1, 5, b"gone", b"")
    blk = parse_block(blocks[0])
    assert blk.op == OP_DEL
    assert blk.key_len == 4
    assert blk.val_len == 0


def test_commitver_entry_has_empty_key():
    blocks = encode_log_entry(OP_COMMITVER, 7, 123, b"", b"")
    blk = parse_block(blocks[0])
    assert blk.op == OP_COMMITVER
    assert (blk.key_len, blk.val_len) == (0, 0)
    assert len(blocks[0]) == 64


def test_rejects_oversized_key_and_value():
    with pytest.raises(SizeError):
        encode_log_entry(OP_PUT, 0, 1, b"k" * 2000, b"")
    with pytest.raises(SizeError):
        encode_log_entry(OP_PUT, 0, 1, b"k", bytes(2 << 20))


def test_rejects_empty_key_for_put():
    with pytest.raises(ValueError):
        encode_log_entry(OP_PUT, 0, 1, b"", b"v")


def test_scan_of_zeroed_segment_is_empty():
    result = decode_scan(bytes(4096))
    assert result.entries == []
    assert result.end_offset == 0


def test_encode_decode_round_trip():
    blocks = encode_log_entry(OP_PUT, 2, 77, b"alpha", b"beta" * 10)
    result = decode_scan(b"".join(blocks))
    assert len(result.entries) == 1
    e = result.entries[0]
    assert (e.op, e.shard_id, e.version) == (OP_PUT, 2, 77)
    assert e.key == b"alpha"
    assert e.value == b"beta" * 10
    assert result.end_offset == sum(len(b) for b in blocks)


def test_interleaved_multiblock_reassembly():
    big = encode_log_entry(OP_PUT, 1, 10, b"big", bytes(1500), mtu=1024)
    small = encode_log_entry(OP_PUT, 1, 11, b"small", b"v")
    laid_out = big[0] + small[0] + big[1]
    result = decode_scan(laid_out, mtu=1024)
    assert {e.version for e in result.entries} == {10, 11}
    big_entry = [e for e in result.entries if e.version == 10][0]
    assert big_entry.value == bytes(1500)
    assert big_entry.block_offsets == [0, len(big[0]) + 64]
    assert result.incomplete == []


def test_incomplete_group_reported_not_returned():
    big = encode_log_entry(OP_PUT, 1, 10, b"big", bytes(1500), mtu=1024)
    result = decode_scan(big[0], mtu=1024)
    assert result.entries == []
    assert len(result.incomplete) == 1
    shard, version, cnt, offsets = result.incomplete[0]
    assert (shard, version, cnt) == (1, 10, 2)
    assert offsets == {0: 0}


def test_scan_stops_at_corruption():
    good = encode_log_entry(OP_PUT, 0, 1, b"a", b"1")[0]
    bad = bytearray(encode_log_entry(OP_PUT, 0, 2, b"b", b"2")[0])
    bad[30] ^= 0xFF  # corrupt payload: checksum mismatch
    tail = encode_log_entry(OP_PUT, 0, 3, b"c", b"3")[0]
    result = decode_scan(good + bytes(bad) + tail)
    assert [e.version for e in result.entries] == [1]
    assert result.end_offset == 64


def test_entry_length_matches_encoding():
    for key, value, mtu in [(b"k", b"v" * 10, 1024), (b"key", bytes(1500), 1024),
                            (b"kk", bytes(500), 128), (b"", b"", 1024)]:
        op = OP_COMMITVER if not key else OP_PUT
        blocks = encode_log_entry(op, 0, 5, key, value, mtu=mtu)
        assert entry_length(len(key), len(value), mtu) == sum(len(b) for b in blocks)
        for seq, b in enumerate(blocks):
            assert block_length(len(key), len(value), seq, mtu) == len(b)


@settings(max_examples=80, deadline=None)
@given(st.binary(min_size=1, max_size=40), st.binary(max_size=3000),
       st.integers(1, (1 << 48) - 1), st.sampled_from([128, 256, 1024]))
def test_round_trip_property(key, value, version, mtu):
    blocks = encode_log_entry(OP_PUT, 5, version, key, value, mtu=mtu)
    assert all(len(b) <= mtu and len(b) % 64 == 0 for b in blocks)
    result = decode_scan(b"".join(blocks), mtu=mtu)
    assert len(result.entries) == 1
    e = result.entries[0]
    assert (e.key, e.value, e.version) == (key, value, version)
    assert e.length == sum(len(b) for b in blocks)


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(4)))
def test_block_order_does_not_matter(order):
    entries = [encode_log_entry(OP_PUT, 0, 100 + i, b"k%d" % i, bytes(900), mtu=512)
               for i in range(2)]
    blocks = [b for e in entries for b in e]
    assert len(blocks) == 4  # two 2-block records at this MTU
    shuffled = b"".join(blocks[i] for i in order)
    result = decode_scan(shuffled, mtu=512)
    got = {(e.version, e.key, e.value) for e in result.entries}
    assert got == {(100, b"k0", bytes(900)), (101, b"k1", bytes(900))}
