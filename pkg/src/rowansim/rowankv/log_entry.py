"""Replicated log record format.

Every record is split into blocks of at most one MTU, each carrying the full
header with its own checksum so a backup can verify integrity per block even
when the NIC lands the blocks of one record at non-contiguous addresses.
Block layout (little-endian, 24-byte header, zero-padded to a 64B multiple):

    u8  op_type     nonzero (PUT=1, DEL=2, COMMITVER=3)
    u8  flags
    u16 shard_id
    u48 version
    u32 checksum    CRC-32C over the padded block with this field zeroed
    u16 cnt         block count of the record
    u16 seq         block sequence in [0, cnt)
    u16 key_len
    u32 val_len
    ... key+value payload slice, zero padding

The first 64 bits of a valid block are nonzero because op_type sits at byte 0,
which is what lets the log-feeding control loop detect consumed segments.
"""

import struct
from dataclasses import dataclass, field

from .._kernels import crc32c

OP_PUT = 1
OP_DEL = 2
OP_COMMITVER = 3

HEADER = struct.Struct("<BBH6sIHHHI")
HEADER_LEN = HEADER.size  # 24
DEFAULT_MTU = 1024
MAX_KEY_LEN = 512
MAX_VAL_LEN = 1 << 20


class SizeError(ValueError):
    pass


def _pad64(n):
    return -(-n // 64) * 64


def block_length(key_len, val_len, seq, mtu):
    """Padded on-media length of block ``seq`` of a record."""
    total = key_len + val_len
    chunk_cap = mtu - HEADER_LEN
    chunk = min(chunk_cap, total - seq * chunk_cap)
    return _pad64(HEADER_LEN + max(chunk, 0))


def entry_length(key_len, val_len, mtu):
    """Total padded on-media length of a record across all its blocks."""
    total = key_len + val_len
    cnt = max(1, -(-total // (mtu - HEADER_LEN)))
    return sum(block_length(key_len, val_len, s, mtu) for s in range(cnt))


@dataclass(frozen=True)
class Block:
    op: int
    flags: int
    shard_id: int
    version: int
    checksum: int
    cnt: int
    seq: int
    key_len: int
    val_len: int
    payload: bytes
    padded_len: int


@dataclass
class LogEntry:
    op: int
    shard_id: int
    version: int
    key: bytes
    value: bytes
    checksum: int = 0  # checksum of block 0; stable across relocation
    cnt: int = 1
    block_offsets: list = field(default_factory=list)  # seq-ordered scan offsets
    length: int = 0  # total serialized bytes

    def identity(self):
        return (self.version, self.key, self.checksum)


def encode_log_entry(op, shard_id, version, key, value, mtu=DEFAULT_MTU):
    """Serialize one record into its list of padded blocks."""
    if op not in (OP_PUT, OP_DEL, OP_COMMITVER):
        raise ValueError(f"unknown op {op}")
    if op in (OP_PUT, OP_DEL) and not key:
        raise ValueError("PUT/DEL require a non-empty key")
    if mtu % 64 != 0 or mtu <= HEADER_LEN:
        raise ValueError("mtu must be a 64B multiple larger than the header")
    if len(key) > min(MAX_KEY_LEN, mtu - HEADER_LEN):
        raise SizeError(f"key of {len(key)}B exceeds the configured maximum")
    if len(value) > MAX_VAL_LEN:
        raise SizeError(f"value of {len(value)}B exceeds the configured maximum")
    if not (0 < version < 1 << 48):
        raise ValueError("version must fit in 48 bits and be nonzero")
    payload = key + value
    chunk_cap = mtu - HEADER_LEN
    cnt = max(1, -(-len(payload) // chunk_cap))
    blocks = []
    for seq in range(cnt):
        chunk = payload[seq * chunk_cap:(seq + 1) * chunk_cap]
        raw = HEADER.pack(op, 0, shard_id, version.to_bytes(6, "little"), 0,
                          cnt, seq, len(key), len(value)) + chunk
        raw = raw + bytes(_pad64(len(raw)) - len(raw))
        crc = crc32c(raw)
        raw = raw[:10] + crc.to_bytes(4, "little") + raw[14:]
        blocks.append(raw)
    return blocks


def parse_block(buf, offset=0, mtu=DEFAULT_MTU):
    """Validate and parse one block at ``offset``; None on any mismatch."""
    if offset + HEADER_LEN > len(buf):
        return None
    (op, flags, shard_id, version_raw, checksum, cnt, seq, key_len,
     val_len) = HEADER.unpack_from(buf, offset)
    if op not in (OP_PUT, OP_DEL, OP_COMMITVER):
        return None
    if cnt == 0 or seq >= cnt:
        return None
    if key_len > mtu - HEADER_LEN or val_len > MAX_VAL_LEN:
        return None
    padded = block_length(key_len, val_len, seq, mtu)
    if padded <= 0 or offset + padded > len(buf):
        return None
    raw = bytes(buf[offset:offset + padded])
    zeroed = raw[:10] + b"\x00\x00\x00\x00" + raw[14:]
    if crc32c(zeroed) != checksum:
        return None
    total = key_len + val_len
    chunk_cap = mtu - HEADER_LEN
    chunk_len = min(chunk_cap, total - seq * chunk_cap)
    payload = raw[HEADER_LEN:HEADER_LEN + max(chunk_len, 0)]
    return Block(op, flags, shard_id, int.from_bytes(version_raw, "little"),
                 checksum, cnt, seq, key_len, val_len, payload, padded)


@dataclass
class ScanResult:
    entries: list
    incomplete: list  # (shard_id, version, cnt, {seq: offset}) groups
    end_offset: int


def _entry_from_group(blocks_by_seq, base_offsets):
    first = blocks_by_seq[0]
    payload = b"".join(blocks_by_seq[s].payload for s in range(first.cnt))
    key = payload[:first.key_len]
    value = payload[first.key_len:first.key_len + first.val_len]
    total_len = sum(blocks_by_seq[s].padded_len for s in range(first.cnt))
    return LogEntry(first.op, first.shard_id, first.version, key, value,
                    checksum=first.checksum, cnt=first.cnt,
                    block_offsets=[base_offsets[s] for s in range(first.cnt)],
                    length=total_len)


def decode_scan(buf, mtu=DEFAULT_MTU, base=0):
    """Parse blocks sequentially from a 64B-aligned log region.

    Stops cleanly at the first zero op_type or checksum mismatch (the log
    end).  Multi-block records are reassembled by (shard, version) and may be
    non-adjacent within the scanned range; groups missing blocks are reported
    in ``incomplete`` rather than returned as records.  Offsets in the result
    are rebased by ``base``.
    """
    entries = []
    groups = {}  # (shard, version, cnt) -> ({seq: Block}, {seq: offset})
    offset = 0
    n = len(buf)
    while offset + 64 <= n:
        if buf[offset] == 0:
            break
        block = parse_block(buf, offset, mtu)
        if block is None:
            break
        if block.cnt == 1:
            entries.append(_entry_from_group({0: block}, {0: base + offset}))
        else:
            key = (block.shard_id, block.version, block.cnt)
            blocks, offsets = groups.setdefault(key, ({}, {}))
            blocks[block.seq] = block
            offsets[block.seq] = base + offset
            if len(blocks) == block.cnt:
                entries.append(_entry_from_group(blocks, offsets))
                del groups[key]
        offset += block.padded_len
    incomplete = [(shard, version, cnt, dict(offsets))
                  for (shard, version, cnt), (_, offsets) in groups.items()]
    return ScanResult(entries, incomplete, offset)
