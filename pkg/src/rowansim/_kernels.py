"""Hot inner loops shared by the PM device model and the log checksum path.

Every kernel is written once in numba-compatible form and compiled with
``@njit`` when numba is available.  Setting ``ROWANSIM_NUMBA=0`` (or ``off`` /
``false``) selects the interpreted pure-numpy path instead; ``ROWANSIM_NUMBA=1``
makes a missing numba installation a hard error.  Both paths execute the same
source, so results are bit-identical.
"""

import os

import numpy as np

# counter slots shared between device object and kernels
REQUEST_BYTES = 0
MEDIA_BYTES = 1
CLOCK = 2
SUBWORD_WRITES = 3
N_COUNTERS = 4

_flag = os.environ.get("ROWANSIM_NUMBA", "auto").strip().lower()
if _flag in ("0", "off", "false", "no"):
    USING_NUMBA = False
elif _flag in ("1", "on", "true", "yes"):
    import numba  # noqa: F401 -- fail loudly if forced on but missing

    USING_NUMBA = True
else:
    try:
        import numba  # noqa: F401

        USING_NUMBA = True
    except ImportError:
        USING_NUMBA = False


def _jit(fn):
    if USING_NUMBA:
        import numba

        return numba.njit(cache=True)(fn)
    return fn


def _make_crc32c_table():
    # reflected Castagnoli polynomial
    poly = np.uint32(0x82F63B78)
    table = np.empty(256, dtype=np.uint32)
    for i in range(256):
        c = np.uint32(i)
        for _ in range(8):
            if c & np.uint32(1):
                c = (c >> np.uint32(1)) ^ poly
            else:
                c = c >> np.uint32(1)
        table[i] = c
    return table


CRC32C_TABLE = _make_crc32c_table()


def _crc32c_impl(table, data):
    crc = np.uint32(0xFFFFFFFF)
    for i in range(data.shape[0]):
        idx = (crc ^ np.uint32(data[i])) & np.uint32(0xFF)
        crc = table[idx] ^ (crc >> np.uint32(8))
    return crc ^ np.uint32(0xFFFFFFFF)


def _evict_slot_impl(media, slot_line, slot_staged, slot_dirty, slot_fill,
                     counters, line_size, slot):
    # one eviction always costs a full media line, however sparse the dirty mask
    base = slot_line[slot] * line_size
    seg = media[base:base + line_size]
    media[base:base + line_size] = np.where(slot_dirty[slot], slot_staged[slot], seg)
    counters[MEDIA_BYTES] += line_size
    slot_line[slot] = -1
    slot_fill[slot] = 0
    slot_dirty[slot, :] = False


def _pm_write_impl(media, slot_line, slot_touch, slot_staged, slot_dirty,
                   slot_fill, counters, line_size, addr, data):
    n = data.shape[0]
    counters[REQUEST_BYTES] += n
    if addr % 64 != 0 or n % 64 != 0:
        counters[SUBWORD_WRITES] += 1
    pos = 0
    while pos < n:
        a = addr + pos
        line = a // line_size
        off = a - line * line_size
        take = line_size - off
        if take > n - pos:
            take = n - pos
        eq = slot_line == line
        slot = np.argmax(eq)
        if not eq[slot]:
            if np.all(slot_line >= 0):
                slot = np.argmin(slot_touch)
                _evict_slot(media, slot_line, slot_staged, slot_dirty,
                            slot_fill, counters, line_size, slot)
            else:
                slot = np.argmax(slot_line < 0)
            slot_line[slot] = line
            slot_fill[slot] = 0
            slot_dirty[slot, :] = False
        already = np.count_nonzero(slot_dirty[slot, off:off + take])
        slot_fill[slot] += take - already
        slot_staged[slot, off:off + take] = data[pos:pos + take]
        slot_dirty[slot, off:off + take] = True
        counters[CLOCK] += 1
        slot_touch[slot] = counters[CLOCK]
        if slot_fill[slot] == line_size:
            # a fully assembled line has nothing left to combine: the buffer
            # drains it eagerly, freeing the slot for partial lines
            _evict_slot(media, slot_line, slot_staged, slot_dirty, slot_fill,
                        counters, line_size, slot)
        pos += take


def _pm_flush_impl(media, slot_line, slot_staged, slot_dirty, slot_fill,
                   counters, line_size):
    for slot in range(slot_line.shape[0]):
        if slot_line[slot] >= 0:
            _evict_slot(media, slot_line, slot_staged, slot_dirty, slot_fill,
                        counters, line_size, slot)


def _pm_read_impl(media, slot_line, slot_staged, slot_dirty, line_size, addr,
                  out):
    n = out.shape[0]
    out[:] = media[addr:addr + n]
    for slot in range(slot_line.shape[0]):
        line = slot_line[slot]
        if line < 0:
            continue
        base = line * line_size
        if base + line_size <= addr or base >= addr + n:
            continue
        lo = max(addr, base)
        hi = min(addr + n, base + line_size)
        mask = slot_dirty[slot, lo - base:hi - base]
        cur = out[lo - addr:hi - addr]
        out[lo - addr:hi - addr] = np.where(
            mask, slot_staged[slot, lo - base:hi - base], cur)


def _write_stream_batch_impl(media, slot_line, slot_touch, slot_staged,
                             slot_dirty, slot_fill, counters, line_size,
                             addrs, data):
    # one fixed-size write per address; the workhorse of DLWA sweeps
    for k in range(addrs.shape[0]):
        pm_write(media, slot_line, slot_touch, slot_staged, slot_dirty,
                 slot_fill, counters, line_size, addrs[k], data)


crc32c_raw = _jit(_crc32c_impl)
_evict_slot = _jit(_evict_slot_impl)
pm_write = _jit(_pm_write_impl)
pm_flush = _jit(_pm_flush_impl)
pm_read = _jit(_pm_read_impl)
write_stream_batch = _jit(_write_stream_batch_impl)


def crc32c(data):
    """CRC-32C of a bytes-like object."""
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    return int(crc32c_raw(CRC32C_TABLE, buf))


def warmup():
    """Force JIT compilation of every kernel (no-op on the fallback path)."""
    media = np.zeros(512, dtype=np.uint8)
    slot_line = np.full(2, -1, dtype=np.int64)
    slot_touch = np.zeros(2, dtype=np.int64)
    slot_staged = np.zeros((2, 256), dtype=np.uint8)
    slot_dirty = np.zeros((2, 256), dtype=np.bool_)
    slot_fill = np.zeros(2, dtype=np.int64)
    counters = np.zeros(N_COUNTERS, dtype=np.int64)
    data = np.zeros(64, dtype=np.uint8)
    pm_write(media, slot_line, slot_touch, slot_staged, slot_dirty, slot_fill,
             counters, 256, 0, data)
    write_stream_batch(media, slot_line, slot_touch, slot_staged, slot_dirty,
                       slot_fill, counters, 256, np.zeros(1, dtype=np.int64),
                       data)
    out = np.empty(8, dtype=np.uint8)
    pm_read(media, slot_line, slot_staged, slot_dirty, 256, 0, out)
    pm_flush(media, slot_line, slot_staged, slot_dirty, slot_fill, counters,
             256)
    crc32c(b"warmup")
