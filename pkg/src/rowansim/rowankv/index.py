"""Per-shard DRAM hash index.

Buckets hold 64-bit items, each a 16-bit tag plus a 48-bit PM address; a full
bucket grows a chained overflow bucket.  The index itself stores no keys or
versions: lookups filter on the tag and confirm by reading the pointed-to log
record, and conditional updates compare against the version read from PM.
"""

BUCKET_SLOTS = 8

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def hash_key(key):
    """Stable 64-bit key hash, identical cluster-wide.

    FNV-1a with a splitmix-style finalizer: plain FNV leaves the high bits
    nearly constant for short keys, and both range sharding and the index tag
    are carved from the top of the hash.
    """
    mask = 0xFFFFFFFFFFFFFFFF
    h = _FNV_OFFSET
    for b in key:
        h = ((h ^ b) * _FNV_PRIME) & mask
    h ^= h >> 30
    h = (h * 0xBF58476D1CE4E5B9) & mask
    h ^= h >> 27
    h = (h * 0x94D049BB133111EB) & mask
    h ^= h >> 31
    return h


def key_tag(key_hash):
    return (key_hash >> 48) & 0xFFFF


class ShardIndex:
    def __init__(self, nbuckets=1024):
        self.nbuckets = nbuckets
        self.buckets = [[] for _ in range(nbuckets)]

    def _chain(self, key_hash):
        return self.buckets[key_hash % self.nbuckets]

    def lookup(self, key, reader, key_hash=None):
        """(version, addr) of the record indexed for ``key``, or None.

        ``reader(addr) -> (key, version)`` resolves tag collisions by reading
        the log record from PM.
        """
        h = hash_key(key) if key_hash is None else key_hash
        tag = key_tag(h)
        for item in self._chain(h):
            if item >> 48 == tag:
                addr = item & 0xFFFFFFFFFFFF
                stored_key, version = reader(addr)
                if stored_key == key:
                    return version, addr
        return None

    def upsert(self, key, version, addr, reader):
        """Install (tag, addr) iff ``version`` beats the indexed record.

        Ties are rejected so that re-digesting duplicated retry records is
        idempotent.  Returns (accepted, previous_addr_or_None).
        """
        h = hash_key(key)
        tag = key_tag(h)
        chain = self._chain(h)
        for i, item in enumerate(chain):
            if item >> 48 == tag:
                old_addr = item & 0xFFFFFFFFFFFF
                stored_key, old_version = reader(old_addr)
                if stored_key == key:
                    if version <= old_version:
                        return False, None
                    chain[i] = (tag << 48) | addr
                    return True, old_addr
        chain.append((tag << 48) | addr)
        return True, None

    def relocate(self, key, old_addr, new_addr):
        """Repoint an entry after GC moved it; no-op if the index moved on."""
        h = hash_key(key)
        tag = key_tag(h)
        chain = self._chain(h)
        for i, item in enumerate(chain):
            if item == (tag << 48) | old_addr:
                chain[i] = (tag << 48) | new_addr
                return True
        return False

    def addresses(self):
        for chain in self.buckets:
            for item in chain:
                yield item & 0xFFFFFFFFFFFF

    def __len__(self):
        return sum(len(chain) for chain in self.buckets)
