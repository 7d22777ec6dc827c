"""YCSB-style request stream generation.

Key popularity follows a rank-ordered zipfian (theta 0.99, the YCSB default)
or uniform.  Object sizes come from two-point mixtures tuned to the average
sizes of three published production workloads; the distributions beyond the
mean are not public, so these are synthetic stand-ins (documented as such)
and only the means carry meaning.
"""

from dataclasses import dataclass, field

import numpy as np

PUT_RATIOS = (1.0, 0.5, 0.05, 0.0)  # Load A / A / B / C

# (small size, large size, small probability): mean matches the published
# per-workload average object size
SIZE_MODELS = {
    "zippydb": (64, 256, (256 - 90.8) / 192),   # mean 90.8B
    "up2x": (32, 160, (160 - 57.25) / 128),     # mean 57.25B
    "udb": (64, 512, (512 - 153.8) / 448),      # mean 153.8B
}


@dataclass(frozen=True)
class WorkloadSpec:
    put_ratio: float = 0.5
    key_count: int = 10_000
    key_distribution: str = "zipfian"  # zipfian | uniform
    zipf_theta: float = 0.99
    size_model: str = "zippydb"  # zippydb | up2x | udb | fixed:<n>
    seed: int = 0

    def __post_init__(self):
        if self.put_ratio not in PUT_RATIOS:
            raise ValueError(f"put_ratio must be one of {PUT_RATIOS}")
        if self.key_distribution not in ("zipfian", "uniform"):
            raise ValueError("key_distribution must be zipfian or uniform")
        if not (self.size_model in SIZE_MODELS
                or self.size_model.startswith(("fixed:", "mix:"))):
            raise ValueError(f"unknown size model {self.size_model}")


def zipfian_pmf(key_count, theta=0.99):
    ranks = np.arange(1, key_count + 1, dtype=np.float64)
    weights = ranks ** -theta
    return weights / weights.sum()


def value_sizes(spec, n, rng):
    if spec.size_model.startswith("fixed:"):
        return np.full(n, int(spec.size_model.split(":")[1]), dtype=np.int64)
    if spec.size_model.startswith("mix:"):
        a, b, p = spec.size_model.split(":")[1].split(",")
        small, large, p_small = int(a), int(b), float(p)
    else:
        small, large, p_small = SIZE_MODELS[spec.size_model]
    draw = rng.random(n)
    return np.where(draw < p_small, small, large).astype(np.int64)


def gen_workload(spec, n):
    """Deterministic list of (op, key_index, value_size) under the spec."""
    if n <= 0:
        raise ValueError("request count must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    if spec.key_distribution == "zipfian":
        cdf = np.cumsum(zipfian_pmf(spec.key_count, spec.zipf_theta))
        keys = np.searchsorted(cdf, rng.random(n), side="right")
        keys = np.minimum(keys, spec.key_count - 1)
    else:
        keys = rng.integers(0, spec.key_count, size=n)
    puts = rng.random(n) < spec.put_ratio
    sizes = value_sizes(spec, n, rng)
    ops = []
    for i in range(n):
        if puts[i]:
            ops.append(("put", int(keys[i]), int(sizes[i])))
        else:
            ops.append(("get", int(keys[i]), 0))
    return ops


def key_bytes(key_index):
    return b"key-%010d" % key_index


def value_bytes(key_index, op_index, size):
    seed = b"%d:%d|" % (key_index, op_index)
    reps = -(-size // len(seed))
    return (seed * reps)[:size]
