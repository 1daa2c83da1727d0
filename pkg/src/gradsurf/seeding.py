"""Master-seed splitting: every random stream is derived from (seed, label, *counters)."""
import zlib

import numpy as np


def label_code(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def seed_sequence(seed: int, label: str, *counters: int) -> np.random.SeedSequence:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, label_code(label)]
    entropy.extend(int(c) for c in counters)
    return np.random.SeedSequence(entropy)


def rng(seed: int, label: str, *counters: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, label, *counters))


def torch_seed(seed: int, label: str, *counters: int) -> int:
    return int(seed_sequence(seed, label, *counters).generate_state(1, dtype=np.uint64)[0] >> 1)
