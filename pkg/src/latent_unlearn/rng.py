"""Deterministic seed derivation for labeled random substreams.

Every random draw in the package comes from a generator seeded by
(master seed, label path), so independent consumers never share a stream
and any run is reproducible from its recorded seeds.
"""

import hashlib

import numpy as np
import torch

_SEED_MASK = 0x7FFF_FFFF_FFFF_FFFF


def substream_seed(master_seed: int, *labels) -> int:
    """Derive a stable 63-bit seed from a master seed and a label path."""
    key = "/".join([str(int(master_seed))] + [str(label) for label in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _SEED_MASK


def torch_generator(master_seed: int, *labels) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(substream_seed(master_seed, *labels))
    return gen


def numpy_rng(master_seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(substream_seed(master_seed, *labels))
