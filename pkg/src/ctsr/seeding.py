"""Labeled seed splitting: one run seed fans out into independent streams."""

import hashlib

import numpy as np
import torch


def derive_seed(seed, *labels) -> int:
    """Map ``(seed, label, ...)`` to a 63-bit integer seed.

    Uses SHA-256 so the result is stable across processes and platforms
    (unlike ``hash()``).
    """
    key = "/".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def numpy_rng(seed, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))


def torch_generator(seed, *labels) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, *labels))
    return gen
