"""Named-seed registry.

Every random stream in the pipeline is derived from one root seed plus a
tuple of string/int labels, so any stage (dataset synthesis, diffusion
training, candidate generation, SSL training, probes) can be re-run in
isolation and still reproduce its draws bit-for-bit.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_MASK63 = (1 << 63) - 1


def derive_seed(root_seed: int, *labels: object) -> int:
    """Map (root seed, labels...) to a stable 63-bit integer seed."""
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little") & _MASK63


def numpy_rng(root_seed: int, *labels: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, *labels))


def torch_generator(root_seed: int, *labels: object) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(derive_seed(root_seed, *labels))
    return gen
