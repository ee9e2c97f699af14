"""Seeded generator hierarchy keyed by ``(seed, purpose)``.

Every random draw in the package goes through :func:`rng_for` or
:func:`torch_generator_for`, so two modules never share a stream by accident
and a run is fully determined by its root seed.
"""

import hashlib

import numpy as np
import torch


def _purpose_key(purpose):
    digest = hashlib.sha256(str(purpose).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(seed, purpose):
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _purpose_key(purpose)])


def rng_for(seed, purpose):
    """Numpy generator for ``purpose`` under root ``seed``."""
    return np.random.default_rng(seed_sequence(seed, purpose))


def int_seed_for(seed, purpose):
    return int(seed_sequence(seed, purpose).generate_state(1, dtype=np.uint64)[0] >> 1)


def torch_generator_for(seed, purpose):
    gen = torch.Generator()
    gen.manual_seed(int_seed_for(seed, purpose))
    return gen
