"""Deterministic random-number plumbing.

A single run seed fans out into named sub-streams so that consumers do not
perturb each other: drawing more initialization numbers never changes the
data shuffle, and vice versa.  Stream names are hashed stably (sha256, not
``hash()``, which is salted per process) so the mapping is reproducible
across runs and machines.
"""

import hashlib

import numpy as np

# Streams used by the package.  Listed here for documentation; substream()
# accepts any name.
STREAMS = ("data", "init", "arch", "droppath", "rrelu", "augment")


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf8")).digest()
    return int.from_bytes(digest[:8], "big")


def substream(seed: int, name: str) -> np.random.Generator:
    """Return an independent Generator for (seed, name)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _name_key(name)])
    return np.random.Generator(np.random.PCG64(ss))


def generator_state(gen: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's position."""
    return gen.bit_generator.state


def restore_generator(state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen
