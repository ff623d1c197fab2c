"""Stable derivation of sub-seeds from a master seed."""

import hashlib

import numpy as np


def derive_seed(master, *keys):
    """Return a 63-bit seed determined only by ``master`` and ``keys``.

    Uses a cryptographic hash of the textual representation so the value is
    stable across processes, platforms and Python hash randomisation.
    """
    text = repr((int(master),) + tuple(keys)).encode()
    digest = hashlib.blake2b(text, digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng_for(master, *keys):
    return np.random.default_rng(derive_seed(master, *keys))
