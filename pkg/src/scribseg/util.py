"""Shared helpers: derived RNG streams and the UNKNOWN label constant."""

import hashlib

import numpy as np

# Reserved label value marking pixels with no (or withheld) label.
UNKNOWN = 255


def derive_rng(master_seed, *labels):
    """Independent, reproducible Generator for (master_seed, *labels).

    Streams with different label paths never collide, so toggling one
    pipeline stage does not perturb another stage's randomness.
    """
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode())
    for lab in labels:
        h.update(b"/")
        h.update(str(lab).encode())
    words = np.frombuffer(h.digest()[:16], dtype=np.uint32)
    return np.random.default_rng(np.random.SeedSequence(words.tolist()))
