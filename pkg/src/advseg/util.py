"""Small shared helpers: seeded substreams, rounding, stable softmax."""

from __future__ import annotations

import zlib

import numpy as np


def named_rng(seed: int, *names: str) -> np.random.Generator:
    """Independent, reproducible random stream derived from a base seed.

    Every consumer of randomness draws from its own named substream so
    that re-running any single pipeline stage reproduces it exactly no
    matter what the other stages consumed.
    """
    keys = tuple(zlib.crc32(n.encode("utf-8")) for n in names)
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + keys))


def round_half_up(x: float) -> int:
    """Round with halves going up (0.5 -> 1), independent of banker's rounding."""
    return int(np.floor(x + 0.5))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax of an (N, c) logit array."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_per_point(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row -log p(label) of an (N, c) logit array, computed stably."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    rows = np.arange(z.shape[0])
    return lse - z[rows, np.asarray(labels, dtype=np.int64)]
