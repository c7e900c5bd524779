"""Deterministic RNG substream derivation.

A single 64-bit root seed plus an integer path (stream namespace, episode
index, image index, ...) identifies every random stream in the engine.
Streams are derived, never shared, so parallel consumers cannot perturb
each other's draws and any episode is reproducible in isolation.
"""
from __future__ import annotations

import numpy as np

# Stream namespaces. Keep values stable: they are part of the
# reproducibility contract (same seed => same results, forever).
EPISODE_STREAM = 0   # episode composition (class/item choice)
FILTER_STREAM = 1    # per-image patch selection draws
INIT_STREAM = 2      # parameter initialization
DATA_STREAM = 3      # synthetic data generation
SPLIT_STREAM = 4     # split assignment shuffling
EVAL_STREAM = 5      # evaluation episode roots


def stream_key(seed: int, *path: int) -> np.random.SeedSequence:
    """Derive the SeedSequence for a (seed, path) address."""
    if seed < 0:
        raise ValueError(f"root seed must be non-negative, got {seed}")
    return np.random.SeedSequence(seed, spawn_key=tuple(int(p) for p in path))


def stream(seed: int, *path: int) -> np.random.Generator:
    """Generator for a (seed, path) address."""
    return np.random.default_rng(stream_key(seed, *path))


def child_key(key: np.random.SeedSequence, *path: int) -> np.random.SeedSequence:
    """Extend a derived key without mutating it (unlike SeedSequence.spawn)."""
    return np.random.SeedSequence(
        key.entropy, spawn_key=tuple(key.spawn_key) + tuple(int(p) for p in path)
    )


def child_stream(key: np.random.SeedSequence, *path: int) -> np.random.Generator:
    """Generator for a child of an already-derived key."""
    return np.random.default_rng(child_key(key, *path))
