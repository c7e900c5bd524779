"""Patch filtering: class-token similarity, softmax selection probabilities,
the four selection strategies, and class-aware fusion of the survivors.

All selectors return pairwise-distinct indices sorted ascending, so the
selected set is order-canonical: at k == P every strategy yields the same
indices and the downstream scores coincide exactly.
"""
from __future__ import annotations

import numpy as np

from .domain import RunConfig, PatchEmbeddingSet, SelectionResult

ZERO_NORM_EPS = 1e-12


class DegenerateClassTokenError(ValueError):
    """The class token has (near-)zero norm; cosine similarity is undefined."""


def l2_normalize(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise L2 normalization.

    Rows with norm below ZERO_NORM_EPS are returned as zeros instead of
    erroring; the second return value flags them.
    """
    mat = np.asarray(vectors, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {mat.shape}")
    norms = np.linalg.norm(mat, axis=1)
    zero_rows = norms < ZERO_NORM_EPS
    safe = np.where(zero_rows, 1.0, norms)
    out = mat / safe[:, None]
    out[zero_rows] = 0.0
    return out, zero_rows


def class_similarity(patches: np.ndarray, class_token: np.ndarray) -> np.ndarray:
    """Cosine similarity of every patch embedding against the class token.

    Zero-norm patches score 0; a zero-norm class token is an error.
    """
    token = np.asarray(class_token, dtype=np.float64)
    token_hat, token_zero = l2_normalize(token[None, :])
    if token_zero[0]:
        raise DegenerateClassTokenError("degenerate class token")
    patches_hat, _ = l2_normalize(patches)
    return patches_hat @ token_hat[0]


def similarity_to_probabilities(scores: np.ndarray) -> np.ndarray:
    """Stable softmax (max-subtracted) turning similarity scores into a
    strictly positive distribution over patches."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError(f"expected a non-empty score vector, got shape {s.shape}")
    if not np.isfinite(s).all():
        raise ValueError("non-finite similarity score")
    shifted = s - s.max()
    e = np.exp(shifted)
    return e / e.sum()


def _as_distribution(probabilities: np.ndarray) -> np.ndarray:
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"expected a non-empty probability vector, got shape {p.shape}")
    if not np.isfinite(p).all() or (p < 0).any():
        raise ValueError("probabilities must be finite and non-negative")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    return p


def _check_k(k: int, population: int) -> None:
    if not 1 <= k <= population:
        raise ValueError(f"k must be in [1, {population}], got {k}")


def _draw_without_replacement(weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Sequential categorical draws, zeroing each chosen weight and
    renormalizing implicitly via the running total (weighted sampling
    without replacement). Weights need not sum to 1."""
    work = np.array(weights, dtype=np.float64)
    out = np.empty(k, dtype=np.int64)
    for i in range(k):
        cdf = np.cumsum(work)
        total = float(cdf[-1])
        if total <= 0.0:
            # Mass exhausted (inputs may carry exact zeros): the rest of the
            # pick is uniform over whatever indices remain.
            available = np.ones(work.size, dtype=bool)
            available[out[:i]] = False
            out[i:] = rng.choice(np.flatnonzero(available), size=k - i, replace=False)
            break
        u = rng.random() * total
        idx = int(np.searchsorted(cdf, u, side="right"))
        if idx >= work.size or work[idx] <= 0.0:
            idx = int(np.flatnonzero(work)[-1])
        out[i] = idx
        work[idx] = 0.0
    return np.sort(out)


def select_stochastic(probabilities: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Sample k distinct patch indices with inclusion biased by probability."""
    p = _as_distribution(probabilities)
    _check_k(k, p.size)
    return _draw_without_replacement(p, k, rng)


def select_deterministic(probabilities: np.ndarray, k: int) -> np.ndarray:
    """Top-k indices by probability; ties broken toward the lowest index."""
    p = _as_distribution(probabilities)
    _check_k(k, p.size)
    top = np.argsort(-p, kind="stable")[:k]
    return np.sort(top)


def select_random(population: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """k distinct indices uniform over all k-subsets of range(population)."""
    _check_k(k, population)
    return np.sort(rng.choice(population, size=k, replace=False))


def select_mixed(
    probabilities: np.ndarray,
    k: int,
    stochastic_fraction: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Hybrid pick: round((1-f)*k) deterministic top indices, the rest
    sampled stochastically from the leftover distribution.

    Rounds half away from zero so a 25/75 split of k=98 gives 74 fixed
    picks. f=0 consumes no randomness and equals select_deterministic;
    f=1 equals select_stochastic draw for draw.
    """
    p = _as_distribution(probabilities)
    _check_k(k, p.size)
    if not 0.0 <= stochastic_fraction <= 1.0:
        raise ValueError(f"stochastic_fraction must be in [0, 1], got {stochastic_fraction}")
    k_fix = int(np.floor((1.0 - stochastic_fraction) * k + 0.5))
    if k_fix == k:
        return select_deterministic(p, k)
    if k_fix == 0:
        return _draw_without_replacement(p, k, rng)
    fixed = select_deterministic(p, k_fix)
    leftover = np.setdiff1d(np.arange(p.size), fixed, assume_unique=True)
    drawn = _draw_without_replacement(p[leftover], k - k_fix, rng)
    return np.sort(np.concatenate([fixed, leftover[drawn]]))


def class_aware_addition(selected: np.ndarray, class_token: np.ndarray, lam: float) -> np.ndarray:
    """Add lam * class_token to every selected patch embedding."""
    sel = np.asarray(selected, dtype=np.float64)
    token = np.asarray(class_token, dtype=np.float64)
    if sel.ndim != 2 or sel.shape[1] != token.shape[0]:
        raise ValueError(f"selected {sel.shape} and class token {token.shape} do not align")
    return sel + lam * token


def filter_patches(
    item: PatchEmbeddingSet,
    config: RunConfig,
    rng: np.random.Generator | None = None,
) -> SelectionResult:
    """Full filtering pass for one image: similarity -> probabilities ->
    selection (per config mode) -> class-aware fusion.

    Stochastic, random, and mixed modes require an rng; selection indices
    are sorted ascending before fusion so results are order-canonical.
    """
    k = config.k_patches
    p_count = item.patch_count
    if k > p_count:
        raise ValueError(f"k_patches={k} exceeds patch count P={p_count}")
    scores = class_similarity(item.patches, item.class_token)
    probs = similarity_to_probabilities(scores)
    mode = config.selection_mode
    if mode == "deterministic":
        indices = select_deterministic(probs, k)
    else:
        if rng is None:
            raise ValueError(f"selection mode {mode!r} requires an rng")
        if mode == "stochastic":
            indices = select_stochastic(probs, k, rng)
        elif mode == "random":
            indices = select_random(p_count, k, rng)
        else:
            indices = select_mixed(probs, k, config.stochastic_fraction, rng)
    fused = class_aware_addition(
        np.asarray(item.patches, dtype=np.float64)[indices], item.class_token, config.lambda_class
    )
    return SelectionResult(
        indices=indices,
        probabilities=probs,
        selected=fused,
        mode=mode,
        stochastic_fraction=config.stochastic_fraction if mode == "mixed" else None,
    )
