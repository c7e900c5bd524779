"""Query-support scoring: dense patch similarity matrices, the MLP head
that turns a flattened matrix into one scalar, shot aggregation, softmax
classification, and exact manual gradients for the head.

Orientation is fixed: score matrix rows are query patches, columns are
support patches; flattening is row-major. Distances (manhattan,
euclidean) are negated so larger always means more similar.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import DISTANCE_METRICS, ScorerParams
from .filtering import l2_normalize
from .seeding import INIT_STREAM, stream

LOG_EPS = 1e-12


def init_scorer(
    input_width: int,
    hidden_sizes: tuple[int, ...] = (256,),
    seed: int = 0,
    zero_final: bool = False,
) -> ScorerParams:
    """Seeded symmetric-uniform init (+-sqrt(6/(fan_in+fan_out))) of the
    scoring head. zero_final zeroes the last layer so an untrained scorer
    emits exactly 0 for every pair."""
    rng = stream(seed, INIT_STREAM)
    sizes = (input_width, *hidden_sizes, 1)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    if zero_final:
        weights[-1] = np.zeros_like(weights[-1])
        biases[-1] = np.zeros_like(biases[-1])
    return ScorerParams(weights=tuple(weights), biases=tuple(biases))


@dataclass(frozen=True)
class ScorerGrads:
    """Gradients of the episode loss w.r.t. every scorer parameter."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]


def pairwise_matrix(query_sel: np.ndarray, support_sel: np.ndarray, metric: str) -> np.ndarray:
    """Dense score matrix between one query's and one support's selected
    patches. Entry (a, b) compares query patch a with support patch b."""
    q = np.asarray(query_sel, dtype=np.float64)
    s = np.asarray(support_sel, dtype=np.float64)
    if q.shape != s.shape or q.ndim != 2:
        raise ValueError(f"mismatched selections: {q.shape} vs {s.shape}")
    if metric == "cosine":
        qh, _ = l2_normalize(q)
        sh, _ = l2_normalize(s)
        return qh @ sh.T
    if metric == "manhattan":
        return -np.abs(q[:, None, :] - s[None, :, :]).sum(axis=2)
    if metric == "euclidean":
        sq = (q * q).sum(axis=1)[:, None] + (s * s).sum(axis=1)[None, :] - 2.0 * (q @ s.T)
        return -np.sqrt(np.maximum(sq, 0.0))
    raise ValueError(f"unknown metric {metric!r}, expected one of {DISTANCE_METRICS}")


def _forward(params: ScorerParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batched MLP forward. Returns scores [B] and the per-layer input
    activations needed for backprop (last entry: pre-activation masks)."""
    activations = [x]
    a = x
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        a = np.maximum(z, 0.0) if i < n_layers - 1 else z
        activations.append(a)
    return a[:, 0], activations


def _backward(params: ScorerParams, activations: list[np.ndarray], dscores: np.ndarray) -> ScorerGrads:
    """Exact gradients for every layer given d(loss)/d(scores)."""
    delta = np.asarray(dscores, dtype=np.float64)[:, None]
    grads_w: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * len(params.biases)  # type: ignore[list-item]
    for i in range(len(params.weights) - 1, -1, -1):
        a_prev = activations[i]
        grads_w[i] = a_prev.T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            # Hidden activations are max(0, z); a_prev > 0 is the ramp mask.
            delta = (delta @ params.weights[i].T) * (a_prev > 0.0)
    return ScorerGrads(weights=tuple(grads_w), biases=tuple(grads_b))


class MlpScorer:
    """Stateful wrapper caching the forward pass for backprop."""

    def __init__(self, params: ScorerParams):
        self.params = params
        self._cache: list[np.ndarray] | None = None

    def forward(self, flat_matrices: np.ndarray) -> np.ndarray:
        x = np.asarray(flat_matrices, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.params.input_width:
            raise ValueError(
                f"input width {x.shape[-1] if x.ndim else '?'} does not match scorer width {self.params.input_width}"
            )
        scores, self._cache = _forward(self.params, x)
        return scores

    def backward(self, dscores: np.ndarray) -> ScorerGrads:
        if self._cache is None:
            raise RuntimeError("backward called before any forward pass")
        return _backward(self.params, self._cache, dscores)


def mlp_score(matrix: np.ndarray, params: ScorerParams) -> float:
    """Score one k x k matrix: flatten row-major, run the head."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.size != params.input_width:
        raise ValueError(
            f"matrix of shape {m.shape} flattens to {m.size}, scorer expects {params.input_width}"
        )
    scores, _ = _forward(params, m.reshape(1, -1))
    return float(scores[0])


def aggregate_shots(raw: np.ndarray, n_way: int, m_shot: int) -> np.ndarray:
    """Sum per-pair scores over the M shots of each class slot.

    Raw columns must be slot-major: [slot0 shot0..M-1, slot1 shot0..M-1, ...].
    """
    r = np.asarray(raw, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != n_way * m_shot:
        raise ValueError(f"raw scores shape {r.shape} does not match N={n_way}, M={m_shot}")
    return r.reshape(r.shape[0], n_way, m_shot).sum(axis=2)


def classify(aggregated: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax over class slots."""
    a = np.asarray(aggregated, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected [n_queries x N], got shape {a.shape}")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-probability of the true slot, floored at LOG_EPS."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise ValueError(f"probabilities {p.shape} and labels {y.shape} do not align")
    picked = p[np.arange(p.shape[0]), y]
    return float(-np.log(np.maximum(picked, LOG_EPS)).mean())


@dataclass(frozen=True)
class EpisodeScores:
    """Per-episode scoring record: raw pair scores [n_q x N*M], aggregated
    class scores [n_q x N], and classification probabilities [n_q x N]."""

    raw: np.ndarray
    aggregated: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self) -> None:
        sums = self.probabilities.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ValueError("probability rows must sum to 1 +- 1e-6")


def episode_forward(
    query_fused: np.ndarray,
    support_fused: np.ndarray,
    params: ScorerParams,
    metric: str,
    n_way: int,
    m_shot: int,
) -> tuple[EpisodeScores, MlpScorer]:
    """Score every query against every support (slot-major) and classify.

    query_fused: [n_q, k, D]; support_fused: [N*M, k, D]. Returns the
    scores plus the scorer holding the cached forward pass for backward.
    """
    q = np.asarray(query_fused, dtype=np.float64)
    s = np.asarray(support_fused, dtype=np.float64)
    n_q, k, _ = q.shape
    n_s = s.shape[0]
    if n_s != n_way * m_shot:
        raise ValueError(f"{n_s} supports do not form N={n_way} x M={m_shot}")
    if metric == "cosine":
        qh, _ = l2_normalize(q.reshape(n_q * k, -1))
        sh, _ = l2_normalize(s.reshape(n_s * k, -1))
        matrices = np.einsum(
            "qad,sbd->qsab", qh.reshape(n_q, k, -1), sh.reshape(n_s, k, -1)
        )
    elif metric == "euclidean":
        qsq = (q * q).sum(axis=2)
        ssq = (s * s).sum(axis=2)
        cross = np.einsum("qad,sbd->qsab", q, s)
        sq = qsq[:, None, :, None] + ssq[None, :, None, :] - 2.0 * cross
        matrices = -np.sqrt(np.maximum(sq, 0.0))
    elif metric == "manhattan":
        matrices = np.empty((n_q, n_s, k, k))
        for qi in range(n_q):
            for si in range(n_s):
                matrices[qi, si] = -np.abs(q[qi][:, None, :] - s[si][None, :, :]).sum(axis=2)
    else:
        raise ValueError(f"unknown metric {metric!r}, expected one of {DISTANCE_METRICS}")
    scorer = MlpScorer(params)
    raw = scorer.forward(matrices.reshape(n_q * n_s, k * k)).reshape(n_q, n_s)
    if not np.isfinite(raw).all():
        raise ArithmeticError("non-finite pair scores (diverged parameters?)")
    aggregated = aggregate_shots(raw, n_way, m_shot)
    probabilities = classify(aggregated)
    return EpisodeScores(raw=raw, aggregated=aggregated, probabilities=probabilities), scorer


def episode_backward(
    scorer: MlpScorer,
    scores: EpisodeScores,
    labels: np.ndarray,
    n_way: int,
    m_shot: int,
) -> ScorerGrads:
    """Gradients of the mean cross-entropy w.r.t. the scorer parameters.

    Selection and the frozen embeddings receive no gradient: the filter is
    treated as a constant per forward pass.
    """
    y = np.asarray(labels, dtype=np.int64)
    n_q = scores.probabilities.shape[0]
    d_agg = scores.probabilities.copy()
    d_agg[np.arange(n_q), y] -= 1.0
    d_agg /= n_q
    d_raw = np.repeat(d_agg, m_shot, axis=1)  # d(sum over shots)/d(shot) = 1
    return scorer.backward(d_raw.reshape(n_q * n_way * m_shot))
