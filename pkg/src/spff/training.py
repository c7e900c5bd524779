"""Episodic training and evaluation: episode sampling, per-episode
forward/backward, the optimizer step, validation-gated checkpointing, and
the accuracy report with 95% confidence halfwidth.

Everything downstream of (dataset, config, seed) is deterministic: episode
composition, per-image filter draws, parameter init, and evaluation all
run on derived substreams, so any episode is reproducible in isolation.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .domain import EmbeddingDataset, Episode, EpisodeSpec, InvariantViolation, RunConfig, ScorerParams
from .filtering import filter_patches
from .scoring import (
    EpisodeScores,
    ScorerGrads,
    cross_entropy_loss,
    episode_backward,
    episode_forward,
    init_scorer,
)
from .seeding import EPISODE_STREAM, EVAL_STREAM, FILTER_STREAM, child_stream, stream, stream_key

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SPFFCKP1"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Loss or parameters became non-finite during training."""


def config_hash(config: RunConfig) -> str:
    """Stable short hash of the full run configuration."""
    blob = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class OptimizerState:
    """Moment buffers for the scorer parameters, flattened weight-then-bias
    per layer. SGD keeps the buffers empty."""

    name: str
    learning_rate: float
    step: int
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]


def init_optimizer(config: RunConfig, params: ScorerParams) -> OptimizerState:
    if config.optimizer == "sgd":
        return OptimizerState("sgd", config.learning_rate, 0, (), ())
    flats = _flat_arrays(params)
    zeros = tuple(np.zeros_like(a) for a in flats)
    return OptimizerState("adam", config.learning_rate, 0, zeros, tuple(np.zeros_like(a) for a in flats))


def _flat_arrays(obj: ScorerParams | ScorerGrads) -> tuple[np.ndarray, ...]:
    out: list[np.ndarray] = []
    for w, b in zip(obj.weights, obj.biases):
        out.extend((w, b))
    return tuple(out)


def _rebuild_params(flats: list[np.ndarray]) -> ScorerParams:
    weights = tuple(flats[0::2])
    biases = tuple(flats[1::2])
    return ScorerParams(weights=weights, biases=biases)


def apply_gradients(
    params: ScorerParams, grads: ScorerGrads, state: OptimizerState
) -> tuple[ScorerParams, OptimizerState]:
    """One optimizer step; returns fresh params and state."""
    p_flat = _flat_arrays(params)
    g_flat = _flat_arrays(grads)
    lr = state.learning_rate
    step = state.step + 1
    if state.name == "sgd":
        new = [p - lr * g for p, g in zip(p_flat, g_flat)]
        return _rebuild_params(new), replace(state, step=step)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    new_m = tuple(beta1 * m + (1 - beta1) * g for m, g in zip(state.m, g_flat))
    new_v = tuple(beta2 * v + (1 - beta2) * g * g for v, g in zip(state.v, g_flat))
    bias1 = 1 - beta1**step
    bias2 = 1 - beta2**step
    new = [
        p - lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
        for p, m, v in zip(p_flat, new_m, new_v)
    ]
    return _rebuild_params(new), OptimizerState(state.name, lr, step, new_m, new_v)


@dataclass
class TrainState:
    """Mutable training record: current parameters, optimizer buffers, and
    running metrics. ``best_params`` tracks the best validation accuracy."""

    params: ScorerParams
    optimizer: OptimizerState
    seed: int
    step: int = 0
    ema_loss: float | None = None
    best_val_accuracy: float | None = None
    best_params: ScorerParams | None = None
    history: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class EvalReport:
    """Mean episode accuracy with 1.96 * std / sqrt(n) halfwidth."""

    episodes: int
    mean_accuracy: float
    ci95_halfwidth: float
    per_episode: np.ndarray

    @classmethod
    def from_accuracies(cls, accuracies: np.ndarray) -> "EvalReport":
        acc = np.asarray(accuracies, dtype=np.float64)
        half = 1.96 * float(acc.std()) / np.sqrt(acc.size)
        return cls(acc.size, float(acc.mean()), float(half), acc)


@dataclass(frozen=True)
class EpisodeResult:
    loss: float
    accuracy: float
    scores: EpisodeScores
    grads: ScorerGrads | None


def sample_episode(
    dataset: EmbeddingDataset,
    spec: EpisodeSpec,
    split: str,
    rng: np.random.Generator | None = None,
) -> Episode:
    """Draw N distinct classes from the split, then M support and n_query
    query items per class, all without replacement."""
    if rng is None:
        rng = stream(spec.seed, EPISODE_STREAM)
    classes = dataset.split_classes(split)
    if len(classes) < spec.n_way:
        raise ValueError(
            f"split {split!r} has {len(classes)} classes, need N={spec.n_way}"
        )
    need = spec.m_shot + spec.n_query
    chosen = rng.choice(len(classes), size=spec.n_way, replace=False)
    support: list[tuple] = []
    query: list[tuple] = []
    class_slots: dict[int, str] = {}
    for slot, cls_pos in enumerate(chosen):
        cls = classes[int(cls_pos)]
        class_slots[slot] = cls
        positions = dataset.class_index[cls]
        if len(positions) < need:
            raise ValueError(
                f"class {cls!r} has {len(positions)} items, need M+n_query={need}"
            )
        picked = rng.choice(len(positions), size=need, replace=False)
        for j in picked[: spec.m_shot]:
            support.append((dataset.items[positions[int(j)]], slot))
        for j in picked[spec.m_shot :]:
            query.append((dataset.items[positions[int(j)]], slot))
    return Episode(support=tuple(support), query=tuple(query), class_slots=class_slots)


def run_episode(
    episode: Episode,
    config: RunConfig,
    params: ScorerParams,
    rng_key: np.random.SeedSequence | int,
    mode: str = "eval",
) -> EpisodeResult:
    """Filter every item (fresh draw per item), score all query-support
    pairs, aggregate, classify. In train mode the result carries exact
    scorer gradients for the caller to apply."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if isinstance(rng_key, int):
        rng_key = stream_key(rng_key, FILTER_STREAM)
    support = sorted(episode.support, key=lambda pair: pair[1])  # slot-major
    n_way, m_shot = episode.n_way, episode.m_shot
    fused = []
    for idx, (item, _) in enumerate(list(support) + list(episode.query)):
        fused.append(filter_patches(item, config, child_stream(rng_key, idx)).selected)
    n_s = len(support)
    support_fused = np.stack(fused[:n_s])
    query_fused = np.stack(fused[n_s:])
    try:
        scores, scorer = episode_forward(
            query_fused, support_fused, params, config.distance_metric, n_way, m_shot
        )
    except ArithmeticError as exc:
        raise TrainingDivergedError(str(exc)) from None
    labels = np.array([slot for _, slot in episode.query], dtype=np.int64)
    loss = cross_entropy_loss(scores.probabilities, labels)
    accuracy = float((scores.probabilities.argmax(axis=1) == labels).mean())
    grads = None
    if mode == "train":
        grads = episode_backward(scorer, scores, labels, n_way, m_shot)
    return EpisodeResult(loss=loss, accuracy=accuracy, scores=scores, grads=grads)


def _eval_one(
    dataset: EmbeddingDataset,
    config: RunConfig,
    params: ScorerParams,
    split: str,
    seed: int,
    salt: int,
    index: int,
) -> float:
    spec = config.episode_spec()
    rng = stream(seed, EVAL_STREAM, salt, index, 0)
    episode = sample_episode(dataset, spec, split, rng)
    allowed = set(dataset.split_classes(split))
    leaked = [c for c in episode.class_slots.values() if c not in allowed]
    if leaked:
        raise RuntimeError(f"split leakage: classes {leaked} not in split {split!r}")
    result = run_episode(
        episode, config, params, stream_key(seed, EVAL_STREAM, salt, index, 1)
    )
    return result.accuracy


def evaluate(
    dataset: EmbeddingDataset,
    config: RunConfig,
    params: ScorerParams,
    split: str = "test",
    episodes: int | None = None,
    seed: int | None = None,
    salt: int = 0,
    workers: int = 1,
) -> EvalReport:
    """Run the configured number of fresh episodes and report accuracy.

    Per-episode seeds are pre-derived from (seed, salt, index), so results
    are identical whatever the worker count or scheduling.
    """
    n = config.eval_episodes if episodes is None else episodes
    root = config.seed if seed is None else seed
    accuracies = np.empty(n, dtype=np.float64)
    if workers <= 1:
        for i in range(n):
            accuracies[i] = _eval_one(dataset, config, params, split, root, salt, i)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_eval_one, dataset, config, params, split, root, salt, i): i
                for i in range(n)
            }
            for fut, i in futures.items():
                accuracies[i] = fut.result()
    return EvalReport.from_accuracies(accuracies)


def train(
    dataset: EmbeddingDataset,
    config: RunConfig,
    log_every: int = 100,
    on_step: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Episodic training: one gradient step per sampled train episode,
    validation every config.val_every episodes, best-on-val retained.

    Raises TrainingDivergedError if the loss or parameters go non-finite.
    """
    spec = config.episode_spec()
    k = config.k_patches
    if k > dataset.patch_count:
        raise ValueError(f"k_patches={k} exceeds dataset patch count P={dataset.patch_count}")
    params = init_scorer(k * k, config.hidden_sizes, seed=config.seed)
    state = TrainState(params=params, optimizer=init_optimizer(config, params), seed=config.seed)
    for i in range(config.train_episodes):
        episode = sample_episode(dataset, spec, "train", stream(config.seed, EPISODE_STREAM, i))
        try:
            result = run_episode(
                episode, config, state.params, stream_key(config.seed, FILTER_STREAM, i), mode="train"
            )
            if not np.isfinite(result.loss):
                raise TrainingDivergedError("loss is non-finite")
            state.params, state.optimizer = apply_gradients(
                state.params, result.grads, state.optimizer
            )
        except (TrainingDivergedError, InvariantViolation) as exc:
            raise TrainingDivergedError(f"training diverged at episode {i}: {exc}") from None
        state.step += 1
        state.ema_loss = (
            result.loss if state.ema_loss is None else 0.99 * state.ema_loss + 0.01 * result.loss
        )
        if (i + 1) % log_every == 0 or i == 0:
            state.history.append(
                {"episode": i + 1, "loss": result.loss, "accuracy": result.accuracy,
                 "ema_loss": state.ema_loss}
            )
            logger.info(
                "episode %d: loss=%.4f ema=%.4f acc=%.3f", i + 1, result.loss, state.ema_loss,
                result.accuracy,
            )
        if (i + 1) % config.val_every == 0:
            report = evaluate(
                dataset, config, state.params, split="val",
                episodes=config.val_episodes, salt=i + 1,
            )
            state.history.append({"episode": i + 1, "val_accuracy": report.mean_accuracy})
            logger.info("episode %d: val accuracy %.4f", i + 1, report.mean_accuracy)
            if state.best_val_accuracy is None or report.mean_accuracy > state.best_val_accuracy:
                state.best_val_accuracy = report.mean_accuracy
                state.best_params = state.params
        if on_step is not None:
            on_step(state)
    if state.best_params is None:
        state.best_params = state.params
    return state


def save_checkpoint(path: str | Path, state: TrainState, config: RunConfig) -> None:
    """Binary checkpoint (versioned header + float64 arrays) plus a JSON
    sidecar with the config, its hash, and the metrics history."""
    path = Path(path)
    params = state.best_params if state.best_params is not None else state.params
    arrays = list(_flat_arrays(params)) + list(state.optimizer.m) + list(state.optimizer.v)
    meta = {
        "layer_sizes": list(params.layer_sizes),
        "step": state.step,
        "seed": state.seed,
        "ema_loss": state.ema_loss,
        "best_val_accuracy": state.best_val_accuracy,
        "optimizer": {
            "name": state.optimizer.name,
            "learning_rate": state.optimizer.learning_rate,
            "step": state.optimizer.step,
            "moment_count": len(state.optimizer.m),
        },
        "array_shapes": [list(a.shape) for a in arrays],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    sidecar = {
        "config": asdict(config),
        "config_hash": config_hash(config),
        "seed": config.seed,
        "history": state.history,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[TrainState, dict]:
    """Inverse of save_checkpoint; returns the state and the sidecar dict
    (empty if the sidecar is missing)."""
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    version, blob_len = struct.unpack_from("<IQ", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta = json.loads(raw[20 : 20 + blob_len].decode("utf-8"))
    offset = 20 + blob_len
    arrays = []
    for shape in meta["array_shapes"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        arrays.append(arr)
        offset += count * 8
    n_param = 2 * (len(meta["layer_sizes"]) - 1)
    params = _rebuild_params(arrays[:n_param])
    n_moment = meta["optimizer"]["moment_count"]
    optimizer = OptimizerState(
        name=meta["optimizer"]["name"],
        learning_rate=meta["optimizer"]["learning_rate"],
        step=meta["optimizer"]["step"],
        m=tuple(arrays[n_param : n_param + n_moment]),
        v=tuple(arrays[n_param + n_moment : n_param + 2 * n_moment]),
    )
    state = TrainState(
        params=params,
        optimizer=optimizer,
        seed=meta["seed"],
        step=meta["step"],
        ema_loss=meta["ema_loss"],
        best_val_accuracy=meta["best_val_accuracy"],
        best_params=params,
    )
    sidecar_path = Path(str(path) + ".json")
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    return state, sidecar
