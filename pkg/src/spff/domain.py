"""Core domain types: patch-embedding items, datasets, episodes, and run
configuration. Types validate their invariants at construction and are
immutable afterwards; anything invalid is rejected, never repaired.
"""
from __future__ import annotations

from dataclasses import InitVar, dataclass, field
from typing import Mapping

import numpy as np

SPLITS = ("train", "val", "test")
SELECTION_MODES = ("stochastic", "deterministic", "random", "mixed")
DISTANCE_METRICS = ("cosine", "manhattan", "euclidean")


class InvariantViolation(ValueError):
    """A domain type was constructed with an invalid field combination."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PatchEmbeddingSet:
    """Per-image patch embedding matrix [P x D] plus its class token [D].

    ``foreground`` is optional generator ground truth: indices of the
    patches that carry class signal (synthetic data only).
    """

    patches: np.ndarray
    class_token: np.ndarray
    image_id: str
    label: str
    foreground: np.ndarray | None = None
    validate: InitVar[bool] = True

    def __post_init__(self, validate: bool) -> None:
        object.__setattr__(self, "patches", _freeze(self.patches))
        object.__setattr__(self, "class_token", _freeze(self.class_token))
        if self.foreground is not None:
            object.__setattr__(
                self, "foreground", _freeze(np.asarray(self.foreground, dtype=np.int64))
            )
        if not validate:
            return
        if self.patches.ndim != 2 or self.patches.shape[0] < 1 or self.patches.shape[1] < 1:
            raise InvariantViolation(
                f"patches must be a [P x D] matrix with P,D >= 1, got shape {self.patches.shape}"
            )
        if self.class_token.shape != (self.patches.shape[1],):
            raise InvariantViolation(
                f"class_token shape {self.class_token.shape} does not match D={self.patches.shape[1]}"
            )
        if not np.isfinite(self.patches).all() or not np.isfinite(self.class_token).all():
            raise InvariantViolation(f"non-finite entry in embeddings of item {self.image_id!r}")
        if self.foreground is not None:
            if self.foreground.ndim != 1 or len(np.unique(self.foreground)) != self.foreground.size:
                raise InvariantViolation("foreground indices must be a 1-d vector of distinct ints")
            if self.foreground.size and (
                self.foreground.min() < 0 or self.foreground.max() >= self.patch_count
            ):
                raise InvariantViolation("foreground index out of range")

    @property
    def patch_count(self) -> int:
        return self.patches.shape[0]

    @property
    def dim(self) -> int:
        return self.patches.shape[1]


@dataclass(frozen=True)
class EmbeddingDataset:
    """Labeled PatchEmbeddingSets with a class-level train/val/test partition.

    ``split_assignment`` maps class id -> split name; a class therefore
    belongs to exactly one split (class-disjoint by construction).
    ``class_index`` (class id -> item positions) is derived, not supplied.
    """

    items: tuple[PatchEmbeddingSet, ...]
    split_assignment: Mapping[str, str]
    provenance: Mapping[str, object] = field(default_factory=dict)
    class_index: Mapping[str, tuple[int, ...]] = field(init=False)
    validate: InitVar[bool] = True

    def __post_init__(self, validate: bool) -> None:
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(self, "split_assignment", dict(self.split_assignment))
        object.__setattr__(self, "provenance", dict(self.provenance))
        index: dict[str, list[int]] = {}
        for pos, item in enumerate(self.items):
            index.setdefault(item.label, []).append(pos)
        object.__setattr__(
            self, "class_index", {c: tuple(ix) for c, ix in sorted(index.items())}
        )
        if not validate:
            return
        if not self.items:
            raise InvariantViolation("dataset has no items")
        p, d = self.items[0].patches.shape
        for pos, item in enumerate(self.items):
            if item.patches.shape != (p, d):
                raise InvariantViolation(
                    f"item {pos} ({item.image_id!r}) has shape {item.patches.shape}, expected ({p}, {d})"
                )
        for cls in self.class_index:
            if cls not in self.split_assignment:
                raise InvariantViolation(f"class {cls!r} missing from split_assignment")
        for cls, split in self.split_assignment.items():
            if split not in SPLITS:
                raise InvariantViolation(f"unknown split {split!r} for class {cls!r}")

    @property
    def patch_count(self) -> int:
        return self.items[0].patch_count

    @property
    def dim(self) -> int:
        return self.items[0].dim

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(self.class_index)

    def split_classes(self, split: str) -> tuple[str, ...]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return tuple(c for c in self.classes if self.split_assignment.get(c) == split)


@dataclass(frozen=True)
class EpisodeSpec:
    """Shape of one N-way M-shot task."""

    n_way: int = 5
    m_shot: int = 5
    n_query: int = 15
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_way < 2:
            raise InvariantViolation(f"n_way must be >= 2, got {self.n_way}")
        if self.m_shot < 1 or self.n_query < 1:
            raise InvariantViolation("m_shot and n_query must be >= 1")
        if self.seed < 0:
            raise InvariantViolation("seed must be non-negative")


@dataclass(frozen=True)
class Episode:
    """One sampled task: slot-major support and query lists.

    Support holds exactly M items per class slot, queries n_query per slot;
    slots 0..N-1 are episode-local, ``class_slots`` maps them back to the
    original class ids for reporting.
    """

    support: tuple[tuple[PatchEmbeddingSet, int], ...]
    query: tuple[tuple[PatchEmbeddingSet, int], ...]
    class_slots: Mapping[int, str]
    validate: InitVar[bool] = True

    def __post_init__(self, validate: bool) -> None:
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "query", tuple(self.query))
        object.__setattr__(self, "class_slots", dict(self.class_slots))
        if not validate:
            return
        n = len(self.class_slots)
        if n < 2 or sorted(self.class_slots) != list(range(n)):
            raise InvariantViolation("class_slots must cover 0..N-1 for N >= 2")
        support_counts = [0] * n
        query_counts = [0] * n
        for _, slot in self.support:
            support_counts[slot] += 1
        for _, slot in self.query:
            query_counts[slot] += 1
        if len(set(support_counts)) != 1 or support_counts[0] < 1:
            raise InvariantViolation(f"unbalanced support slots: {support_counts}")
        if len(set(query_counts)) != 1 or query_counts[0] < 1:
            raise InvariantViolation(f"unbalanced query slots: {query_counts}")
        support_ids = {item.image_id for item, _ in self.support}
        query_ids = {item.image_id for item, _ in self.query}
        overlap = support_ids & query_ids
        if overlap:
            raise InvariantViolation(f"items in both support and query: {sorted(overlap)[:3]}")

    @property
    def n_way(self) -> int:
        return len(self.class_slots)

    @property
    def m_shot(self) -> int:
        return len(self.support) // self.n_way

    @property
    def n_query(self) -> int:
        return len(self.query) // self.n_way


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of filtering one image: chosen patch indices (sorted
    ascending), the full selection distribution, and the fused embeddings.
    ``stochastic_fraction`` is set for mixed-mode selections only.
    """

    indices: np.ndarray
    probabilities: np.ndarray
    selected: np.ndarray
    mode: str
    stochastic_fraction: float | None = None
    validate: InitVar[bool] = True

    def __post_init__(self, validate: bool) -> None:
        object.__setattr__(self, "indices", _freeze(np.asarray(self.indices, dtype=np.int64)))
        object.__setattr__(self, "probabilities", _freeze(np.asarray(self.probabilities, dtype=np.float64)))
        object.__setattr__(self, "selected", _freeze(self.selected))
        if not validate:
            return
        p = self.probabilities.size
        k = self.indices.size
        if len(np.unique(self.indices)) != k:
            raise InvariantViolation("selected indices are not pairwise distinct")
        if k and (self.indices.min() < 0 or self.indices.max() >= p):
            raise InvariantViolation("selected index out of range")
        if (self.probabilities < 0).any() or abs(float(self.probabilities.sum()) - 1.0) > 1e-6:
            raise InvariantViolation("probabilities must be non-negative and sum to 1 +- 1e-6")
        if self.selected.shape[0] != k:
            raise InvariantViolation("selected matrix row count does not match indices")
        if self.mode not in SELECTION_MODES:
            raise InvariantViolation(f"unknown selection mode {self.mode!r}")
        if self.stochastic_fraction is not None and not 0.0 <= self.stochastic_fraction <= 1.0:
            raise InvariantViolation("stochastic_fraction must be in [0, 1]")


@dataclass(frozen=True)
class ScorerParams:
    """MLP head weights/biases; the only trainable state in the engine.

    Layer i maps width w_i -> w_{i+1} via ``x @ weights[i] + biases[i]``;
    the input width is k*k (flattened score matrix) and the output is a
    single scalar score.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    validate: InitVar[bool] = True

    def __post_init__(self, validate: bool) -> None:
        object.__setattr__(self, "weights", tuple(_freeze(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_freeze(b) for b in self.biases))
        if not validate:
            return
        if not self.weights or len(self.weights) != len(self.biases):
            raise InvariantViolation("need one bias vector per weight matrix")
        width = self.weights[0].shape[0]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or w.shape[0] != width:
                raise InvariantViolation(f"layer width mismatch: expected input {width}, got {w.shape}")
            if b.shape != (w.shape[1],):
                raise InvariantViolation(f"bias shape {b.shape} does not match layer output {w.shape[1]}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise InvariantViolation("non-finite scorer parameter")
            width = w.shape[1]
        if width != 1:
            raise InvariantViolation(f"final layer must output one scalar, got width {width}")

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_width,) + tuple(w.shape[1] for w in self.weights)


@dataclass(frozen=True)
class RunConfig:
    """Declarative run configuration; defaults reproduce the reference
    5-way 5-shot setup (K=98 of 196 patches, lambda=2, cosine metric,
    1000 eval episodes with 15 queries per class).
    """

    k_patches: int = 98
    lambda_class: float = 2.0
    selection_mode: str = "stochastic"
    stochastic_fraction: float = 1.0
    distance_metric: str = "cosine"
    hidden_sizes: tuple[int, ...] = (256,)
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    train_episodes: int = 10_000
    eval_episodes: int = 1_000
    val_every: int = 200
    val_episodes: int = 100
    n_way: int = 5
    m_shot: int = 5
    n_query: int = 15
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.k_patches < 1:
            raise InvariantViolation(f"k_patches must be >= 1, got {self.k_patches}")
        if not 0.0 <= self.stochastic_fraction <= 1.0:
            raise InvariantViolation(f"stochastic_fraction must be in [0, 1], got {self.stochastic_fraction}")
        if self.selection_mode not in SELECTION_MODES:
            raise InvariantViolation(f"unknown selection_mode {self.selection_mode!r}")
        if self.distance_metric not in DISTANCE_METRICS:
            raise InvariantViolation(f"unknown distance_metric {self.distance_metric!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise InvariantViolation(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise InvariantViolation("learning_rate must be >= 0")
        if any(h < 1 for h in self.hidden_sizes):
            raise InvariantViolation("hidden layer sizes must be >= 1")
        if min(self.train_episodes, self.eval_episodes, self.val_every, self.val_episodes) < 1:
            raise InvariantViolation("episode counts must be >= 1")
        if self.n_way < 2 or self.m_shot < 1 or self.n_query < 1:
            raise InvariantViolation("need n_way >= 2, m_shot >= 1, n_query >= 1")
        if self.seed < 0:
            raise InvariantViolation("seed must be non-negative")

    def episode_spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.n_way, self.m_shot, self.n_query, self.seed)


def validate_dataset(dataset: EmbeddingDataset) -> list[str]:
    """Report-only dataset check; returns [] iff the dataset is usable.

    Accepts datasets built with validate=False (e.g. straight from disk),
    so it re-checks shape uniformity, finiteness, split sanity, and
    class coverage, naming the offending item or class in each violation.
    """
    violations: list[str] = []
    if not dataset.items:
        return ["dataset has no items"]
    p, d = dataset.items[0].patches.shape if dataset.items[0].patches.ndim == 2 else (0, 0)
    for pos, item in enumerate(dataset.items):
        if item.patches.ndim != 2 or item.patches.shape != (p, d):
            violations.append(
                f"shape mismatch: item {pos} ({item.image_id!r}) has {item.patches.shape}, expected ({p}, {d})"
            )
        elif item.class_token.shape != (d,):
            violations.append(f"shape mismatch: item {pos} class token {item.class_token.shape}")
        if not np.isfinite(item.patches).all() or not np.isfinite(item.class_token).all():
            violations.append(f"non-finite entry: item {pos} ({item.image_id!r})")
    for cls, split in dataset.split_assignment.items():
        if isinstance(split, str):
            if split not in SPLITS:
                violations.append(f"unknown split {split!r}: {cls}")
        else:
            # A malformed mapping (e.g. hand-edited file) may list several
            # splits for one class; that is exactly the disjointness break.
            named = [s for s in SPLITS if s in split]
            if len(named) > 1:
                violations.append(f"split overlap: {cls}")
            else:
                violations.append(f"malformed split entry: {cls}")
    for cls, positions in dataset.class_index.items():
        if not positions:
            violations.append(f"class without items: {cls}")
        if cls not in dataset.split_assignment:
            violations.append(f"class missing from split_assignment: {cls}")
    return violations
