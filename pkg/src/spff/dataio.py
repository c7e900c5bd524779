"""Embedding dataset persistence (.spffemb), class-level split construction,
and the synthetic generator that makes desk-scale experiments possible.

File layout (all little-endian):
    header   magic "SPFFEMB1" | u32 version | u64 item_count | u32 P |
             u32 D | u64 label_table_offset | u32 flags (reserved, 0)
    payload  per item: P*D float32 patches (row-major), D float32 class token
    table    UTF-8 JSON: per-item ids/labels/foreground, split assignment,
             provenance

Embeddings are stored as 32-bit floats; round-trips are bit-exact for
float32 datasets. A JSON manifest sidecar (<file>.manifest.json) lists
class names, split assignment, and provenance for human consumption.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import EmbeddingDataset, PatchEmbeddingSet, RunConfig
from .filtering import filter_patches
from .seeding import DATA_STREAM, FILTER_STREAM, SPLIT_STREAM, stream

MAGIC = b"SPFFEMB1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQIIQI")


class FileFormatError(ValueError):
    """The file is not a well-formed embedding file (magic, version,
    declared sizes, or label table do not check out)."""


class TruncatedPayloadError(FileFormatError):
    """The file ends before its declared payload or table does."""


@dataclass(frozen=True)
class EmbeddingFileHeader:
    magic: bytes
    version: int
    item_count: int
    patch_count: int
    dim: int
    label_table_offset: int
    flags: int


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic embedding dataset. Each class gets a Gaussian
    prototype; each item plants round(foreground_fraction * P) noisy copies
    of the prototype at random patch positions and fills the rest from a
    class-independent background pool. The class token is the mean of the
    planted patches plus small noise, so foreground patches out-correlate
    background ones in expectation."""

    n_classes: int = 20
    items_per_class: int = 50
    patch_count: int = 196
    dim: int = 384
    prototype_scale: float = 1.0
    foreground_fraction: float = 0.5
    noise_sigma: float = 0.05
    background_pool_size: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_classes < 3:
            raise ValueError("need at least 3 classes (one per split)")
        if self.items_per_class < 1 or self.patch_count < 1 or self.dim < 1:
            raise ValueError("items_per_class, patch_count, and dim must be >= 1")
        if not 0.0 < self.foreground_fraction <= 1.0:
            raise ValueError("foreground_fraction must be in (0, 1]")
        if self.noise_sigma < 0 or self.prototype_scale <= 0:
            raise ValueError("noise_sigma must be >= 0 and prototype_scale > 0")
        if self.background_pool_size < 1:
            raise ValueError("background_pool_size must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def _read_exact(data: bytes, start: int, count: int, what: str) -> bytes:
    end = start + count
    if end > len(data):
        raise TruncatedPayloadError(f"unexpected end of {what}")
    return data[start:end]


def read_header(path: str | Path) -> EmbeddingFileHeader:
    """Parse and sanity-check the fixed-size header."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError("truncated header")
    magic, version, count, p, d, table_offset, flags = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FileFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FileFormatError(f"unsupported format version {version}")
    if p < 1 or d < 1:
        raise FileFormatError(f"invalid shape in header: P={p}, D={d}")
    if flags != 0:
        raise FileFormatError(f"reserved flags set: {flags:#x}")
    expected_offset = _HEADER.size + count * (p * d + d) * 4
    if table_offset != expected_offset:
        raise FileFormatError(
            f"shape mismatch: label table offset {table_offset} does not match "
            f"{count} items of P={p}, D={d} (expected {expected_offset})"
        )
    return EmbeddingFileHeader(magic, version, count, p, d, table_offset, flags)


def write_dataset(dataset: EmbeddingDataset, path: str | Path) -> None:
    """Write the dataset and its JSON manifest sidecar."""
    path = Path(path)
    p, d = dataset.patch_count, dataset.dim
    table = {
        "items": [
            {
                "image_id": item.image_id,
                "label": item.label,
                "foreground": None if item.foreground is None else [int(i) for i in item.foreground],
            }
            for item in dataset.items
        ],
        "split_assignment": dict(dataset.split_assignment),
        "provenance": dict(dataset.provenance),
    }
    table_bytes = json.dumps(table, sort_keys=True).encode("utf-8")
    offset = _HEADER.size + len(dataset.items) * (p * d + d) * 4
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(dataset.items), p, d, offset, 0))
        for item in dataset.items:
            fh.write(np.ascontiguousarray(item.patches, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(item.class_token, dtype="<f4").tobytes())
        fh.write(table_bytes)
    manifest = {
        "format": "spffemb",
        "version": FORMAT_VERSION,
        "item_count": len(dataset.items),
        "patch_count": p,
        "dim": d,
        "classes": list(dataset.classes),
        "split_assignment": dict(dataset.split_assignment),
        "provenance": dict(dataset.provenance),
    }
    manifest_path = path.with_name(path.name + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_dataset(path: str | Path) -> EmbeddingDataset:
    """Read a dataset back. Structural corruption raises FileFormatError /
    TruncatedPayloadError; content problems (NaN, odd splits) are left for
    validate_dataset to report."""
    raw = Path(path).read_bytes()
    header = read_header(path)
    p, d = header.patch_count, header.dim
    item_bytes = (p * d + d) * 4
    payload = _read_exact(raw, _HEADER.size, header.item_count * item_bytes, "payload")
    table_bytes = raw[header.label_table_offset:]
    if not table_bytes:
        raise TruncatedPayloadError("unexpected end of label table")
    try:
        table = json.loads(table_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"label table is not valid JSON: {exc}") from exc
    entries = table.get("items")
    if not isinstance(entries, list) or len(entries) != header.item_count:
        raise FileFormatError(
            f"label table lists {len(entries) if isinstance(entries, list) else '?'} items, "
            f"header declares {header.item_count}"
        )
    items = []
    for i, entry in enumerate(entries):
        base = i * item_bytes
        patches = np.frombuffer(payload, dtype="<f4", count=p * d, offset=base).reshape(p, d).copy()
        token = np.frombuffer(payload, dtype="<f4", count=d, offset=base + p * d * 4).copy()
        fg = entry.get("foreground")
        items.append(
            PatchEmbeddingSet(
                patches=patches,
                class_token=token,
                image_id=str(entry["image_id"]),
                label=str(entry["label"]),
                foreground=None if fg is None else np.asarray(fg, dtype=np.int64),
                validate=False,
            )
        )
    return EmbeddingDataset(
        items=tuple(items),
        split_assignment=table.get("split_assignment", {}),
        provenance=table.get("provenance", {}),
        validate=False,
    )


def make_splits(
    classes: Iterable[str] | EmbeddingDataset,
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> dict[str, str]:
    """Class-level train/val/test partition of a shuffled class list.

    Counts are floor(fraction * n) for train and val with the remainder
    going to test, then adjusted so every split keeps at least one class.
    """
    if isinstance(classes, EmbeddingDataset):
        class_list = sorted(classes.classes)
    else:
        class_list = sorted(set(classes))
    if len(class_list) < 3:
        raise ValueError(f"need at least 3 classes to split, got {len(class_list)}")
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"fractions must be three positive values summing to 1, got {fractions}")
    rng = stream(seed, SPLIT_STREAM)
    order = [class_list[i] for i in rng.permutation(len(class_list))]
    n = len(order)
    counts = [int(np.floor(fractions[0] * n)), int(np.floor(fractions[1] * n)), 0]
    counts[2] = n - counts[0] - counts[1]
    while min(counts) < 1:
        counts[counts.index(max(counts))] -= 1
        counts[counts.index(min(counts))] += 1
    assignment: dict[str, str] = {}
    cursor = 0
    for split, count in zip(("train", "val", "test"), counts):
        for cls in order[cursor : cursor + count]:
            assignment[cls] = split
        cursor += count
    return assignment


def generate_synthetic(
    spec: SyntheticSpec,
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
) -> EmbeddingDataset:
    """Build a synthetic dataset with known foreground ground truth.

    Foreground patch count is round(foreground_fraction * P), clamped to
    at least 1. Embeddings are stored as float32 so file round-trips are
    bit-exact. split_fractions feeds the class-level partition; N-way
    episodes need at least N classes in each split you plan to use.
    """
    rng = stream(spec.seed, DATA_STREAM)
    p, d = spec.patch_count, spec.dim
    n_fg = max(1, int(np.floor(spec.foreground_fraction * p + 0.5)))
    pool = rng.normal(0.0, spec.prototype_scale, size=(spec.background_pool_size, d))
    items: list[PatchEmbeddingSet] = []
    for ci in range(spec.n_classes):
        label = f"class{ci:03d}"
        prototype = rng.normal(0.0, spec.prototype_scale, size=d)
        for ii in range(spec.items_per_class):
            fg_idx = np.sort(rng.choice(p, size=n_fg, replace=False))
            patches = np.empty((p, d))
            bg_mask = np.ones(p, dtype=bool)
            bg_mask[fg_idx] = False
            patches[bg_mask] = pool[rng.integers(0, spec.background_pool_size, size=p - n_fg)]
            fg_patches = prototype + rng.normal(0.0, spec.noise_sigma, size=(n_fg, d))
            patches[fg_idx] = fg_patches
            token = fg_patches.mean(axis=0) + rng.normal(0.0, 0.1 * spec.noise_sigma, size=d)
            items.append(
                PatchEmbeddingSet(
                    patches=patches.astype(np.float32),
                    class_token=token.astype(np.float32),
                    image_id=f"{label}/item{ii:04d}",
                    label=label,
                    foreground=fg_idx,
                )
            )
    assignment = make_splits((item.label for item in items), split_fractions, seed=spec.seed)
    return EmbeddingDataset(
        items=tuple(items),
        split_assignment=assignment,
        provenance={
            "generator": "synthetic",
            "spec": asdict(spec),
            "split_fractions": list(split_fractions),
        },
    )


def foreground_recovery(
    dataset: EmbeddingDataset,
    k: int,
    seed: int = 0,
    max_items: int | None = None,
) -> float:
    """Mean fraction of ground-truth foreground indices recovered by one
    stochastic selection pass per item. Requires foreground metadata."""
    config = RunConfig(k_patches=k, selection_mode="stochastic")
    items: Sequence[PatchEmbeddingSet] = dataset.items
    if max_items is not None:
        items = items[:max_items]
    fractions = []
    for i, item in enumerate(items):
        if item.foreground is None or item.foreground.size == 0:
            raise ValueError(f"item {item.image_id!r} has no foreground ground truth")
        result = filter_patches(item, config, stream(seed, FILTER_STREAM, i))
        hits = np.intersect1d(result.indices, item.foreground).size
        fractions.append(hits / item.foreground.size)
    return float(np.mean(fractions))
