"""Standalone .spffemb writer and verifier.

This module deliberately re-implements the file format rather than
importing the consuming engine, so `verify` is an independent check and
the exporter stays decoupled from the engine package.

Layout (little-endian): 40-byte header (magic "SPFFEMB1", u32 version,
u64 item count, u32 P, u32 D, u64 label-table offset, u32 reserved
flags), float32 payload (per item: P*D patch matrix then D class token),
then a UTF-8 JSON label table.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SPFFEMB1"
VERSION = 1
HEADER = struct.Struct("<8sIQIIQI")


@dataclass
class ExportedItem:
    image_id: str
    label: str
    patches: np.ndarray  # [P, D] float32
    class_token: np.ndarray  # [D] float32


def write_embedding_file(
    path: str | Path,
    items: list[ExportedItem],
    split_assignment: dict[str, str],
    provenance: dict,
) -> None:
    if not items:
        raise ValueError("refusing to write an empty embedding file")
    p, d = items[0].patches.shape
    for item in items:
        if item.patches.shape != (p, d) or item.class_token.shape != (d,):
            raise ValueError(f"inconsistent shapes at {item.image_id!r}")
    table = {
        "items": [
            {"image_id": it.image_id, "label": it.label, "foreground": None} for it in items
        ],
        "split_assignment": split_assignment,
        "provenance": provenance,
    }
    blob = json.dumps(table, sort_keys=True).encode("utf-8")
    offset = HEADER.size + len(items) * (p * d + d) * 4
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, len(items), p, d, offset, 0))
        for it in items:
            fh.write(np.ascontiguousarray(it.patches, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(it.class_token, dtype="<f4").tobytes())
        fh.write(blob)
    manifest = {
        "format": "spffemb",
        "version": VERSION,
        "item_count": len(items),
        "patch_count": p,
        "dim": d,
        "classes": sorted({it.label for it in items}),
        "split_assignment": split_assignment,
        "provenance": provenance,
    }
    manifest_path = path.with_name(path.name + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


@dataclass
class VerifyReport:
    path: str
    ok: bool
    errors: list[str] = field(default_factory=list)
    item_count: int = 0
    patch_count: int = 0
    dim: int = 0
    classes: int = 0
    token_norm_mean: float = float("nan")
    patch_norm_mean: float = float("nan")

    def summary(self) -> str:
        if not self.ok:
            return f"{self.path}: FAILED\n  " + "\n  ".join(self.errors)
        return (
            f"{self.path}: OK\n"
            f"  items={self.item_count} P={self.patch_count} D={self.dim} classes={self.classes}\n"
            f"  mean |class token|={self.token_norm_mean:.4f} mean |patch|={self.patch_norm_mean:.4f}"
        )


def verify(path: str | Path) -> VerifyReport:
    """Independent structural + content check of an embedding file."""
    report = VerifyReport(path=str(path), ok=False)
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        report.errors.append(f"unreadable: {exc}")
        return report
    if len(raw) < HEADER.size:
        report.errors.append("truncated header")
        return report
    magic, version, count, p, d, offset, flags = HEADER.unpack_from(raw)
    if magic != MAGIC:
        report.errors.append(f"magic mismatch: {magic!r} != {MAGIC!r}")
        return report
    if version != VERSION:
        report.errors.append(f"unsupported version {version}")
        return report
    item_bytes = (p * d + d) * 4
    expected_offset = HEADER.size + count * item_bytes
    if p < 1 or d < 1:
        report.errors.append(f"bad shape P={p} D={d}")
    if flags != 0:
        report.errors.append(f"reserved flags set: {flags:#x}")
    if offset != expected_offset:
        report.errors.append(f"label table offset {offset} != expected {expected_offset}")
    if len(raw) < expected_offset:
        report.errors.append("payload shorter than declared")
    if report.errors:
        return report
    try:
        table = json.loads(raw[offset:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        report.errors.append(f"label table unreadable: {exc}")
        return report
    entries = table.get("items", [])
    if len(entries) != count:
        report.errors.append(f"label table has {len(entries)} items, header says {count}")
        return report
    payload = np.frombuffer(raw, dtype="<f4", count=count * (p * d + d), offset=HEADER.size)
    if not np.isfinite(payload).all():
        report.errors.append("non-finite values in payload")
        return report
    per_item = payload.reshape(count, p * d + d)
    tokens = per_item[:, p * d :]
    patches = per_item[:, : p * d].reshape(count, p, d)
    labels = {e.get("label") for e in entries}
    missing = labels - set(table.get("split_assignment", {}))
    if missing:
        report.errors.append(f"labels missing from split assignment: {sorted(missing)[:5]}")
        return report
    report.ok = True
    report.item_count = count
    report.patch_count = p
    report.dim = d
    report.classes = len(labels)
    report.token_norm_mean = float(np.linalg.norm(tokens, axis=1).mean())
    report.patch_norm_mean = float(np.linalg.norm(patches, axis=2).mean())
    return report
