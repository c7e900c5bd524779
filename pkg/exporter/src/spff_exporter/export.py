"""Image-folder to embedding-file export.

Expects a class-per-subfolder layout; labels come from folder names.
Preprocessing is eval-style and deterministic: RGB, resize the shorter
side to 256/224 of the target, center-crop, normalize with the standard
ImageNet statistics. Repeated exports of the same tree are bit-stable.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .backbone import BACKBONES, build_backbone
from .fileio import ExportedItem, write_embedding_file

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
EXPORTER_VERSION = "0.1.0"


@dataclass(frozen=True)
class ExportJob:
    """One export run: image root, backbone choice, preprocessing, output."""

    root: str
    out: str
    backbone: str = "vit_s16"
    weights: str | None = None
    image_size: int = 224
    batch_size: int = 16
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}, expected one of {sorted(BACKBONES)}")
        patch = BACKBONES[self.backbone].patch
        if self.image_size % patch:
            raise ValueError(f"image_size {self.image_size} not divisible by patch size {patch}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if len(self.split_fractions) != 3 or any(f <= 0 for f in self.split_fractions) or \
                abs(sum(self.split_fractions) - 1.0) > 1e-6:
            raise ValueError(f"split_fractions must be three positive values summing to 1: {self.split_fractions}")

    @property
    def patch_count(self) -> int:
        return (self.image_size // BACKBONES[self.backbone].patch) ** 2

    @property
    def dim(self) -> int:
        return BACKBONES[self.backbone].dim


def preprocess(image: Image.Image, image_size: int) -> np.ndarray:
    """Eval-style: resize shorter side, center crop, normalize. Returns
    float32 CHW."""
    image = image.convert("RGB")
    short = min(image.size)
    scale = int(round(image_size * 256 / 224))
    new_w = int(round(image.width * scale / short))
    new_h = int(round(image.height * scale / short))
    image = image.resize((new_w, new_h), Image.BILINEAR)
    left = (new_w - image_size) // 2
    top = (new_h - image_size) // 2
    image = image.crop((left, top, left + image_size, top + image_size))
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
    return arr.transpose(2, 0, 1)


def scan_image_tree(root: str | Path) -> dict[str, list[Path]]:
    """class name -> sorted image paths; empty class folders are an error."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"image root not found: {root}")
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"no class subfolders under {root}")
    tree: dict[str, list[Path]] = {}
    for cls_dir in classes:
        files = sorted(
            p for p in cls_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            raise ValueError(f"class folder has no images: {cls_dir}")
        tree[cls_dir.name] = files
    return tree


def assign_splits(classes: list[str], fractions: tuple[float, float, float], seed: int) -> dict[str, str]:
    """Class-level partition; with fewer than 3 classes everything lands
    in train (nothing sensible to hold out)."""
    ordered = sorted(classes)
    if len(ordered) < 3:
        return {c: "train" for c in ordered}
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4,)))
    shuffled = [ordered[i] for i in rng.permutation(len(ordered))]
    n = len(shuffled)
    counts = [int(np.floor(fractions[0] * n)), int(np.floor(fractions[1] * n)), 0]
    counts[2] = n - counts[0] - counts[1]
    while min(counts) < 1:
        counts[counts.index(max(counts))] -= 1
        counts[counts.index(min(counts))] += 1
    out: dict[str, str] = {}
    cursor = 0
    for split, count in zip(("train", "val", "test"), counts):
        for cls in shuffled[cursor : cursor + count]:
            out[cls] = split
        cursor += count
    return out


def export(job: ExportJob) -> Path:
    """Run the frozen backbone over every readable image and write the
    embedding file plus manifest. Unreadable images are skipped with a
    warning and recorded in the manifest."""
    tree = scan_image_tree(job.root)
    model = build_backbone(job.backbone, weights=job.weights, image_size=job.image_size, seed=job.seed)
    items: list[ExportedItem] = []
    skipped: list[str] = []
    batch_imgs: list[np.ndarray] = []
    batch_meta: list[tuple[str, str]] = []

    def flush() -> None:
        if not batch_imgs:
            return
        x = torch.from_numpy(np.stack(batch_imgs))
        with torch.no_grad():
            patches, tokens = model(x)
        patches_np = patches.numpy().astype(np.float32)
        tokens_np = tokens.numpy().astype(np.float32)
        for i, (image_id, label) in enumerate(batch_meta):
            items.append(
                ExportedItem(
                    image_id=image_id, label=label,
                    patches=patches_np[i], class_token=tokens_np[i],
                )
            )
        batch_imgs.clear()
        batch_meta.clear()

    for label, files in tree.items():
        kept = 0
        for path in files:
            try:
                with Image.open(path) as img:
                    arr = preprocess(img, job.image_size)
            except (OSError, UnidentifiedImageError, ValueError) as exc:
                logger.warning("skipping unreadable image %s: %s", path, exc)
                skipped.append(str(path))
                continue
            batch_imgs.append(arr)
            batch_meta.append((f"{label}/{path.name}", label))
            kept += 1
            if len(batch_imgs) >= job.batch_size:
                flush()
        if kept == 0:
            raise ValueError(f"class folder has no readable images: {label}")
    flush()

    splits = assign_splits(list(tree), job.split_fractions, job.seed)
    provenance = {
        "exporter": "spff-exporter",
        "exporter_version": EXPORTER_VERSION,
        "backbone": job.backbone,
        "weights": job.weights if job.weights else f"seeded-init:{job.seed}",
        "preprocessing": f"rgb/resize-short-{int(round(job.image_size * 256 / 224))}/center-crop-{job.image_size}/imagenet-norm",
        "job": {**asdict(job), "split_fractions": list(job.split_fractions)},
        "skipped": skipped,
    }
    out = Path(job.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_embedding_file(out, items, splits, provenance)
    logger.info(
        "exported %d items (%d classes, P=%d, D=%d) to %s, %d skipped",
        len(items), len(tree), job.patch_count, job.dim, out, len(skipped),
    )
    return out
