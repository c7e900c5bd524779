import numpy as np
import pytest
from PIL import Image

from spff_exporter import ExportJob, export


def _class_image(ci: int, rng: np.random.Generator) -> Image.Image:
    """Class-colored striped texture with per-image phase and noise."""
    xx = np.arange(224)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (ci + 2) * xx / 224 + rng.uniform(0, 2 * np.pi))
    color = np.array([(ci * 53 % 97) / 97, (ci * 29 % 89) / 89, (ci * 17 % 83) / 83])
    img = color[None, None, :] * stripes[None, :, None]
    img = img + rng.normal(0, 0.08, (224, 224, 3))
    return Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8))


def build_image_tree(root, n_classes: int, per_class: int, seed: int = 0) -> None:
    rng = np.random.default_rng(seed)
    for ci in range(n_classes):
        cls_dir = root / f"dish{ci:02d}"
        cls_dir.mkdir(parents=True)
        for ii in range(per_class):
            _class_image(ci, rng).save(cls_dir / f"img{ii:03d}.png")


@pytest.fixture(scope="session")
def image_tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("images")
    build_image_tree(root, n_classes=5, per_class=21, seed=0)
    return root


@pytest.fixture(scope="session")
def small_tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_images")
    build_image_tree(root, n_classes=3, per_class=2, seed=1)
    return root


@pytest.fixture(scope="session")
def exported(image_tree, tmp_path_factory):
    out = tmp_path_factory.mktemp("exported") / "food.spffemb"
    export(ExportJob(root=str(image_tree), out=str(out), seed=0))
    return out
