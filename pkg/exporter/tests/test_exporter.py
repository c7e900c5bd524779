import json
import shutil

import numpy as np
import pytest
import torch

from spff_exporter import (
    ExportJob,
    build_backbone,
    export,
    preprocess,
    scan_image_tree,
    verify,
)
from spff_exporter.cli import main
from spff_exporter.export import assign_splits

from conftest import build_image_tree


def test_verify_reports_ok_and_counts(exported):
    report = verify(exported)
    assert report.ok, report.errors
    assert report.item_count == 105  # 5 classes x 21 images
    assert (report.patch_count, report.dim, report.classes) == (196, 384, 5)


def test_verify_catches_magic_corruption(exported, tmp_path):
    bad = tmp_path / "bad.spffemb"
    blob = bytearray(exported.read_bytes())
    blob[0] ^= 0xFF
    bad.write_bytes(blob)
    report = verify(bad)
    assert not report.ok
    assert any("magic mismatch" in e for e in report.errors)


def test_verify_catches_truncation(exported, tmp_path):
    cut = tmp_path / "cut.spffemb"
    cut.write_bytes(exported.read_bytes()[:200])
    report = verify(cut)
    assert not report.ok


def test_manifest_records_backbone_and_preprocessing(exported):
    manifest = json.loads(
        exported.with_name(exported.name + ".manifest.json").read_text()
    )
    prov = manifest["provenance"]
    assert prov["backbone"] == "vit_s16"
    assert prov["weights"].startswith("seeded-init:")
    assert "center-crop-224" in prov["preprocessing"]
    assert manifest["item_count"] == 105


def test_empty_class_folder_is_an_error(tmp_path):
    build_image_tree(tmp_path, n_classes=2, per_class=1, seed=2)
    (tmp_path / "empty_dish").mkdir()
    with pytest.raises(ValueError, match="no images"):
        scan_image_tree(tmp_path)


def test_unreadable_image_is_skipped_with_manifest_note(small_tree, tmp_path):
    root = tmp_path / "tree"
    shutil.copytree(small_tree, root)
    junk = root / "dish00" / "broken.png"
    junk.write_bytes(b"this is not a png")
    out = tmp_path / "out.spffemb"
    export(ExportJob(root=str(root), out=str(out), seed=0))
    report = verify(out)
    assert report.ok
    assert report.item_count == 6  # the broken file did not produce an item
    manifest = json.loads(out.with_name(out.name + ".manifest.json").read_text())
    assert any("broken.png" in s for s in manifest["provenance"]["skipped"])


def test_class_with_only_unreadable_images_is_an_error(small_tree, tmp_path):
    root = tmp_path / "tree"
    shutil.copytree(small_tree, root)
    for f in (root / "dish01").iterdir():
        f.write_bytes(b"junk")
    with pytest.raises(ValueError, match="no readable images"):
        export(ExportJob(root=str(root), out=str(tmp_path / "o.spffemb"), seed=0))


def test_weights_file_round_trip(tmp_path):
    reference = build_backbone("vit_s16", seed=9)
    weights_path = tmp_path / "vit_s16.pth"
    torch.save(reference.state_dict(), weights_path)
    loaded = build_backbone("vit_s16", weights=str(weights_path))
    x = torch.randn(1, 3, 224, 224, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        p_ref, t_ref = reference(x)
        p_new, t_new = loaded(x)
    assert torch.equal(p_ref, p_new) and torch.equal(t_ref, t_new)


def test_weights_file_with_missing_keys_rejected(tmp_path):
    state = build_backbone("vit_s16", seed=9).state_dict()
    state.pop("blocks.0.attn.qkv.weight")
    path = tmp_path / "partial.pth"
    torch.save(state, path)
    with pytest.raises(ValueError, match="missing parameters"):
        build_backbone("vit_s16", weights=str(path))


def test_export_job_validation():
    with pytest.raises(ValueError, match="unknown backbone"):
        ExportJob(root="x", out="y", backbone="resnet50")
    with pytest.raises(ValueError, match="not divisible"):
        ExportJob(root="x", out="y", image_size=225)
    with pytest.raises(ValueError, match="split_fractions"):
        ExportJob(root="x", out="y", split_fractions=(0.5, 0.5, 0.5))
    job = ExportJob(root="x", out="y")
    assert (job.patch_count, job.dim) == (196, 384)


def test_preprocess_handles_nonsquare_images():
    from PIL import Image

    img = Image.new("RGB", (300, 180), (120, 60, 30))
    arr = preprocess(img, 224)
    assert arr.shape == (3, 224, 224)
    assert arr.dtype == np.float32


def test_assign_splits_partitions_classes():
    classes = [f"c{i}" for i in range(10)]
    splits = assign_splits(classes, (0.7, 0.1, 0.2), seed=0)
    counts = {s: sum(1 for v in splits.values() if v == s) for s in ("train", "val", "test")}
    assert counts == {"train": 7, "val": 1, "test": 2}
    assert assign_splits(["a", "b"], (0.7, 0.1, 0.2), seed=0) == {"a": "train", "b": "train"}


def test_cli_export_and_verify(small_tree, tmp_path, capsys):
    out = tmp_path / "cli.spffemb"
    rc = main(["export", "--root", str(small_tree), "--out", str(out), "--seed", "1"])
    assert rc == 0
    rc = main(["verify", str(out)])
    assert rc == 0
    assert "OK" in capsys.readouterr().out


def test_cli_verify_missing_file(tmp_path, capsys):
    rc = main(["verify", str(tmp_path / "absent.spffemb")])
    assert rc == 1


def test_cli_export_missing_root(tmp_path, capsys):
    rc = main(["export", "--root", str(tmp_path / "nope"), "--out", str(tmp_path / "o.spffemb")])
    assert rc == 1
    assert "not found" in capsys.readouterr().err
