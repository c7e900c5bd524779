import json

import numpy as np
import pytest

from spff.dataio import (
    FileFormatError,
    SyntheticSpec,
    TruncatedPayloadError,
    foreground_recovery,
    generate_synthetic,
    make_splits,
    read_dataset,
    read_header,
    write_dataset,
)
from spff.domain import RunConfig, validate_dataset
from spff.filtering import class_similarity, filter_patches, similarity_to_probabilities
from spff.seeding import stream


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic(
        SyntheticSpec(
            n_classes=6, items_per_class=4, patch_count=16, dim=8,
            foreground_fraction=0.25, noise_sigma=0.05, seed=11,
        )
    )


def _datasets_equal(a, b):
    if dict(a.split_assignment) != dict(b.split_assignment):
        return False
    if dict(a.provenance) != dict(b.provenance):
        return False
    if len(a.items) != len(b.items):
        return False
    for x, y in zip(a.items, b.items):
        if x.image_id != y.image_id or x.label != y.label:
            return False
        if not np.array_equal(x.patches, y.patches) or not np.array_equal(x.class_token, y.class_token):
            return False
        if (x.foreground is None) != (y.foreground is None):
            return False
        if x.foreground is not None and not np.array_equal(x.foreground, y.foreground):
            return False
    return True


def test_round_trip_is_bit_exact(dataset, tmp_path):
    path = tmp_path / "d.spffemb"
    write_dataset(dataset, path)
    again = read_dataset(path)
    assert _datasets_equal(dataset, again)
    assert validate_dataset(again) == []


def test_round_trip_twice_is_stable(dataset, tmp_path):
    p1, p2 = tmp_path / "a.spffemb", tmp_path / "b.spffemb"
    write_dataset(dataset, p1)
    write_dataset(read_dataset(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_header_reports_shapes(dataset, tmp_path):
    path = tmp_path / "d.spffemb"
    write_dataset(dataset, path)
    header = read_header(path)
    assert (header.item_count, header.patch_count, header.dim) == (24, 16, 8)
    assert header.version == 1


def test_manifest_sidecar_written(dataset, tmp_path):
    path = tmp_path / "d.spffemb"
    write_dataset(dataset, path)
    manifest = json.loads((tmp_path / "d.spffemb.manifest.json").read_text())
    assert manifest["classes"] == list(dataset.classes)
    assert manifest["split_assignment"] == dict(dataset.split_assignment)
    assert manifest["provenance"]["generator"] == "synthetic"


def test_bad_magic_rejected(dataset, tmp_path):
    path = tmp_path / "d.spffemb"
    write_dataset(dataset, path)
    blob = bytearray(path.read_bytes())
    blob[0] = ord("X")
    path.write_bytes(blob)
    with pytest.raises(FileFormatError, match="bad magic"):
        read_dataset(path)


def test_truncated_header_rejected(tmp_path):
    path = tmp_path / "d.spffemb"
    path.write_bytes(b"SPFFEM")
    with pytest.raises(TruncatedPayloadError, match="truncated header"):
        read_dataset(path)


def test_truncated_payload_rejected(dataset, tmp_path):
    path = tmp_path / "d.spffemb"
    write_dataset(dataset, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: 40 + 100])  # mid-payload cut
    with pytest.raises(TruncatedPayloadError, match="unexpected end of payload"):
        read_dataset(path)


def test_truncated_label_table_rejected(dataset, tmp_path):
    path = tmp_path / "d.spffemb"
    write_dataset(dataset, path)
    header = read_header(path)
    path.write_bytes(path.read_bytes()[: header.label_table_offset])
    with pytest.raises(TruncatedPayloadError, match="label table"):
        read_dataset(path)


def test_corrupt_label_table_rejected(dataset, tmp_path):
    path = tmp_path / "d.spffemb"
    write_dataset(dataset, path)
    header = read_header(path)
    blob = path.read_bytes()[: header.label_table_offset] + b"{not json"
    path.write_bytes(blob)
    with pytest.raises(FileFormatError, match="not valid JSON"):
        read_dataset(path)


def test_header_offset_mismatch_rejected(dataset, tmp_path):
    path = tmp_path / "d.spffemb"
    write_dataset(dataset, path)
    blob = bytearray(path.read_bytes())
    blob[28:36] = (12345).to_bytes(8, "little")  # label_table_offset field
    path.write_bytes(blob)
    with pytest.raises(FileFormatError, match="shape mismatch"):
        read_dataset(path)


def test_nan_payload_reads_but_fails_validation(dataset, tmp_path):
    path = tmp_path / "d.spffemb"
    write_dataset(dataset, path)
    blob = bytearray(path.read_bytes())
    blob[40:44] = np.array([np.nan], dtype="<f4").tobytes()  # first float of item 0
    path.write_bytes(blob)
    again = read_dataset(path)  # structural read succeeds
    report = validate_dataset(again)
    assert any("non-finite entry: item 0" in v for v in report)


def test_make_splits_ten_classes_is_7_1_2():
    classes = [f"c{i}" for i in range(10)]
    assignment = make_splits(classes, (0.7, 0.1, 0.2), seed=0)
    counts = {s: sum(1 for v in assignment.values() if v == s) for s in ("train", "val", "test")}
    assert counts == {"train": 7, "val": 1, "test": 2}


def test_make_splits_deterministic():
    classes = [f"c{i}" for i in range(12)]
    assert make_splits(classes, seed=5) == make_splits(classes, seed=5)
    assert make_splits(classes, seed=5) != make_splits(classes, seed=6)


def test_make_splits_is_partition():
    classes = [f"c{i}" for i in range(23)]
    assignment = make_splits(classes, seed=3)
    assert sorted(assignment) == sorted(classes)
    assert set(assignment.values()) == {"train", "val", "test"}


def test_make_splits_guarantees_nonempty_splits():
    assignment = make_splits(["a", "b", "c"], (0.7, 0.1, 0.2), seed=1)
    assert sorted(assignment.values()) == ["test", "train", "val"]


def test_make_splits_needs_three_classes():
    with pytest.raises(ValueError, match="at least 3 classes"):
        make_splits(["a", "b"])


def test_make_splits_accepts_dataset(dataset):
    assignment = make_splits(dataset, seed=2)
    assert sorted(assignment) == sorted(dataset.classes)


def test_synthetic_noise_free_full_foreground_is_uniform():
    spec = SyntheticSpec(
        n_classes=3, items_per_class=2, patch_count=8, dim=4,
        foreground_fraction=1.0, noise_sigma=0.0, seed=1,
    )
    ds = generate_synthetic(spec)
    item = ds.items[0]
    # every patch equals the prototype, so similarities tie and softmax is flat
    probs = similarity_to_probabilities(class_similarity(item.patches, item.class_token))
    np.testing.assert_allclose(probs, np.full(8, 1 / 8), atol=1e-9)


def test_synthetic_foreground_count_is_round_rho_p():
    spec = SyntheticSpec(
        n_classes=3, items_per_class=2, patch_count=16, dim=4,
        foreground_fraction=0.25, seed=2,
    )
    ds = generate_synthetic(spec)
    assert all(item.foreground.size == 4 for item in ds.items)


def test_synthetic_foreground_outcorrelates_background():
    spec = SyntheticSpec(
        n_classes=5, items_per_class=20, patch_count=16, dim=12,
        foreground_fraction=0.25, noise_sigma=0.1, seed=4,
    )
    ds = generate_synthetic(spec)
    fg_sims, bg_sims = [], []
    for item in ds.items:  # 100 items
        sims = class_similarity(item.patches, item.class_token)
        mask = np.zeros(item.patch_count, dtype=bool)
        mask[item.foreground] = True
        fg_sims.append(sims[mask].mean())
        bg_sims.append(sims[~mask].mean())
    assert np.mean(fg_sims) > np.mean(bg_sims)


def test_synthetic_is_seed_deterministic():
    spec = SyntheticSpec(n_classes=3, items_per_class=2, patch_count=8, dim=4, seed=9)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert _datasets_equal(a, b)


def test_synthetic_stores_float32():
    ds = generate_synthetic(SyntheticSpec(n_classes=3, items_per_class=1, patch_count=4, dim=4))
    assert ds.items[0].patches.dtype == np.float32
    assert ds.items[0].class_token.dtype == np.float32


def test_foreground_recovery_beats_uniform_baseline(dataset):
    k = 4  # round(0.25 * 16)
    recovery = foreground_recovery(dataset, k, seed=0)
    assert recovery > k / dataset.patch_count  # enriched over blind picking


def test_foreground_recovery_deterministic_selection_is_total(dataset):
    # with low noise the top-k by similarity are exactly the planted patches
    cfg = RunConfig(k_patches=4, selection_mode="deterministic")
    hits = []
    for item in dataset.items:
        res = filter_patches(item, cfg)
        hits.append(np.intersect1d(res.indices, item.foreground).size / 4)
    assert np.mean(hits) > 0.99


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(n_classes=2)
    with pytest.raises(ValueError):
        SyntheticSpec(foreground_fraction=0.0)
    with pytest.raises(ValueError):
        SyntheticSpec(noise_sigma=-0.1)
