import numpy as np
import pytest

from spff.domain import RunConfig
from spff.filtering import (
    DegenerateClassTokenError,
    class_aware_addition,
    class_similarity,
    filter_patches,
    l2_normalize,
    select_deterministic,
    select_mixed,
    select_random,
    select_stochastic,
    similarity_to_probabilities,
)
from spff.dataio import SyntheticSpec, generate_synthetic
from spff.seeding import stream


def test_l2_normalize_scales_rows():
    out, zero = l2_normalize(np.array([[3.0, 4.0]]))
    np.testing.assert_allclose(out, [[0.6, 0.8]], atol=1e-15)
    assert not zero[0]


def test_l2_normalize_is_idempotent_on_unit_rows():
    row = np.array([[1.0 / np.sqrt(2), -1.0 / np.sqrt(2)]])
    out, _ = l2_normalize(row)
    np.testing.assert_allclose(out, row, atol=1e-15)


def test_l2_normalize_flags_zero_rows():
    out, zero = l2_normalize(np.array([[0.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(out[0], [0.0, 0.0])
    assert zero.tolist() == [True, False]


def test_class_similarity_identical_vector_scores_one():
    patches = np.array([[2.0, 1.0, -0.5]])
    s = class_similarity(patches, patches[0])
    np.testing.assert_allclose(s, [1.0], atol=1e-12)


def test_class_similarity_orthogonal_scores_zero():
    s = class_similarity(np.array([[1.0, 0.0]]), np.array([0.0, 3.0]))
    np.testing.assert_allclose(s, [0.0], atol=1e-15)


def test_class_similarity_known_angle():
    # cos between (1,0) and (1,1) is 1/sqrt(2)
    s = class_similarity(np.array([[1.0, 0.0]]), np.array([1.0, 1.0]))
    np.testing.assert_allclose(s, [1.0 / np.sqrt(2)], atol=1e-12)


def test_class_similarity_rejects_zero_token():
    with pytest.raises(DegenerateClassTokenError, match="degenerate class token"):
        class_similarity(np.array([[1.0, 0.0]]), np.array([0.0, 0.0]))


def test_class_similarity_bounded():
    rng = stream(7, 0)
    patches = rng.normal(size=(50, 9))
    token = rng.normal(size=9)
    s = class_similarity(patches, token)
    assert (np.abs(s) <= 1.0 + 1e-12).all()


def test_softmax_of_constant_scores_is_uniform():
    p = similarity_to_probabilities(np.array([0.3, 0.3, 0.3, 0.3]))
    np.testing.assert_allclose(p, [0.25] * 4, atol=1e-15)


def test_softmax_closed_form():
    # softmax(ln 2, 0) = (2/3, 1/3)
    p = similarity_to_probabilities(np.array([np.log(2.0), 0.0]))
    np.testing.assert_allclose(p, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)


def test_softmax_shift_invariance():
    rng = stream(11, 0)
    s = rng.normal(size=20)
    p1 = similarity_to_probabilities(s)
    p2 = similarity_to_probabilities(s + 10.0)
    np.testing.assert_allclose(p1, p2, atol=1e-12)


def test_softmax_is_valid_distribution():
    rng = stream(13, 0)
    for _ in range(200):
        s = rng.normal(size=int(rng.integers(1, 40))) * 5
        p = similarity_to_probabilities(s)
        assert abs(p.sum() - 1.0) <= 1e-9
        assert (p > 0).all()


def test_select_stochastic_exhausts_population():
    p = similarity_to_probabilities(stream(1, 0).normal(size=6))
    sel = select_stochastic(p, 6, stream(1, 1))
    np.testing.assert_array_equal(sel, np.arange(6))


def test_select_stochastic_overwhelming_mass():
    eps = 1e-9
    p = np.array([1.0 - 2 * eps, eps, eps])
    rng = stream(2, 0)
    hits = sum(select_stochastic(p, 1, rng)[0] == 0 for _ in range(10_000))
    assert hits / 10_000 >= 0.999


def test_select_stochastic_matches_categorical_frequencies():
    p = np.array([0.5, 0.3, 0.2])
    rng = stream(3, 0)
    counts = np.zeros(3)
    for _ in range(100_000):
        counts[select_stochastic(p, 1, rng)[0]] += 1
    np.testing.assert_allclose(counts / counts.sum(), p, atol=0.01)


def test_select_stochastic_seed_reproducibility():
    p = similarity_to_probabilities(stream(4, 0).normal(size=30))
    a = select_stochastic(p, 10, stream(4, 1))
    b = select_stochastic(p, 10, stream(4, 1))
    np.testing.assert_array_equal(a, b)


def test_select_stochastic_rejects_bad_k():
    p = np.array([0.5, 0.5])
    with pytest.raises(ValueError):
        select_stochastic(p, 3, stream(0, 0))
    with pytest.raises(ValueError):
        select_stochastic(p, 0, stream(0, 0))


def test_select_stochastic_handles_zero_mass_tail():
    # more draws than entries with mass: remainder must still be distinct
    p = np.array([1.0, 0.0, 0.0, 0.0])
    sel = select_stochastic(p, 4, stream(5, 0))
    np.testing.assert_array_equal(sel, np.arange(4))


def test_select_deterministic_top_k():
    sel = select_deterministic(np.array([0.1, 0.4, 0.3, 0.2]), 2)
    np.testing.assert_array_equal(sel, [1, 2])


def test_select_deterministic_tie_breaks_low_index():
    sel = select_deterministic(np.full(5, 0.2), 3)
    np.testing.assert_array_equal(sel, [0, 1, 2])


def test_select_deterministic_full_population():
    p = similarity_to_probabilities(stream(6, 0).normal(size=9))
    np.testing.assert_array_equal(select_deterministic(p, 9), np.arange(9))


def test_select_random_full_population():
    np.testing.assert_array_equal(select_random(5, 5, stream(7, 0)), np.arange(5))


def test_select_random_is_uniform():
    rng = stream(8, 0)
    counts = np.zeros(3)
    for _ in range(100_000):
        counts[select_random(3, 1, rng)[0]] += 1
    np.testing.assert_allclose(counts / counts.sum(), [1 / 3] * 3, atol=0.01)


def test_select_random_seed_reproducibility():
    a = select_random(50, 7, stream(9, 0))
    b = select_random(50, 7, stream(9, 0))
    np.testing.assert_array_equal(a, b)


def test_select_mixed_boundaries_match_pure_modes():
    p = similarity_to_probabilities(stream(10, 0).normal(size=40))
    np.testing.assert_array_equal(
        select_mixed(p, 12, 0.0, stream(10, 1)), select_deterministic(p, 12)
    )
    np.testing.assert_array_equal(
        select_mixed(p, 12, 1.0, stream(10, 2)), select_stochastic(p, 12, stream(10, 2))
    )


def test_select_mixed_half_split_at_k98():
    p = similarity_to_probabilities(stream(11, 0).normal(size=196))
    sel = select_mixed(p, 98, 0.5, stream(11, 1))
    fixed = select_deterministic(p, 49)
    assert sel.size == 98 and len(np.unique(sel)) == 98
    assert np.isin(fixed, sel).all()  # the 49 deterministic picks survive


def test_select_mixed_rounds_half_up():
    # (1 - 0.75) * 98 = 24.5 rounds to 25 fixed picks
    p = similarity_to_probabilities(stream(12, 0).normal(size=196))
    sel = select_mixed(p, 98, 0.75, stream(12, 1))
    fixed = select_deterministic(p, 25)
    assert np.isin(fixed, sel).all()


def test_class_aware_addition_identity_at_lambda_zero():
    sel = stream(13, 0).normal(size=(4, 6))
    np.testing.assert_array_equal(class_aware_addition(sel, np.ones(6), 0.0), sel)


def test_class_aware_addition_arithmetic():
    out = class_aware_addition(np.array([[1.0, 1.0]]), np.array([0.5, -0.5]), 2.0)
    np.testing.assert_allclose(out, [[2.0, 0.0]], atol=1e-15)


def test_default_lambda_is_two():
    assert RunConfig().lambda_class == 2.0
    assert RunConfig().k_patches == 98


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_synthetic(
        SyntheticSpec(n_classes=4, items_per_class=3, patch_count=12, dim=6, seed=3)
    )


def test_filter_patches_k_equals_p_any_mode(tiny_dataset):
    item = tiny_dataset.items[0]
    for mode in ("stochastic", "deterministic", "random", "mixed"):
        cfg = RunConfig(k_patches=12, selection_mode=mode, stochastic_fraction=0.5)
        res = filter_patches(item, cfg, stream(14, 0))
        np.testing.assert_array_equal(res.indices, np.arange(12))


def test_filter_patches_deterministic_repeatable(tiny_dataset):
    item = tiny_dataset.items[1]
    cfg = RunConfig(k_patches=5, selection_mode="deterministic")
    a = filter_patches(item, cfg)
    b = filter_patches(item, cfg)
    np.testing.assert_array_equal(a.indices, b.indices)
    np.testing.assert_array_equal(a.selected, b.selected)


def test_filter_patches_stochastic_seeded(tiny_dataset):
    item = tiny_dataset.items[2]
    cfg = RunConfig(k_patches=5)
    a = filter_patches(item, cfg, stream(15, 0))
    b = filter_patches(item, cfg, stream(15, 0))
    np.testing.assert_array_equal(a.indices, b.indices)
    np.testing.assert_array_equal(a.selected, b.selected)
    np.testing.assert_array_equal(a.probabilities, b.probabilities)


def test_filter_patches_mixed_records_fraction(tiny_dataset):
    cfg = RunConfig(k_patches=6, selection_mode="mixed", stochastic_fraction=0.5)
    res = filter_patches(tiny_dataset.items[0], cfg, stream(21, 0))
    assert res.mode == "mixed" and res.stochastic_fraction == 0.5
    cfg = RunConfig(k_patches=6, selection_mode="deterministic")
    assert filter_patches(tiny_dataset.items[0], cfg).stochastic_fraction is None


def test_filter_patches_requires_rng_for_stochastic(tiny_dataset):
    with pytest.raises(ValueError, match="requires an rng"):
        filter_patches(tiny_dataset.items[0], RunConfig(k_patches=5), None)


def test_filter_patches_rejects_oversized_k(tiny_dataset):
    cfg = RunConfig(k_patches=13)
    with pytest.raises(ValueError, match="exceeds patch count"):
        filter_patches(tiny_dataset.items[0], cfg, stream(16, 0))


def test_filter_patches_fusion_matches_manual(tiny_dataset):
    item = tiny_dataset.items[0]
    cfg = RunConfig(k_patches=4, selection_mode="deterministic", lambda_class=2.0)
    res = filter_patches(item, cfg)
    manual = item.patches.astype(np.float64)[res.indices] + 2.0 * item.class_token.astype(np.float64)
    np.testing.assert_allclose(res.selected, manual, atol=1e-12)


def test_selectors_return_distinct_sorted_indices():
    rng = stream(17, 0)
    for _ in range(500):
        p_count = int(rng.integers(1, 65))
        k = int(rng.integers(1, p_count + 1))
        probs = similarity_to_probabilities(rng.normal(size=p_count))
        frac = float(rng.random())
        for sel in (
            select_stochastic(probs, k, rng),
            select_deterministic(probs, k),
            select_random(p_count, k, rng),
            select_mixed(probs, k, frac, rng),
        ):
            assert sel.size == k
            assert len(np.unique(sel)) == k
            assert (np.diff(sel) > 0).all() or k == 1


def test_monotone_marginals_argmax_selected_most():
    probs = np.array([0.05, 0.35, 0.15, 0.25, 0.2])
    for seed in (0, 1, 2):
        rng = stream(18, seed)
        counts = np.zeros(5)
        for _ in range(100_000):
            counts[select_stochastic(probs, 1, rng)[0]] += 1
        assert counts.argmax() == probs.argmax()


def test_chi_square_goodness_of_fit_five_outcomes():
    scipy_stats = pytest.importorskip("scipy.stats")
    probs = np.array([0.4, 0.25, 0.15, 0.12, 0.08])
    rng = stream(20, 0)
    counts = np.zeros(5)
    n = 100_000
    for _ in range(n):
        counts[select_stochastic(probs, 1, rng)[0]] += 1
    result = scipy_stats.chisquare(counts, probs * n)
    assert result.pvalue >= 0.01


def test_shift_invariance_propagates_to_selection():
    rng = stream(19, 0)
    scores = rng.normal(size=30)
    p1 = similarity_to_probabilities(scores)
    p2 = similarity_to_probabilities(scores + 7.5)
    np.testing.assert_array_equal(select_deterministic(p1, 10), select_deterministic(p2, 10))
    np.testing.assert_array_equal(
        select_stochastic(p1, 10, stream(19, 1)), select_stochastic(p2, 10, stream(19, 1))
    )
