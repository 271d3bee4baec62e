import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from llpcs import bagging as Bg
from llpcs.bagging import BaggingError
from llpcs.data import Dataset

from conftest import toy_dataset


def check_collection(ds, bags):
    members = bags.member_indices()
    assert len(np.unique(members)) == len(members)
    assert len(members) + len(bags.dropped) == len(ds)
    for b in bags:
        assert abs(b.label - ds.labels[b.indices].mean()) <= 1e-12


def test_random_bags_floor_and_drop():
    ds = toy_dataset(n=10)
    bags = Bg.random_bags(ds, 3, seed=0)
    assert len(bags) == 3 and len(bags.dropped) == 1
    assert set(bags.sizes) == {3}
    check_collection(ds, bags)


def test_random_bags_singletons():
    ds = toy_dataset(n=7)
    bags = Bg.random_bags(ds, 1, seed=2)
    for b in bags:
        assert b.label == ds.labels[b.indices[0]]


def test_random_bags_replays_seeded_shuffle():
    ds = toy_dataset(n=6)
    bags = Bg.random_bags(ds, 2, seed=5)
    order = np.random.default_rng(5).permutation(6)
    for j, b in enumerate(bags):
        np.testing.assert_array_equal(b.indices, order[2 * j:2 * j + 2])
        assert b.label == ds.labels[order[2 * j:2 * j + 2]].mean()


def test_random_bags_errors():
    ds = toy_dataset(n=4)
    with pytest.raises(BaggingError):
        Bg.random_bags(ds, 5, seed=0)
    with pytest.raises(BaggingError):
        Bg.random_bags(ds, 0, seed=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 9), st.integers(0, 1000))
def test_random_bags_properties(n, k, seed):
    ds = toy_dataset(n=n, seed=seed)
    if k > n:
        with pytest.raises(BaggingError):
            Bg.random_bags(ds, k, seed)
        return
    bags = Bg.random_bags(ds, k, seed)
    assert len(bags) == n // k
    check_collection(ds, bags)


def test_correlated_categorical_counts():
    cat = np.array([[0]] * 5 + [[1]] * 4)
    ds = Dataset(np.zeros((9, 1)), np.arange(9.0), cat, categorical_names=("g",))
    bags = Bg.correlated_bags(ds, "g", 2, seed=0)
    groups = [set(ds.categorical[b.indices, 0]) for b in bags]
    assert sorted(len(g) for g in groups) == [1, 1, 1, 1]
    assert sum(g == {0} for g in groups) == 2 and sum(g == {1} for g in groups) == 2
    # five A rows leave one over; four B rows split evenly
    assert len(bags.dropped) == 1
    check_collection(ds, bags)


def test_correlated_categorical_homogeneous(rng):
    ds = toy_dataset(n=100, n_cat=1, card=4)
    for b in Bg.correlated_bags(ds, "c0", 3, seed=1):
        assert len(set(ds.categorical[b.indices, 0])) == 1


def test_correlated_numeric_sorted_blocks():
    x = np.array([[3.0], [1.0], [2.0], [0.0], [1.0]])
    ds = Dataset(x, np.arange(5.0))
    bags = Bg.correlated_bags(ds, "x0", 2, seed=0)
    # stable ranks: 3 (0.0), 1 (1.0), 4 (1.0), 2 (2.0), 0 (3.0)
    np.testing.assert_array_equal(bags[0].indices, [3, 1])
    np.testing.assert_array_equal(bags[1].indices, [4, 2])
    np.testing.assert_array_equal(bags.dropped, [0])


def test_correlated_unknown_feature():
    with pytest.raises(BaggingError):
        Bg.correlated_bags(toy_dataset(), "nope", 2, seed=0)


def test_sbb_counts_from_floor_arithmetic():
    assert Bg.mixed_bag_counts(848, (8, 32, 128, 256), "SBB") == [26, 6, 1, 0]


def test_bbb_one_of_each():
    ds = toy_dataset(n=40)
    bags = Bg.mixed_bags(ds, (8, 32), "BBB", seed=0)
    assert sorted(bags.sizes) == [8, 32]
    check_collection(ds, bags)


def test_sbb_has_more_small_bags_than_bbb():
    sbb = Bg.mixed_bag_counts(100_000, Bg.MIXED_SIZES, "SBB")
    bbb = Bg.mixed_bag_counts(100_000, Bg.MIXED_SIZES, "BBB")
    assert sbb[0] > bbb[0]


def test_mixed_errors():
    ds = toy_dataset(n=100)
    with pytest.raises(BaggingError):
        Bg.mixed_bags(ds, (8, 256), "SBB", seed=0)
    with pytest.raises(BaggingError):
        Bg.mixed_bags(ds, (8,), "XYZ", seed=0)


def test_two_stage_sizes_and_blocks():
    ds = toy_dataset(n=24)
    bags = Bg.two_stage_bags(ds, 3, seed=0)
    assert len(bags) == 4 and set(bags.sizes) == {3}
    for j, b in enumerate(bags):
        assert np.all((b.indices >= 6 * j) & (b.indices < 6 * (j + 1)))
    check_collection(ds, bags)
    with pytest.raises(BaggingError):
        Bg.two_stage_bags(toy_dataset(n=25), 3, seed=0)


def test_two_stage_single_pair_is_fair():
    rng = np.random.default_rng(0)
    picks = Bg.two_stage_selection(1, 1, rng, resamples=10_000)[:, 0, 0]
    counts = np.bincount(picks, minlength=2)
    assert stats.chisquare(counts).pvalue > 0.01


def test_two_stage_marginal_inclusion_is_half():
    rng = np.random.default_rng(1)
    sel = Bg.two_stage_selection(5, 3, rng, resamples=4000)
    freq = np.bincount(sel.ravel(), minlength=30) / 4000
    np.testing.assert_allclose(freq, 0.5, atol=0.04)


def test_bag_file_round_trip(tmp_path):
    ds = toy_dataset(n=23)
    bags = Bg.random_bags(ds, 4, seed=3)
    path = tmp_path / "bags.csv"
    Bg.save_bags(bags, path)
    first = path.read_text().splitlines()
    assert first[0].startswith("# ") and first[1] == "bag_id,row_index"
    back = Bg.load_bags(path)
    assert back.regime == "random" and back.seed == 3 and back.params == {"k": 4}
    np.testing.assert_array_equal(back.dropped, bags.dropped)
    for a, b in zip(bags, back):
        np.testing.assert_array_equal(a.indices, b.indices)
        assert a.label == b.label


def test_bag_file_rejects_missing_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("bag_id,row_index\n0,1\n")
    with pytest.raises(BaggingError):
        Bg.load_bags(path)
