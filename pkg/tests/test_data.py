import io
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdals.data import (
    HIST_BIN_WIDTH,
    TEST,
    TRAIN,
    VALIDATION,
    DataError,
    RatingLog,
    RawRating,
    assign_dimensions,
    binarize,
    dumps_dataset,
    filter_min_support,
    fixed_scheme,
    load_dataset,
    load_ratings,
    loads_dataset,
    lower_median,
    nearest_allowed,
    popularity_stats,
    prepare,
    save_dataset,
    temporal_split,
)

from conftest import make_dataset

DATA = Path(__file__).parent / "data"


def log_of(rows, binary=False):
    return RatingLog.from_records([RawRating(str(u), str(i), float(r), int(t)) for u, i, r, t in rows], binary=binary)


class TestLoad:
    def test_movielens_line(self):
        log = load_ratings(b"1,296,5.0,1147880044\n")
        assert list(log) == [RawRating("1", "296", 5.0, 1147880044)]

    def test_header_skipped(self):
        log = load_ratings(b"userId,movieId,rating,timestamp\n1,2,4.0,10\n")
        assert len(log) == 1 and log.skipped == 0

    def test_empty(self):
        log = load_ratings(b"")
        assert len(log) == 0 and log.skipped == 0

    def test_one_malformed_in_thousand(self):
        lines = [f"{k},{k % 7},4.0,{k}" for k in range(999)]
        lines.insert(500, "this,is,broken")
        log = load_ratings("\n".join(lines).encode())
        assert len(log) == 999 and log.skipped == 1

    def test_too_many_malformed(self):
        lines = [f"{k},1,4.0,{k}" for k in range(50)] + ["bad line"] * 2
        with pytest.raises(DataError, match="malformed"):
            load_ratings("\n".join(lines).encode())

    def test_out_of_range_rating_is_malformed(self):
        lines = [f"{k},1,4.0,{k}" for k in range(200)] + ["1,1,7.0,3"]
        log = load_ratings("\n".join(lines).encode())
        assert log.skipped == 1

    def test_generic_delimiters(self):
        text = b"1\t2\t4.0\t10\n3;4;1.0;11\n5 6 2.0 12\n"
        log = load_ratings(text, "csv_generic")
        assert [(r.user, r.item, r.rating, r.timestamp) for r in log] == [
            ("1", "2", 4.0, 10),
            ("3", "4", 1.0, 11),
            ("5", "6", 2.0, 12),
        ]

    def test_netflix(self):
        text = b"1:\n6,3,2005-09-06\n7,5,2004-01-01\n2:\n6,1,2005-09-07\n"
        log = load_ratings(text, "netflix")
        assert [(r.user, r.item, r.rating) for r in log] == [("6", "1", 3.0), ("7", "1", 5.0), ("6", "2", 1.0)]
        assert log[0].timestamp == 1125964800
        assert log[2].timestamp - log[0].timestamp == 86400

    def test_text_and_binary_streams(self):
        a = load_ratings(io.StringIO("1,2,4.0,5\n"))
        b = load_ratings(io.BytesIO(b"1,2,4.0,5\n"))
        assert list(a) == list(b)

    def test_unreadable_path(self, tmp_path):
        with pytest.raises(DataError):
            load_ratings(tmp_path / "missing.csv")

    def test_bad_utf8(self):
        with pytest.raises(DataError):
            load_ratings(b"\xff\xfe1,2,3,4\n")

    def test_unknown_format(self):
        with pytest.raises(DataError):
            load_ratings(b"", "parquet")


class TestBinarize:
    def test_rules(self):
        out = binarize(log_of([(1, 1, 1.0, 0), (1, 2, 4.5, 1), (1, 3, 3.0, 2), (1, 4, 2.0, 3), (1, 5, 4.0, 4), (1, 6, 2.5, 5)]))
        assert out.items.tolist() == ["1", "2", "4", "5"]
        assert out.ratings.tolist() == [0.0, 1.0, 0.0, 1.0]
        assert out.binary

    def test_idempotent(self, synthetic_log):
        once = binarize(synthetic_log)
        twice = binarize(once)
        assert np.array_equal(once.ratings, twice.ratings)
        assert np.array_equal(once.users, twice.users)


class TestTemporalSplit:
    def test_ten_ratings(self):
        log = binarize(log_of([(k, k, 5.0, k) for k in range(1, 11)]))
        ds = temporal_split(log)
        ts = {name: sorted(ds.timestamps[ds.split == code].tolist()) for name, code in (("tr", TRAIN), ("va", VALIDATION), ("te", TEST))}
        assert ts == {"tr": list(range(1, 9)), "va": [9], "te": [10]}

    def test_equal_timestamps(self):
        log = binarize(log_of([(k, 20 - k, 5.0, 7) for k in range(20)]))
        ds = temporal_split(log)
        assert (ds.split_size("train"), ds.split_size("validation"), ds.split_size("test")) == (16, 2, 2)
        # ties resolved by (user, item) token order: users 18, 19 land in test
        test_users = ds.user_tokens[ds.users[ds.split == TEST]]
        assert sorted(test_users.tolist(), key=int) == ["18", "19"]

    def test_synthetic_counts(self):
        from mdals.synthetic import SyntheticConfig, generate

        log = generate(SyntheticConfig(num_users=2000, num_items=2000, interactions=100_000))
        ds = temporal_split(binarize(log))
        assert abs(ds.split_size("train") - 80_000) <= 1
        assert abs(ds.split_size("validation") - 10_000) <= 1
        assert abs(ds.split_size("test") - 10_000) <= 1

    def test_duplicates_keep_latest(self):
        rows = [(1, 1, 1.0, 1), (1, 1, 5.0, 2)] + [(k, 9, 5.0, 10 + k) for k in range(2, 10)]
        ds = temporal_split(binarize(log_of(rows)))
        mask = (ds.user_tokens[ds.users] == "1") & (ds.item_tokens[ds.items] == "1")
        assert mask.sum() == 1 and ds.labels[mask][0] == 1.0

    def test_too_few(self):
        with pytest.raises(DataError):
            temporal_split(binarize(log_of([(1, 1, 5.0, 1), (1, 2, 5.0, 2)])))

    def test_requires_binary(self):
        with pytest.raises(DataError):
            temporal_split(log_of([(k, k, 5.0, k) for k in range(10)]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(3, 300), st.floats(0.01, 0.45), st.floats(0.01, 0.45))
    def test_fractions(self, n, vf, tf):
        log = binarize(log_of([(k % 17, k % 13, 5.0, k * 7 % n) for k in range(n)]))
        from mdals.data import _split_sizes

        sizes = _split_sizes(n, vf, tf)
        if min(sizes) < 1:
            with pytest.raises(DataError):
                temporal_split(log, vf, tf)
            return
        ds = temporal_split(log, vf, tf)
        # duplicates within a split can only shrink a split
        assert ds.split_size("validation") <= sizes[1] and abs(sizes[1] - n * vf) <= 1
        assert ds.split_size("test") <= sizes[2] and abs(sizes[2] - n * tf) <= 1


class TestFilter:
    def test_user_with_four_removed(self):
        # user 0 has 4 train ratings and one test row; users 1..5 have 5 each
        users = [0] * 4 + [u for u in range(1, 6) for _ in range(5)] + [0]
        items = [0, 1, 2, 3] + [i for _ in range(1, 6) for i in range(5)] + [4]
        split = [TRAIN] * 29 + [TEST]
        ds = filter_min_support(make_dataset(users, items, np.ones(30), split), 5)
        assert "0" not in ds.user_tokens.tolist()
        assert ds.split_size("test") == 0

    def test_non_recursive(self):
        # user 0 rates items 0..4; items 3 and 4 have too little support
        users = [0] * 5 + [u for u in range(1, 6) for _ in range(3)]
        items = list(range(5)) + [i for _ in range(1, 6) for i in range(3)]
        ds = make_dataset(users, items, np.ones(len(users)))
        out = filter_min_support(ds, 5)
        assert out.counts("user")[0] == 3
        assert out.num_items == 3
        # users 1..5 had 3 ratings each -> removed
        assert out.num_users == 1

    def test_item_only_in_test(self):
        users = [u for u in range(5) for _ in range(5)] + [0]
        items = [i for _ in range(5) for i in range(5)] + [9]
        split = [TRAIN] * 25 + [TEST]
        out = filter_min_support(make_dataset(users, items, np.ones(26), split), 5)
        assert out.split_size("test") == 0 and out.num_items == 5

    def test_empty_result(self):
        with pytest.raises(DataError):
            filter_min_support(make_dataset([0, 1], [0, 1], [1, 0]), 5)

    def test_heldout_entities_in_train(self, synthetic_ds):
        ds = synthetic_ds
        tr = ds.split == TRAIN
        u_in = set(ds.users[tr].tolist())
        i_in = set(ds.items[tr].tolist())
        held = ~tr
        assert set(ds.users[held].tolist()) <= u_in
        assert set(ds.items[held].tolist()) <= i_in
        assert ds.num_users == len(u_in) and ds.num_items == len(i_in)

    def test_no_duplicates_within_split(self, synthetic_ds):
        ds = synthetic_ds
        key = (ds.split.astype(np.int64) * ds.num_users + ds.users) * ds.num_items + ds.items
        assert np.unique(key).size == key.size

    def test_reindex_bijection(self, synthetic_ds):
        ds = synthetic_ds
        assert len(set(ds.user_tokens.tolist())) == ds.num_users
        assert len(set(ds.item_tokens.tolist())) == ds.num_items
        assert ds.users.min() == 0 and ds.users.max() == ds.num_users - 1


def test_prepare_empty_after_binarization():
    with pytest.raises(DataError, match="empty after binarization"):
        prepare(log_of([(k, k, 3.0, k) for k in range(20)]))


def test_prepare_golden_hand_checked():
    ds = prepare(load_ratings(DATA / "golden_ratings.csv"))
    assert ds.user_tokens.tolist() == ["1", "2", "3", "4", "6"]
    assert ds.item_tokens.tolist() == ["10", "11", "12", "13", "14"]
    assert (ds.split_size("train"), ds.split_size("validation"), ds.split_size("test")) == (23, 1, 3)
    # item 14 keeps only three train ratings: support is counted before removal
    assert ds.counts("item").tolist() == [5, 5, 5, 5, 3]
    assert ds.counts("user").tolist() == [4, 4, 5, 5, 5]


class TestPopularity:
    def test_medians(self):
        assert lower_median([5, 7, 9]) == 7
        assert lower_median([5, 9]) == 5
        assert lower_median([9, 5, 7, 6]) == 6

    def test_histogram_mass(self, synthetic_ds):
        stats = popularity_stats(synthetic_ds)
        assert stats.user_hist.sum() == synthetic_ds.num_users
        assert stats.item_hist.sum() == synthetic_ds.num_items
        widths = np.diff(stats.bin_edges)
        np.testing.assert_allclose(widths, HIST_BIN_WIDTH)

    def test_histogram_bins_by_hand(self):
        # counts 5, 10, 10, 12 -> log10 = .699, 1, 1, 1.079
        users = [0] * 5 + [1] * 10 + [2] * 10 + [3] * 12
        items = list(range(5)) + list(range(10)) + list(range(10)) + list(range(12))
        stats = popularity_stats(make_dataset(users, items, np.ones(len(users))))
        rows = {(round(a, 1), u) for a, _, u, _ in stats.histogram_rows()}
        assert (0.6, 1) in rows and (1.0, 3) in rows
        assert stats.user_median == 10

    def test_train_only(self):
        ds = make_dataset([0, 0, 1], [0, 1, 0], [1, 1, 1], [TRAIN, TEST, TRAIN])
        assert popularity_stats(ds).user_counts.tolist() == [1, 1]


class TestAssignDimensions:
    @staticmethod
    def stats(counts, median):
        from mdals.data import PopularityStats

        c = np.asarray(counts)
        e = np.zeros(1)
        return PopularityStats(c, c, median, median, e, e, e)

    @pytest.mark.parametrize("count,expected", [(10, 2), (22, 4), (10000, 6)])
    def test_examples(self, count, expected):
        scheme = assign_dimensions(self.stats([count], 10.0), (2, 4, 6), 0.5)
        assert scheme.user_dims.tolist() == [expected]

    def test_midpoint_goes_up(self):
        # raw 3.0 is halfway between 2 and 4; raw 5.0 halfway between 4 and 6
        assert nearest_allowed(np.array([3.0, 5.0, 2.999, 4.999]), (2, 4, 6)).tolist() == [4, 6, 2, 4]

    @given(st.lists(st.integers(1, 10_000), min_size=2, max_size=50), st.floats(0.05, 5.0))
    def test_monotone(self, counts, gamma):
        counts = sorted(counts)
        scheme = assign_dimensions(self.stats(counts, float(lower_median(counts))), (1, 2, 4, 6, 8), gamma)
        assert np.all(np.diff(scheme.user_dims) >= 0)
        assert set(scheme.user_dims.tolist()) <= {1, 2, 4, 6, 8}

    def test_gamma_must_be_positive(self):
        with pytest.raises(ValueError):
            assign_dimensions(self.stats([1], 1.0), (2,), 0.0)

    def test_allowed_must_ascend(self):
        from mdals.data import DimensionScheme

        with pytest.raises(ValueError):
            DimensionScheme((4, 2), [2], [2])

    def test_fixed(self):
        s = fixed_scheme(3, 2, 6)
        assert s.max_dim == 6 and s.user_dims.tolist() == [6, 6, 6]


class TestCache:
    def test_round_trip(self, synthetic_ds, tmp_path):
        path = tmp_path / "c.tsv"
        save_dataset(synthetic_ds, path)
        back = load_dataset(path)
        for name in ("users", "items", "labels", "split", "timestamps", "user_tokens", "item_tokens"):
            assert np.array_equal(getattr(back, name), getattr(synthetic_ds, name))
        assert dumps_dataset(back) == path.read_bytes()

    def test_bad_magic(self):
        with pytest.raises(DataError):
            loads_dataset(b"something else\n")

    def test_bad_version(self):
        blob = dumps_dataset(prepare(load_ratings(DATA / "golden_ratings.csv")))
        with pytest.raises(DataError, match="version"):
            loads_dataset(blob.replace(b"mdals-dataset\t1", b"mdals-dataset\t9", 1))

    def test_truncated(self):
        blob = dumps_dataset(prepare(load_ratings(DATA / "golden_ratings.csv")))
        with pytest.raises(DataError):
            loads_dataset(blob[: len(blob) // 2].rsplit(b"\n", 1)[0] + b"\n")

    def test_corrupt_field(self):
        blob = dumps_dataset(prepare(load_ratings(DATA / "golden_ratings.csv")))
        with pytest.raises(DataError):
            loads_dataset(blob.replace(b"\ttrain\t", b"\tbogus\t", 1))
