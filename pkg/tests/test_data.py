import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forestiv.data import (
    PARTITION_COLUMN,
    DataError,
    Dataset,
    EconSample,
    load_csv,
    save_csv,
    split,
)


def write(path, text):
    path.write_text(text)
    return path


class TestLoadCsv:
    def test_three_rows_two_features(self, tmp_path):
        f = write(tmp_path / "d.csv", "a,b,y\n1,2,0.5\n3,4,1.5\n5,6,2.5\n")
        d = load_csv(f, {"a": "feature", "b": "feature", "y": "truth"})
        assert (d.n, d.p) == (3, 2)
        np.testing.assert_array_equal(d.truth, [0.5, 1.5, 2.5])
        assert d.feature_names == ("a", "b")
        assert d.truth_name == "y"

    def test_header_only(self, tmp_path):
        f = write(tmp_path / "d.csv", "a,b\n")
        with pytest.raises(DataError, match="zero data rows"):
            load_csv(f)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="file not found"):
            load_csv(tmp_path / "nope.csv")

    def test_missing_schema_column(self, tmp_path):
        f = write(tmp_path / "d.csv", "a,b\n1,2\n")
        with pytest.raises(DataError, match="missing column"):
            load_csv(f, {"a": "feature", "c": "truth"})

    def test_non_numeric_cell(self, tmp_path):
        f = write(tmp_path / "d.csv", "a,b\n1,2\nx,3\n")
        with pytest.raises(DataError, match="non-numeric"):
            load_csv(f)

    def test_missing_value_rejected(self, tmp_path):
        f = write(tmp_path / "d.csv", "a,b\n1,\n2,3\n")
        with pytest.raises(DataError, match="missing value"):
            load_csv(f)

    def test_categorical_first_appearance(self, tmp_path):
        f = write(tmp_path / "d.csv", "c,x\nred,1\nblue,2\nred,3\ngreen,4\n")
        d = load_csv(f, {"c": "categorical", "x": "feature"})
        np.testing.assert_array_equal(d.features[:, 0], [0, 1, 0, 2])

    def test_ignore_role_and_blank_truth(self, tmp_path):
        f = write(tmp_path / "d.csv", "id,a,y\n7,1,2\n8,3,\n")
        d = load_csv(f, {"id": "ignore", "a": "feature", "y": "truth"})
        assert d.p == 1
        assert np.isnan(d.truth[1])

    def test_bike_style_twelve_features(self, tmp_path):
        rng = np.random.default_rng(0)
        names = [f"f{j}" for j in range(12)]
        rows = rng.random((20, 13))
        text = ",".join(names + ["lnCnt"]) + "\n"
        text += "\n".join(",".join(repr(float(v)) for v in r) for r in rows) + "\n"
        f = write(tmp_path / "bike.csv", text)
        d = load_csv(f, {**{n: "feature" for n in names}, "lnCnt": "truth"})
        assert d.p == 12


class TestDataset:
    def test_rejects_non_finite(self):
        with pytest.raises(DataError):
            Dataset(np.array([[1.0, np.inf]]))

    def test_labeled_rows_need_truth(self):
        with pytest.raises(DataError, match="truth missing"):
            Dataset(np.ones((2, 1)), np.array([1.0, np.nan]), np.array(["train", "train"]))

    def test_immutable(self):
        d = Dataset(np.ones((2, 1)), np.ones(2))
        with pytest.raises(ValueError):
            d.features[0, 0] = 3.0

    def test_unknown_tag(self):
        with pytest.raises(DataError, match="unknown partition"):
            Dataset(np.ones((1, 1)), np.ones(1), np.array(["valid"]))


class TestSplit:
    def make(self, n=50):
        rng = np.random.default_rng(1)
        return Dataset(rng.random((n, 3)), rng.random(n))

    def test_counts(self):
        d = split(self.make(), 20, 10, seed=3)
        assert d.counts() == {"train": 20, "test": 10, "unlabel": 20}

    def test_all_train(self):
        d = split(self.make(), 50, 0, seed=3)
        assert d.counts()["unlabel"] == 0

    def test_deterministic(self):
        a = split(self.make(), 20, 10, seed=3)
        b = split(self.make(), 20, 10, seed=3)
        np.testing.assert_array_equal(a.partition, b.partition)
        c = split(self.make(), 20, 10, seed=4)
        assert not np.array_equal(a.partition, c.partition)

    def test_insufficient_rows(self):
        with pytest.raises(DataError, match="insufficient rows"):
            split(self.make(), 40, 20, seed=0)

    def test_truth_missing(self):
        truth = np.r_[np.ones(5), np.full(5, np.nan)]
        d = Dataset(np.ones((10, 1)), truth)
        with pytest.raises(DataError, match="truth missing"):
            split(d, 4, 3, seed=0)
        s = split(d, 3, 2, seed=0)
        assert np.all(np.isfinite(s.truth[s.mask("train", "test")]))

    def test_bike_scale_unlabel_count(self):
        d = Dataset(np.zeros((17379, 1)), np.zeros(17379))
        assert split(d, 1000, 200, seed=0).counts()["unlabel"] == 16179

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 60), data=st.data())
    def test_partition_property(self, n, data):
        n_train = data.draw(st.integers(0, n))
        n_test = data.draw(st.integers(0, n - n_train))
        d = split(Dataset(np.zeros((n, 1)), np.zeros(n)), n_train, n_test, seed=n)
        c = d.counts()
        assert c == {"train": n_train, "test": n_test, "unlabel": n - n_train - n_test}


def test_csv_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(2)
    X = rng.standard_normal((30, 4)) * 10.0 ** rng.integers(-8, 8, (30, 4))
    truth = rng.standard_normal(30)
    truth[25:] = np.nan
    d = split(Dataset(X, truth, None, ("a", "b", "c", "d"), "y"), 10, 10, seed=0)
    path = tmp_path / "out.csv"
    save_csv(d, path)
    assert PARTITION_COLUMN in path.read_text().splitlines()[0]
    back = load_csv(path, {"a": "feature", "b": "feature", "c": "feature", "d": "feature",
                           "y": "truth"})
    np.testing.assert_array_equal(back.features, d.features)
    np.testing.assert_array_equal(back.truth, d.truth)
    np.testing.assert_array_equal(back.partition, d.partition)


class TestEconSample:
    def test_intercept_required(self):
        with pytest.raises(DataError, match="intercept"):
            EconSample(np.ones(3), np.ones(3), np.zeros((3, 2)))

    def test_lengths(self):
        with pytest.raises(DataError):
            EconSample(np.ones(3), np.ones(2), np.ones((3, 1)))

    def test_subset_and_names(self):
        s = EconSample(np.arange(4.0), np.arange(4.0), np.column_stack([np.ones(4), np.arange(4)]))
        assert s.control_names == ("const", "z1")
        sub = s.subset([1, 3])
        np.testing.assert_array_equal(sub.row_ids, [1, 3])
        assert sub.m == 2
