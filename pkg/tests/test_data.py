import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from mbf.data import (DataError, ParseError, gen_synthetic, load_domain, log1p_features,
                      make_folds, save_domain)

from conftest import domain_probe_accuracy


def write(tmp_path, text, name="d.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoad:
    def test_labeled_line(self, tmp_path):
        ds = load_domain(write(tmp_path, "1 0:2 4999:1\n"), 5000)
        assert len(ds.labeled) == 1
        assert ds.labeled.y[0] == 0  # class 1 in the file
        assert ds.labeled.x.nnz == 2
        assert ds.labeled.x[0, 0] == 2 and ds.labeled.x[0, 4999] == 1

    def test_unlabeled_line(self, tmp_path):
        ds = load_domain(write(tmp_path, "-1 7:3\n"), 10)
        assert len(ds.labeled) == 0
        assert ds.unlabeled.shape == (1, 10)
        assert ds.unlabeled[0, 7] == 3

    def test_empty_file(self, tmp_path):
        ds = load_domain(write(tmp_path, ""), 10)
        assert len(ds.labeled) == 0 and ds.unlabeled.shape[0] == 0

    def test_name_from_stem(self, tmp_path):
        assert load_domain(write(tmp_path, "", "books.txt"), 3).name == "books"

    @pytest.mark.parametrize("line", ["x 0:1", "1 0-1", "1 3:1 2:1", "1 2:1 2:1", "0 1:1", "1 1:-2", "1 1:a"])
    def test_malformed(self, tmp_path, line):
        with pytest.raises(ParseError) as err:
            load_domain(write(tmp_path, "1 0:1\n" + line + "\n"), 10)
        assert err.value.lineno == 2

    def test_index_out_of_range(self, tmp_path):
        with pytest.raises(DataError, match="feature_dim"):
            load_domain(write(tmp_path, "1 10:1\n"), 10)

    def test_roundtrip(self, tmp_path):
        text = "1 0:2 4:1\n2 3:7\n1 1:0.5 2:1e-05\n-1 7:3\n-1 0:1 9:2\n"
        src = write(tmp_path, text)
        out = tmp_path / "out.txt"
        save_domain(load_domain(src, 10), out)
        assert out.read_text().split() == text.split()

    def test_synthetic_roundtrip(self, tmp_path):
        ds = gen_synthetic(2, 3, 40, 10, 15, 1.0, rng_seed=1)[1]
        p = tmp_path / "s.txt"
        save_domain(ds, p)
        back = load_domain(p, 40)
        assert (back.labeled.x != ds.labeled.x).nnz == 0
        np.testing.assert_array_equal(back.labeled.y, ds.labeled.y)
        assert (back.unlabeled != ds.unlabeled).nnz == 0
        q = tmp_path / "again.txt"
        save_domain(back, q)
        assert q.read_bytes() == p.read_bytes()

    def test_log1p(self, tmp_path):
        ds = log1p_features(load_domain(write(tmp_path, "1 0:3\n-1 1:1\n"), 2))
        assert ds.labeled.x[0, 0] == pytest.approx(np.log(4))
        assert ds.unlabeled[0, 1] == pytest.approx(np.log(2))


class TestFolds:
    def test_five_folds_of_2000(self):
        ds = gen_synthetic(2, 2, 20, 2000, 1, 0.0, rng_seed=0)
        plan = make_folds(ds, 5, rng_seed=0)
        for d in range(2):
            assert [plan.fold_indices(d, f).size for f in range(5)] == [400] * 5

    def test_single_fold(self):
        ds = gen_synthetic(2, 2, 20, 37, 1, 0.0, rng_seed=0)
        plan = make_folds(ds, 1)
        assert plan.fold_indices(0, 0).size == 37

    @pytest.mark.parametrize("n,k,K", [(103, 5, 2), (50, 3, 3), (17, 4, 2)])
    def test_partition_and_stratification(self, n, k, K):
        ds = gen_synthetic(2, K, 30, n, 1, 0.0, rng_seed=3)
        plan = make_folds(ds, k, rng_seed=1)
        for d, dom in enumerate(ds):
            folds = [plan.fold_indices(d, f) for f in range(k)]
            together = np.sort(np.concatenate(folds))
            np.testing.assert_array_equal(together, np.arange(n))
            sizes = [f.size for f in folds]
            assert max(sizes) - min(sizes) <= 1
            y = dom.labeled.y
            for f in folds:
                for c in range(K):
                    expected = (y == c).sum() * f.size / n
                    assert abs((y[f] == c).sum() - expected) <= 1

    def test_deterministic(self):
        ds = gen_synthetic(2, 2, 20, 50, 1, 0.0, rng_seed=0)
        a, b = make_folds(ds, 5, 4), make_folds(ds, 5, 4)
        for x, y in zip(a.assignments, b.assignments):
            np.testing.assert_array_equal(x, y)

    def test_too_few(self):
        ds = gen_synthetic(2, 2, 20, 3, 1, 0.0, rng_seed=0)
        with pytest.raises(DataError):
            make_folds(ds, 5)

    def test_split_views(self):
        ds = gen_synthetic(2, 2, 20, 50, 5, 0.0, rng_seed=0)
        plan = make_folds(ds, 5, 0)
        view = plan.split(ds, 2)
        for v in view:
            assert len(v.labeled) == 30 and len(v.validation) == 10 and len(v.test) == 10


class TestSynthetic:
    def test_shapes_and_counts(self):
        ds = gen_synthetic(3, 2, 50, 20, 30, 1.0, rng_seed=0, test_per_domain=7)
        assert len(ds) == 3
        for d in ds:
            assert d.labeled.x.shape == (20, 50)
            assert d.unlabeled.shape == (30, 50)
            assert len(d.test) == 7
            assert d.labeled.x.min() >= 0
            assert np.all(d.labeled.x.data == np.round(d.labeled.x.data))
            assert np.bincount(d.labeled.y).tolist() == [10, 10]

    def test_deterministic(self):
        a = gen_synthetic(2, 2, 30, 10, 10, 2.0, rng_seed=5)
        b = gen_synthetic(2, 2, 30, 10, 10, 2.0, rng_seed=5)
        for x, y in zip(a, b):
            assert (x.labeled.x != y.labeled.x).nnz == 0
            assert (x.unlabeled != y.unlabeled).nnz == 0

    def test_no_shift_means_no_domain_signal(self):
        ds = gen_synthetic(4, 2, 100, 10, 500, 0.0, rng_seed=0)
        assert abs(domain_probe_accuracy(ds) - 0.25) < 0.05

    def test_large_shift_is_separable(self):
        ds = gen_synthetic(4, 2, 100, 10, 500, 5.0, rng_seed=0)
        assert domain_probe_accuracy(ds) > 0.9

    def test_class_signal_transfers_across_domains(self):
        ds = gen_synthetic(2, 2, 100, 400, 1, 0.0, rng_seed=0)
        clf = LogisticRegression(max_iter=2000).fit(ds[0].labeled.x, ds[0].labeled.y)
        assert clf.score(ds[1].labeled.x, ds[1].labeled.y) > 0.8

    def test_bad_parameters(self):
        with pytest.raises(ValueError):
            gen_synthetic(0, 2, 10, 1, 1, 0.0)
        with pytest.raises(ValueError):
            gen_synthetic(2, 2, 10, 1, 1, -1.0)
