import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cradle.data import (
    Dataset,
    DataError,
    ExpressionMatrix,
    PerturbationSet,
    Split,
    library_sizes,
    load_counts,
    load_dataset,
    load_perturbations,
    split_ood_combinations,
    split_random,
    write_counts,
    write_dataset,
)


class TestCounts:
    def test_dense_csv(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("1,0,2\n0,5,0\n")
        np.testing.assert_array_equal(load_counts(p).counts, [[1, 0, 2], [0, 5, 0]])

    def test_dense_csv_with_header(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("g1,g2\n3,4\n")
        m = load_counts(p)
        assert m.gene_ids == ["g1", "g2"]
        np.testing.assert_array_equal(m.counts, [[3, 4]])

    def test_matrix_market_triplets(self, tmp_path):
        p = tmp_path / "c.mtx"
        p.write_text("%%MatrixMarket matrix coordinate integer general\n% note\n2 3 2\n1 1 4\n2 3 7\n")
        np.testing.assert_array_equal(load_counts(p).counts, [[4, 0, 0], [0, 0, 7]])

    @pytest.mark.parametrize("body,needle", [
        ("1,0\n-1,2\n", "line 2, column 1: negative"),
        ("1,0\n1.5,2\n", "line 2, column 1: non-integer"),
        ("1,0\n1,x\n", "line 2, column 2"),
        ("1,0\n1\n", "line 2: expected 2 fields"),
    ])
    def test_csv_errors_carry_line_numbers(self, tmp_path, body, needle):
        p = tmp_path / "c.csv"
        p.write_text(body)
        with pytest.raises(DataError, match=needle):
            load_counts(p)

    def test_mtx_errors(self, tmp_path):
        p = tmp_path / "c.mtx"
        p.write_text("%%MatrixMarket matrix coordinate integer general\n2 2 1\n3 1 4\n")
        with pytest.raises(DataError, match="line 3: index"):
            load_counts(p)
        p.write_text("no header\n")
        with pytest.raises(DataError, match="line 1"):
            load_counts(p)

    @given(arrays(np.int64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.integers(0, 10**6)))
    def test_round_trip_both_formats(self, tmp_path_factory, counts):
        d = tmp_path_factory.mktemp("rt")
        m = ExpressionMatrix(counts)
        for name in ("c.csv", "c.mtx"):
            write_counts(m, d / name)
            back = load_counts(d / name)
            assert back.counts.shape == counts.shape
            np.testing.assert_array_equal(back.counts, counts)

    def test_matrix_market_agrees_with_scipy(self, tmp_path):
        from scipy import io, sparse
        counts = np.random.default_rng(0).poisson(0.7, (9, 5))
        write_counts(ExpressionMatrix(counts), tmp_path / "ours.mtx")
        np.testing.assert_array_equal(io.mmread(tmp_path / "ours.mtx").toarray(), counts)
        io.mmwrite(tmp_path / "theirs.mtx", sparse.coo_matrix(counts), field="integer")
        np.testing.assert_array_equal(load_counts(tmp_path / "theirs.mtx").counts, counts)

    def test_library_sizes(self):
        np.testing.assert_array_equal(library_sizes(ExpressionMatrix([[1, 0, 2], [0, 5, 0]])), [3, 5])
        np.testing.assert_array_equal(library_sizes(ExpressionMatrix(np.eye(2, dtype=int))), [1, 1])
        with pytest.raises(DataError, match="zero library"):
            library_sizes(ExpressionMatrix([[1, 1, 0], [0, 0, 0]]))

    def test_matrix_validation(self):
        with pytest.raises(DataError):
            ExpressionMatrix([[1, -1]])
        with pytest.raises(DataError):
            ExpressionMatrix([[0.5, 1.0]])
        with pytest.raises(DataError):
            ExpressionMatrix([[1, 2]], gene_ids=["a", "a"])


class TestPerturbations:
    def test_multi_hot(self):
        ps = PerturbationSet.from_labels(["A", "A+B", "non-targeting"], ["A", "B", "non-targeting"])
        np.testing.assert_array_equal(ps.assignments, [[1, 0, 0], [1, 1, 0], [0, 0, 1]])
        assert ps.control_index == 2

    def test_order_insensitive(self):
        reg = ["A", "B"]
        np.testing.assert_array_equal(PerturbationSet.from_labels(["B+A"], reg).assignments,
                                      PerturbationSet.from_labels(["A+B"], reg).assignments)
        assert PerturbationSet.from_labels(["B+A"], reg).labels() == ["A+B"]

    @pytest.mark.parametrize("bad", ["", "A+", "A+A", "C"])
    def test_invalid_labels(self, bad):
        with pytest.raises(DataError):
            PerturbationSet.from_labels(["A", bad], ["A", "B"])

    def test_file_and_pairing(self, tmp_path):
        (tmp_path / "perts.csv").write_text("cell_id,treatment\nc1,A\nc2,B+A\n")
        ps, ids = load_perturbations(tmp_path / "perts.csv")
        assert ids == ["c1", "c2"] and ps.treatment_names == ["A", "B"]
        with pytest.raises(DataError, match="do not match"):
            Dataset(ExpressionMatrix(np.ones((3, 2), dtype=int)), ps)

    def test_dataset_round_trip(self, tmp_path):
        ps = PerturbationSet.from_labels(["A", "non-targeting", "A+B"])
        em = ExpressionMatrix([[1, 2], [3, 0], [0, 9]], ["g0", "MT-1"], ["x", "y", "z"], is_mito=[False, True])
        write_dataset(Dataset(em, ps, [False, True, False]), tmp_path)
        back = load_dataset(tmp_path)
        np.testing.assert_array_equal(back.expression.counts, em.counts)
        assert back.expression.cell_ids == ["x", "y", "z"]
        assert back.expression.is_mito.tolist() == [False, True]
        assert back.perturbations.labels() == ps.labels()
        assert back.doublets.tolist() == [False, True, False]


def combo_set(n_per=3):
    labels = ["non-targeting", "A", "B", "C", "D", "A+B", "A+C", "B+D", "C+D"]
    return PerturbationSet.from_labels([lab for lab in labels for _ in range(n_per)])


class TestSplits:
    def test_random_sizes(self):
        s = split_random(10, (0.8, 0.1, 0.1), 0)
        assert (len(s.train_indices), len(s.val_indices), len(s.test_indices)) == (8, 1, 1)

    def test_random_thirds(self):
        s = split_random(3, (1 / 3, 1 / 3, 1 / 3), 0)
        sizes = [len(s.train_indices), len(s.val_indices), len(s.test_indices)]
        assert sum(sizes) == 3 and max(sizes) - min(sizes) <= 1

    @given(st.integers(1, 500), st.floats(0.05, 0.9), st.floats(0.05, 0.9), st.integers(0, 2**31))
    def test_random_partition_properties(self, n, f1, f2, seed):
        if f1 + f2 >= 0.95:
            return
        fr = (f1, f2, 1 - f1 - f2)
        s = split_random(n, fr, seed)
        parts = [s.train_indices, s.val_indices, s.test_indices]
        assert sorted(sum(parts, [])) == list(range(n))
        for p, f in zip(parts, fr):
            assert abs(len(p) - f * n) <= 1
        assert split_random(n, fr, seed).to_json() == s.to_json()

    def test_random_rejects_bad_fractions(self):
        with pytest.raises(ValueError):
            split_random(10, (0.5, 0.5, 0.1))
        with pytest.raises(ValueError):
            split_random(10, (1.0, 0.0, 0.0))

    def test_ood_quarter(self):
        ps = combo_set()
        s = split_ood_combinations(ps, 0.25, seed=1)
        assert len(s.held_out_treatments) == 1
        held = s.held_out_treatments[0]
        labels = ps.labels()
        assert sorted(s.test_indices) == [i for i, lab in enumerate(labels) if lab == held]
        assert all(labels[i] != held for i in s.train_indices + s.val_indices)

    def test_ood_nearly_all(self):
        ps = combo_set()
        s = split_ood_combinations(ps, 0.999, seed=0)
        assert len(s.held_out_treatments) == 4
        labels = ps.labels()
        assert all("+" not in labels[i] for i in s.train_indices)

    @given(st.integers(0, 10**6), st.floats(0.01, 0.99))
    def test_ood_never_leaks(self, seed, fraction):
        ps = combo_set(2)
        s = split_ood_combinations(ps, fraction, seed)
        assert s.to_json() == split_ood_combinations(ps, fraction, seed).to_json()
        held_rows = {tuple(PerturbationSet.from_labels([h], ps.treatment_names).assignments[0])
                     for h in s.held_out_treatments}
        for i in s.train_indices + s.val_indices:
            assert tuple(ps.assignments[i]) not in held_rows

    def test_ood_needs_combinations(self):
        with pytest.raises(DataError, match="split_random"):
            split_ood_combinations(PerturbationSet.from_labels(["A", "B"]), 0.25)

    def test_json_round_trip(self, tmp_path):
        s = split_ood_combinations(combo_set(), 0.5, seed=3)
        s.save(tmp_path / "split.json")
        assert Split.load(tmp_path / "split.json").to_json() == s.to_json()

    def test_overlap_rejected(self):
        with pytest.raises(DataError):
            Split([0, 1], [1], [2])
