import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsar import sparse_core as sc
from hsar import weights as wts


class TestRookGrid:
    def test_single_cell(self):
        sw = wts.rook_grid(1, 1)
        assert sw.W.nnz == 0 and sw.has_islands

    def test_three_by_three_counts(self):
        W = wts.rook_grid(3, 3, normalize=False).W.to_dense()
        counts = W.sum(axis=1).reshape(3, 3)
        np.testing.assert_array_equal(counts, [[2, 3, 2], [3, 4, 3], [2, 3, 2]])

    def test_three_by_three_normalized(self):
        W = wts.rook_grid(3, 3).W.to_dense()
        np.testing.assert_array_equal(W[0][W[0] > 0], [0.5, 0.5])
        np.testing.assert_allclose(W[4][W[4] > 0], 0.25)

    def test_large_lattice(self):
        sw = wts.rook_grid(71, 71)
        assert sw.n == 5041
        row_nnz = np.bincount(sw.W.row_idx, minlength=sw.n)
        assert set(np.unique(row_nnz)) == {2, 3, 4}
        assert sw.grid_hint == (71, 71)
        assert sw.rho_hi == pytest.approx(1 - 1e-6)

    @given(st.integers(1, 15), st.integers(1, 15))
    def test_structure(self, r, c):
        sw = wts.rook_grid(r, c, normalize=False)
        W = sw.W.to_dense()
        assert sw.W.nnz == 2 * (r * (c - 1) + c * (r - 1))
        np.testing.assert_array_equal(W, W.T)
        assert np.all(np.diag(W) == 0)
        n = sw.W
        norm = wts.row_normalize(n) if r * c > 1 else None
        if norm is not None:
            sums = norm.W.to_dense().sum(axis=1)
            assert np.all(np.abs(sums - 1) <= 1e-12)

    def test_adjacency_is_rook(self):
        W = wts.rook_grid(4, 5, normalize=False).W.to_dense()
        for i in range(4):
            for j in range(5):
                nb = {(i + a, j + b) for a, b in ((1, 0), (-1, 0), (0, 1), (0, -1))
                      if 0 <= i + a < 4 and 0 <= j + b < 5}
                got = {divmod(k, 5) for k in np.flatnonzero(W[i * 5 + j])}
                assert got == nb


class TestRowNormalize:
    def test_two_cycle(self):
        W = sc.from_dense(np.array([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_array_equal(wts.row_normalize(W).W.to_dense(), W.to_dense())

    def test_row_scaling(self):
        W = sc.from_dense(np.array([[0, 2.0, 2.0], [1.0, 0, 0], [1.0, 0, 0]]))
        np.testing.assert_array_equal(wts.row_normalize(W).W.to_dense()[0], [0, 0.5, 0.5])

    def test_island_warns(self):
        W = sc.from_dense(np.array([[0, 1.0, 0], [1.0, 0, 0], [0, 0, 0]]))
        with pytest.warns(UserWarning):
            sw = wts.row_normalize(W)
        assert sw.has_islands
        np.testing.assert_array_equal(sw.W.to_dense()[2], 0)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            wts.row_normalize(sc.from_dense(np.array([[0, -1.0], [1.0, 0]])))

    def test_diagonal_rejected(self):
        with pytest.raises(ValueError):
            wts.row_normalize(sc.from_dense(np.array([[1.0, 1.0], [1.0, 0]])))

    def test_spectral_radius(self):
        sw = wts.rook_grid(9, 7)
        lo, hi = wts.power_extremes(sw.W)
        assert hi <= 1 + 1e-6 and lo >= -1 - 1e-6


class TestInterval:
    def test_two_cycle(self):
        sw = wts.row_normalize(sc.from_dense(np.array([[0.0, 1.0], [1.0, 0.0]])))
        for method in ("exact_dense", "extremal_iterative", "conservative"):
            lo, hi = wts.rho_interval(sw, method)
            assert lo == pytest.approx(-1 + 1e-6, abs=1e-9)
            assert hi == pytest.approx(1 - 1e-6, abs=1e-9)

    def test_conservative(self):
        assert wts.rho_interval(wts.rook_grid(5, 5), "conservative") == (-0.999999, 0.999999)

    def test_conservative_needs_row(self):
        with pytest.raises(ValueError):
            wts.rho_interval(wts.rook_grid(3, 3, normalize=False), "conservative")

    def test_extremal_vs_dense(self):
        sw = wts.rook_grid(10, 10)
        lam_min, lam_max = wts.power_extremes(sw.W)
        eig = np.linalg.eigvals(sw.W.to_dense()).real
        assert abs(lam_min - eig.min()) <= 1e-4
        assert abs(lam_max - eig.max()) <= 1e-4

    def test_unnormalized_interval(self):
        sw = wts.rook_grid(6, 6, normalize=False)
        eig = np.linalg.eigvalsh(sw.W.to_dense())
        lo, hi = sw.rho_lo, sw.rho_hi
        assert lo == pytest.approx(1 / eig.min() + 1e-6, abs=1e-5)
        assert hi == pytest.approx(1 / eig.max() - 1e-6, abs=1e-5)
        A = np.eye(36) - hi * sw.W.to_dense()
        assert np.linalg.eigvalsh(0.5 * (A + A.T)).min() > 0

    def test_dense_guard(self):
        with pytest.raises(ValueError):
            wts.rho_interval(wts.rook_grid(45, 45), "exact_dense")

    @settings(max_examples=10, deadline=None)
    @given(st.integers(2, 9), st.integers(2, 9))
    def test_interval_contains_zero(self, r, c):
        for method in ("exact_dense", "extremal_iterative"):
            lo, hi = wts.rho_interval(wts.rook_grid(r, c), method)
            assert lo < 0 < hi


class TestIO:
    def test_neighbor_list_round_trip(self, tmp_path):
        W = wts.rook_grid(4, 3, normalize=False).W
        path = tmp_path / "w.nb"
        wts.write_neighbor_list(path, W)
        np.testing.assert_array_equal(wts.read_neighbor_list(path).to_dense(), W.to_dense())

    def test_neighbor_list_tokens(self, tmp_path):
        path = tmp_path / "w.txt"
        path.write_text("# comment\na: b c\nb: a\n\nc: a\n")
        W = wts.read_neighbor_list(path).to_dense()
        np.testing.assert_array_equal(W, [[0, 1, 1], [1, 0, 0], [1, 0, 0]])

    def test_neighbor_list_unknown_id(self, tmp_path):
        path = tmp_path / "w.txt"
        path.write_text("1: 2\n2: 3\n")
        with pytest.raises(ValueError, match="unknown neighbour"):
            wts.read_neighbor_list(path)

    def test_load_matrix_market(self, tmp_path):
        W = wts.rook_grid(3, 4, normalize=False).W
        path = tmp_path / "w.mtx"
        sc.write_matrix_market(path, W)
        sw = wts.load_weights(path)
        assert sw.normalization == "row"
        np.testing.assert_allclose(sw.W.to_dense(), wts.rook_grid(3, 4).W.to_dense())

    def test_load_neighbor_list_island(self, tmp_path):
        path = tmp_path / "w.txt"
        path.write_text("0: 1\n1: 0\n2:\n")
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            sw = wts.load_weights(path)
        assert sw.has_islands and rec
