import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from hsar import sparse_core as sc
from hsar.errors import MissingDataPresent
from hsar.model import (
    Dataset,
    ModelKind,
    Params,
    SystemStructure,
    build_A,
    build_AtA,
    complete_loglik,
    mean_o,
    working_state,
    xtilde_o,
)
from hsar.weights import rook_grid, row_normalize


def two_cycle():
    return row_normalize(sc.from_dense(np.array([[0.0, 1.0], [1.0, 0.0]])))


def dense_complete_loglik(kind, p, W, y, X):
    n = y.size
    A = np.eye(n) - p.rho * W
    V = np.eye(n) + p.theta * np.linalg.inv(A.T @ A)
    mu = X @ p.beta if kind == "hsem" else np.linalg.solve(A, X @ p.beta)
    return multivariate_normal(mu, p.omega * V).logpdf(y)


class TestDataset:
    def test_partition(self):
        y = np.array([1.0, np.nan, 3.0, np.nan, 5.0])
        ds = Dataset.from_arrays(y, np.ones((5, 1)))
        np.testing.assert_array_equal(ds.obs_idx, [0, 2, 4])
        np.testing.assert_array_equal(ds.mis_idx, [1, 3])
        np.testing.assert_array_equal(ds.y_o, [1, 3, 5])
        assert not ds.complete

    def test_mask_blanks_missing(self):
        ds = Dataset.from_arrays([1.0, 2.0, 3.0], np.ones(3), mask=[True, False, True])
        assert np.isnan(ds.y[1])
        with pytest.raises(MissingDataPresent):
            ds.require_complete()

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            Dataset.from_arrays([1.0, 2.0], np.ones((3, 1)))
        with pytest.raises(ValueError):
            Dataset.from_arrays([1.0, np.nan], np.ones(2), mask=[True, True])
        with pytest.raises(ValueError):
            Dataset.from_arrays([1.0, 2.0], np.array([1.0, np.inf]))

    def test_identifiability(self):
        ds = Dataset.from_arrays([1.0, 2.0, 3.0, np.nan], np.ones((4, 1)))
        with pytest.raises(ValueError):
            ds.check_identifiable()
        Dataset.from_arrays(np.arange(4.0), np.ones((4, 1))).check_identifiable()


class TestParams:
    def test_variances(self):
        p = Params.from_variances([1.0], 0.3, 2.0, 1.0)
        assert p.omega == 2.0 and p.theta == 0.5
        assert p.sigma2_eps == 2.0 and p.sigma2_e == 1.0

    @pytest.mark.parametrize("omega,theta", [(0.0, 1.0), (1.0, -0.1)])
    def test_invalid(self, omega, theta):
        with pytest.raises(ValueError):
            Params([1.0], 0.0, omega, theta)


class TestOperator:
    def test_rho_zero(self):
        np.testing.assert_array_equal(build_A(rook_grid(3, 3), 0.0).to_dense(), np.eye(9))

    def test_two_cycle(self):
        np.testing.assert_array_equal(build_A(two_cycle(), 0.5).to_dense(),
                                      [[1, -0.5], [-0.5, 1]])

    def test_large_lattice_nnz(self):
        sw = rook_grid(71, 71)
        assert build_A(sw, 0.8).nnz == sw.n + sw.W.nnz

    def test_outside_interval(self):
        with pytest.raises(ValueError):
            build_A(rook_grid(3, 3), 1.0)

    def test_structure_values(self):
        sw = rook_grid(5, 4)
        ss = SystemStructure(sw.W)
        for rho in (-0.9, 0.0, 0.3, 0.95):
            np.testing.assert_allclose(ss.AtA(rho).to_dense(), build_AtA(sw, rho).to_dense(),
                                       atol=1e-15)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 7), st.integers(2, 7), st.floats(-0.99, 0.99), st.floats(0.0, 50.0))
    def test_v_spd(self, r, c, rho, theta):
        sw = rook_grid(r, c)
        ata = build_AtA(sw, rho).to_dense()
        V = np.eye(r * c) + theta * np.linalg.inv(ata)
        np.testing.assert_allclose(V, V.T, atol=1e-8 * np.abs(V).max())
        assert np.linalg.eigvalsh(0.5 * (V + V.T)).min() > 0


class TestXtilde:
    def test_hsem_rows(self):
        sw = rook_grid(4, 4)
        X = np.random.default_rng(0).standard_normal((16, 2))
        obs = np.array([0, 3, 7, 12])
        st_ = working_state(sw, 0.7)
        np.testing.assert_array_equal(xtilde_o("hsem", st_, X, obs), X[obs])

    def test_hsam_rho_zero(self):
        sw = rook_grid(4, 4)
        X = np.random.default_rng(1).standard_normal((16, 2))
        obs = np.arange(0, 16, 3)
        st_ = working_state(sw, 0.0)
        np.testing.assert_array_equal(xtilde_o("hsam", st_, X, obs),
                                      xtilde_o("hsem", st_, X, obs))

    def test_hsam_dense_oracle(self):
        sw = rook_grid(8, 8)
        rng = np.random.default_rng(2)
        X = np.column_stack([np.ones(64), rng.standard_normal(64)])
        obs = np.sort(rng.choice(64, 40, replace=False))
        st_ = working_state(sw, 0.6)
        A = np.eye(64) - 0.6 * sw.W.to_dense()
        np.testing.assert_allclose(xtilde_o("hsam", st_, X, obs), np.linalg.solve(A, X)[obs],
                                   atol=1e-8)

    def test_mean(self):
        sw = rook_grid(3, 3)
        st_ = working_state(sw, 0.4)
        obs = np.array([1, 4, 8])
        xtilde_o("hsem", st_, np.ones((9, 1)), obs)
        np.testing.assert_array_equal(mean_o("hsem", [3.0], st_), [3.0, 3.0, 3.0])
        np.testing.assert_array_equal(mean_o("hsem", [0.0], st_), 0.0)

    def test_hsam_mean_dense(self):
        sw = rook_grid(5, 5)
        X = np.column_stack([np.ones(25), np.arange(25.0)])
        obs = np.arange(0, 25, 2)
        st_ = working_state(sw, -0.4)
        xtilde_o("hsam", st_, X, obs)
        A = np.eye(25) + 0.4 * sw.W.to_dense()
        np.testing.assert_allclose(mean_o("hsam", [1.0, 0.5], st_),
                                   np.linalg.solve(A, X @ [1.0, 0.5])[obs], atol=1e-10)

    def test_covariance_shared(self):
        sw = rook_grid(5, 5)
        obs = np.arange(0, 25, 2)
        a = working_state(sw, 0.5, 1.5, obs)
        b = working_state(sw, 0.5, 1.5, obs)
        assert a.F_obs.logdet == b.F_obs.logdet
        assert a.stamp == (0.5, 1.5)


class TestCompleteLoglik:
    def test_theta_zero_iid(self):
        sw = rook_grid(4, 4)
        rng = np.random.default_rng(3)
        X = np.column_stack([np.ones(16), rng.standard_normal(16)])
        y = rng.standard_normal(16)
        p = Params([0.2, -0.1], 0.5, 1.7, 0.0)
        r = y - X @ p.beta
        ref = -0.5 * 16 * math.log(2 * math.pi * 1.7) - 0.5 * (r @ r) / 1.7
        assert complete_loglik("hsem", p, sw, y, X) == pytest.approx(ref, abs=1e-10)

    def test_rho_zero_scaled_variance(self):
        sw = rook_grid(3, 4)
        rng = np.random.default_rng(4)
        X = np.ones((12, 1))
        y = rng.standard_normal(12)
        p = Params([0.3], 0.0, 0.8, 2.5)
        s2 = 0.8 * 3.5
        r = y - 0.3
        ref = -0.5 * 12 * math.log(2 * math.pi * s2) - 0.5 * (r @ r) / s2
        assert complete_loglik("hsem", p, sw, y, X) == pytest.approx(ref, abs=1e-10)

    @pytest.mark.parametrize("kind", ["hsem", "hsam"])
    def test_four_units_dense(self, kind):
        sw = rook_grid(2, 2)
        rng = np.random.default_rng(5)
        X = np.column_stack([np.ones(4), rng.standard_normal(4)])
        y = rng.standard_normal(4)
        p = Params([0.5, 1.0], 0.6, 1.3, 0.9)
        ref = dense_complete_loglik(kind, p, sw.W.to_dense(), y, X)
        assert complete_loglik(kind, p, sw, y, X) == pytest.approx(ref, abs=1e-9)

    @settings(max_examples=15, deadline=None)
    @given(st.sampled_from(["hsem", "hsam"]), st.floats(-0.95, 0.95), st.floats(0.0, 20.0),
           st.floats(0.1, 5.0), st.integers(0, 2**31 - 1))
    def test_dense_oracle(self, kind, rho, theta, omega, seed):
        sw = rook_grid(5, 6)
        rng = np.random.default_rng(seed)
        X = np.column_stack([np.ones(30), rng.standard_normal(30)])
        y = rng.standard_normal(30)
        p = Params(rng.standard_normal(2), rho, omega, theta)
        ref = dense_complete_loglik(kind, p, sw.W.to_dense(), y, X)
        assert complete_loglik(kind, p, sw, y, X) == pytest.approx(ref, abs=1e-8, rel=1e-10)

    def test_missing_rejected(self):
        sw = rook_grid(2, 2)
        with pytest.raises(MissingDataPresent):
            complete_loglik("hsem", Params([0.0], 0.1, 1.0, 1.0), sw,
                            [1.0, np.nan, 0.0, 0.0], np.ones((4, 1)))

    def test_kind_parse(self):
        assert ModelKind.parse("HSAM") is ModelKind.HSAM
        with pytest.raises(ValueError):
            ModelKind.parse("sar")
