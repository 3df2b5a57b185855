import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsar import cholesky as ch
from hsar import ordering
from hsar import sparse_core as sc
from hsar.errors import NotPositiveDefinite
from hsar.model import build_AtA
from hsar.weights import rook_grid
from oracles import random_spd


def reconstruction_error(f, s):
    L = f.L.to_dense()
    p = f.perm
    return np.max(np.abs(L @ L.T - s[np.ix_(p, p)]))


def grid_ata(side, rho=0.8):
    return build_AtA(rook_grid(side, side), rho)


class TestOrdering:
    def test_one_by_one(self):
        np.testing.assert_array_equal(ch.symbolic_order(sc.identity(1)), [0])

    def test_diagonal(self):
        d = sc.diag(np.arange(1.0, 8.0))
        np.testing.assert_array_equal(ch.symbolic_order(d), np.arange(7))

    @pytest.mark.parametrize("method", ["amd", "nd", "natural"])
    def test_grid_fill_bounded(self, method):
        s = grid_ata(5)
        perm = ch.symbolic_order(s, method, grid=(5, 5))
        assert sorted(perm) == list(range(25))
        f = ch.factor(s, perm)
        assert f.symbolic.nnz_l <= 25 * 26 // 2

    def test_amd_beats_natural_on_grid(self):
        s = grid_ata(20)
        nat = ch.analyze(s, ordering.natural(400)).nnz_l
        assert ch.analyze(s, ordering.amd(s)).nnz_l < nat
        assert ch.analyze(s, ordering.nested_dissection(s, (20, 20))).nnz_l < nat

    def test_deterministic(self):
        s = grid_ata(9)
        np.testing.assert_array_equal(ordering.amd(s), ordering.amd(s))

    def test_non_square(self):
        with pytest.raises(ValueError):
            ch.symbolic_order(sc.from_dense(np.ones((2, 3))))

    def test_nd_needs_grid(self):
        with pytest.raises(ValueError):
            ch.symbolic_order(grid_ata(3), "nd")


class TestFactor:
    def test_identity(self):
        f = ch.factor(sc.identity(3))
        np.testing.assert_array_equal(f.L.to_dense(), np.eye(3))
        assert f.logdet == 0.0

    def test_two_by_two(self):
        f = ch.factor(sc.from_dense(np.array([[4.0, 2.0], [2.0, 3.0]])), perm=[0, 1])
        np.testing.assert_allclose(f.L.to_dense(), [[2, 0], [1, math.sqrt(2)]], rtol=1e-15)
        assert f.logdet == pytest.approx(math.log(8), rel=1e-15)

    def test_grid_logdet_dense(self):
        s = grid_ata(10)
        f = ch.factor(s)
        c = np.linalg.cholesky(s.to_dense())
        assert abs(f.logdet - 2 * np.sum(np.log(np.diag(c)))) <= 1e-8
        assert f.logdet == pytest.approx(2 * np.sum(np.log(f.diagonal())), rel=1e-15)
        assert np.all(f.diagonal() > 0)

    def test_not_positive_definite(self):
        s = sc.from_dense(np.array([[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
        with pytest.raises(NotPositiveDefinite) as info:
            ch.factor(s, perm=[0, 1, 2])
        assert info.value.pivot == 1

    def test_values_reuse_symbolic(self):
        st_ = rook_grid(6, 6)
        from hsar.model import SystemStructure

        ss = SystemStructure(st_.W)
        sym = ss.symbolic()
        for rho in (-0.5, 0.0, 0.7):
            f = ch.factor_values(sym, ss.ata_values(rho))
            dense = ss.AtA(rho).to_dense()
            assert f.logdet == pytest.approx(np.linalg.slogdet(dense)[1], abs=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 60), st.integers(0, 2**31 - 1))
    def test_reconstruction_and_logdet(self, n, seed):
        s = random_spd(np.random.default_rng(seed), n)
        f = ch.factor(sc.from_dense(s))
        assert reconstruction_error(f, s) <= 1e-10 * np.max(np.abs(s))
        ld = np.sum(np.log(np.linalg.eigvalsh(s)))
        assert abs(f.logdet - ld) <= 1e-8 * max(1.0, abs(ld))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 40), st.integers(0, 2**31 - 1))
    def test_permutation_invariance(self, n, seed):
        s = sc.from_dense(random_spd(np.random.default_rng(seed), n))
        a = ch.factor(s, perm=ordering.natural(n)).logdet
        b = ch.factor(s, method="amd").logdet
        assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


class TestSolve:
    def test_identity(self):
        b = np.random.default_rng(0).standard_normal((4, 3))
        np.testing.assert_array_equal(ch.solve_spd(ch.factor(sc.identity(4)), b), b)

    def test_two_by_two(self):
        f = ch.factor(sc.from_dense(np.array([[4.0, 2.0], [2.0, 3.0]])))
        np.testing.assert_allclose(ch.solve_spd(f, np.array([[1.0], [0.0]]))[:, 0],
                                   [0.375, -0.25], rtol=1e-15)

    def test_dense_oracle(self):
        rng = np.random.default_rng(1)
        s = random_spd(rng, 30, 0.3)
        b = rng.standard_normal((30, 5))
        x = ch.solve_spd(ch.factor(sc.from_dense(s)), b)
        np.testing.assert_allclose(x, np.linalg.solve(s, b), rtol=1e-9, atol=1e-9)
        assert np.max(np.abs(s @ x - b)) <= 1e-8 * np.max(np.abs(b))

    def test_vector_and_mismatch(self):
        f = ch.factor(sc.identity(3))
        assert ch.solve_spd(f, np.ones(3)).shape == (3,)
        with pytest.raises(ValueError):
            ch.solve_spd(f, np.ones(4))


class TestRankOne:
    def test_zero_vector(self):
        f = ch.factor(sc.identity(2))
        assert ch.rank1_update(f, np.zeros(2)) is f

    def test_diagonal_update(self):
        f = ch.rank1_update(ch.factor(sc.identity(2)), np.array([1.0, 0.0]))
        np.testing.assert_allclose(f.L.to_dense(), np.diag([math.sqrt(2), 1.0]), rtol=1e-15)
        assert f.logdet == pytest.approx(math.log(2), rel=1e-15)

    def test_update_then_downdate(self):
        rng = np.random.default_rng(3)
        s = random_spd(rng, 25, 0.2)
        f = ch.factor(sc.from_dense(s))
        k = int(np.argmin(f.lp[1:] - f.lp[:-1] > 0))
        col = f.li[f.lp[k]:f.lp[k + 1]]
        v = np.zeros(25)
        v[col] = rng.standard_normal(col.size)
        up = ch.rank1_update(f, v)
        p = f.perm
        vo = np.zeros(25)
        vo[p] = v
        L = up.L.to_dense()
        np.testing.assert_allclose(L @ L.T, (s + np.outer(vo, vo))[np.ix_(p, p)], atol=1e-10)
        back = ch.rank1_update(up, v, downdate=True)
        assert back.logdet == pytest.approx(f.logdet, abs=1e-10)

    def test_downdate_loses_definiteness(self):
        f = ch.factor(sc.identity(2))
        with pytest.raises(NotPositiveDefinite):
            ch.rank1_update(f, np.array([1.0, 0.0]), downdate=True)

    def test_unit_updates_match_refactor(self):
        s = grid_ata(8, 0.6)
        f = ch.factor(s)
        theta = 1.7
        obs = np.array([0, 5, 9, 20, 33, 63])
        g = f
        for i in obs:
            v = np.zeros(64)
            v[f.symbolic.pinv[i]] = math.sqrt(theta)
            g = ch.rank1_update(g, v)
        d = s.to_dense()
        d[obs, obs] += theta
        assert abs(g.logdet - ch.factor(sc.from_dense(d), f.perm).logdet) <= 1e-10


class TestObservedSystem:
    def test_theta_zero(self):
        s = grid_ata(6)
        f = ch.factor(s)
        assert ch.factor_observed_system(f, s, [1, 2, 3], 0.0).logdet == f.logdet

    def test_all_observed(self):
        s = grid_ata(7)
        f = ch.factor(s)
        g = ch.factor_observed_system(f, s, np.arange(49), 1.0)
        ref = np.linalg.slogdet(s.to_dense() + np.eye(49))[1]
        assert abs(g.logdet - ref) <= 1e-8

    def test_paths_agree(self):
        s = grid_ata(12)
        f = ch.factor(s)
        rng = np.random.default_rng(4)
        obs = np.sort(rng.choice(144, size=14, replace=False))
        up = ch.factor_observed_system(f, s, obs, 2.0, path="update")
        re = ch.factor_observed_system(f, s, obs, 2.0, path="refactor")
        assert abs(up.logdet - re.logdet) <= 1e-10
        b = rng.standard_normal((144, 3))
        np.testing.assert_allclose(ch.solve_spd(up, b), ch.solve_spd(re, b), rtol=1e-8, atol=1e-8)
        np.testing.assert_array_equal(re.perm, f.perm)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(3, 12), st.floats(0.01, 10.0), st.floats(0.02, 0.9),
           st.integers(0, 2**31 - 1))
    def test_paths_agree_property(self, side, theta, frac, seed):
        s = grid_ata(side, 0.5)
        f = ch.factor(s)
        n = side * side
        rng = np.random.default_rng(seed)
        obs = np.sort(rng.choice(n, size=max(1, int(frac * n)), replace=False))
        up = ch.factor_observed_system(f, None, obs, theta, path="update")
        re = ch.factor_observed_system(f, None, obs, theta, path="refactor")
        assert abs(up.logdet - re.logdet) <= 1e-10 * max(1.0, abs(re.logdet))

    def test_rejects_mismatched_pattern(self):
        f = ch.factor(grid_ata(4))
        with pytest.raises(ValueError):
            ch.factor_observed_system(f, sc.identity(16), [0], 1.0)
