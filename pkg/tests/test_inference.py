import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsar import inference as inf
from hsar.errors import NonFiniteLikelihood, SingularInformation
from hsar.estimator import FitOptions, Problem, fit
from oracles import dense_info_zeta, dense_parts, fitted, small_instance


class TestFiniteDifferences:
    def test_quadratic_exact(self):
        Q = np.array([[3.0, 0.4, -1.0], [0.4, 2.0, 0.3], [-1.0, 0.3, 5.0]])
        g = np.array([0.1, -2.0, 1.0])
        x0 = np.array([0.5, 2.0, 1.0])
        H, h = inf.fd_hessian(lambda x: 0.5 * x @ Q @ x + g @ x + 7.0, x0, rel_step=0.25)
        np.testing.assert_allclose(H, Q, rtol=0, atol=1e-9)
        np.testing.assert_array_equal(h, 0.25 * x0)
        # at the default step only roundoff (about eps |f| / h^2) remains
        H, h = inf.fd_hessian(lambda x: 0.5 * x @ Q @ x + g @ x + 7.0, x0)
        np.testing.assert_allclose(h, 1e-4 * x0)
        np.testing.assert_allclose(H, Q, rtol=0, atol=1e-5)

    @settings(max_examples=25)
    @given(st.lists(st.floats(-3, 3), min_size=6, max_size=6),
           st.lists(st.floats(0.1, 5), min_size=3, max_size=3))
    def test_quadratic_property(self, entries, x0):
        U = np.zeros((3, 3))
        U[np.triu_indices(3)] = entries
        Q = U + U.T
        H, _ = inf.fd_hessian(lambda x: 0.5 * x @ Q @ x, np.array(x0), rel_step=0.5)
        np.testing.assert_allclose(H, Q, rtol=0, atol=1e-9)

    def test_step_floor(self):
        _, h = inf.fd_hessian(lambda x: float(x @ x), np.array([0.0, 1e-6, 10.0]))
        np.testing.assert_allclose(h, [1e-7, 1e-7, 1e-3])

    def test_halves_near_domain_edge(self):
        def f(x):
            if x[0] <= 0:
                raise NonFiniteLikelihood("outside")
            return float(np.log(x[0]) ** 2 + x[1] ** 2)

        H, h = inf.fd_hessian(f, np.array([1e-3, 1.0]), rel_step=2.0, floor=1e-3)
        assert h[0] < 1e-3
        assert np.all(np.isfinite(H))

    def test_gives_up(self):
        def f(x):
            if np.any(x != 1.0):
                return np.nan
            return 0.0

        with pytest.raises(NonFiniteLikelihood):
            inf.fd_hessian(f, np.array([1.0]))

    def test_seam(self):
        sim, sw = small_instance("hsem", side=5, missing=0.2, seed=1)
        res = fitted("hsem", 0.2, 1.0, sim.dataset, sw)
        Q = np.diag([2.0, 3.0, 4.0])
        H = inf.observed_info_zeta("hsem", res, sim.dataset, sw,
                                   fd_step=0.5, func=lambda z: 0.5 * z @ Q @ z)
        np.testing.assert_allclose(H, Q, rtol=0, atol=1e-9)


class TestCovBeta:
    def test_theta_zero_ols(self):
        sim, sw = small_instance("hsem", side=8, missing=0.4, seed=2)
        ds = sim.dataset
        res = fitted("hsem", 0.4, 0.0, ds, sw)
        ref = res.omega * np.linalg.inv(ds.X_o.T @ ds.X_o)
        np.testing.assert_allclose(inf.cov_beta("hsem", res, ds, sw), ref, rtol=1e-12)

    @pytest.mark.parametrize("kind", ["hsem", "hsam"])
    def test_dense_oracle(self, kind):
        sim, sw = small_instance(kind, side=8, missing=0.4, seed=3)
        ds = sim.dataset
        res = fitted(kind, 0.55, 1.3, ds, sw)
        v, xt = dense_parts(kind, sw.W.to_dense(), ds.X, 0.55, 1.3, ds.obs_idx)
        ref = res.omega * np.linalg.inv(xt.T @ np.linalg.solve(v, xt))
        np.testing.assert_allclose(inf.cov_beta(kind, res, ds, sw), ref, rtol=1e-7)


class TestObservedInformation:
    @pytest.mark.parametrize("kind", ["hsem", "hsam"])
    def test_dense_hessian(self, kind):
        sim, sw = small_instance(kind, side=10, missing=0.3, seed=4, rho=0.6)
        ds = sim.dataset
        res = fit(kind, ds, sw)
        pr = Problem(kind, ds, sw)
        H, h = inf.fd_hessian(
            lambda z: -pr.loglik(z[0], z[1], z[2] / z[1], res.beta),
            np.array([res.rho, res.sigma2_eps, res.sigma2_e]),
        )
        info = inf.observed_info_zeta(kind, res, ds, sw)
        np.testing.assert_allclose(info, H, rtol=1e-12)
        ref = dense_info_zeta(kind, sw.W.to_dense(), ds.X, ds.y_o, ds.obs_idx, res.beta,
                              [res.rho, res.sigma2_eps, res.sigma2_e], h)
        assert np.max(np.abs(info - ref)) <= 1e-4 * np.max(np.abs(ref))

    def test_richardson(self):
        sim, sw = small_instance("hsem", side=12, missing=0.3, seed=8, rho=0.6)
        ds = sim.dataset
        res = fit("hsem", ds, sw)
        a = inf.observed_info_zeta("hsem", res, ds, sw, fd_step=1e-4)
        b = inf.observed_info_zeta("hsem", res, ds, sw, fd_step=5e-5)
        assert np.all(np.abs(a - b) <= 0.05 * np.abs(b) + 1e-8 * np.abs(b).max())
        np.testing.assert_array_equal(a, a.T)


class TestStandardErrors:
    def test_hsem_blocks(self):
        sim, sw = small_instance("hsem", side=12, missing=0.3, seed=6, rho=0.6)
        ds = sim.dataset
        res = fit("hsem", ds, sw, FitOptions(se=True))
        se = res.se
        assert not se.joint and se.cross_beta_rho is None
        assert se.info_pd
        np.testing.assert_allclose(se.se_beta, np.sqrt(np.diag(inf.cov_beta("hsem", res, ds, sw))),
                                   rtol=1e-10)
        np.testing.assert_allclose(se.se_zeta, np.sqrt(np.diag(np.linalg.inv(se.info_zeta))),
                                   rtol=1e-10)
        assert np.all(se.cov[:2, 2:] == 0)
        np.testing.assert_array_equal(inf.cross_beta_rho("hsem", res, ds, sw), 0.0)

    def test_hsam_cross_rho_zero(self):
        sim, sw = small_instance("hsam", side=8, missing=0.4, seed=7)
        ds = sim.dataset
        res = fitted("hsam", 0.0, 0.8, ds, sw)
        W = sw.W.to_dense()
        v, _ = dense_parts("hsam", W, ds.X, 0.0, 0.8, ds.obs_idx)
        ref = ds.X_o.T @ np.linalg.solve(v, (W @ ds.X)[ds.obs_idx] @ res.beta) / res.omega
        np.testing.assert_allclose(inf.cross_beta_rho("hsam", res, ds, sw), ref, rtol=1e-7)

    def test_hsam_cross_dense(self):
        sim, sw = small_instance("hsam", side=8, missing=0.4, seed=8)
        ds = sim.dataset
        rho = 0.65
        res = fitted("hsam", rho, 1.1, ds, sw)
        W = sw.W.to_dense()
        A = np.eye(64) - rho * W
        v, xt = dense_parts("hsam", W, ds.X, rho, 1.1, ds.obs_idx)
        d = np.linalg.solve(A, W @ np.linalg.solve(A, ds.X))[ds.obs_idx]
        ref = xt.T @ np.linalg.solve(v, d @ res.beta) / res.omega
        np.testing.assert_allclose(inf.cross_beta_rho("hsam", res, ds, sw), ref, rtol=1e-7)

    def test_hsam_joint_and_block(self):
        sim, sw = small_instance("hsam", side=12, missing=0.3, seed=9, rho=0.6)
        ds = sim.dataset
        res = fit("hsam", ds, sw)
        joint = inf.standard_errors("hsam", res, ds, sw)
        block = inf.standard_errors("hsam", res, ds, sw, joint=False)
        assert joint.joint and not block.joint
        k = res.beta.size
        info = np.zeros((k + 3, k + 3))
        info[:k, :k] = np.linalg.inv(inf.cov_beta("hsam", res, ds, sw))
        info[k:, k:] = joint.info_zeta
        info[:k, k] = info[k, :k] = joint.cross_beta_rho
        np.testing.assert_allclose(joint.cov, np.linalg.inv(info), rtol=1e-8)
        # the cross block only adds uncertainty
        assert joint.se_rho >= block.se_rho * (1 - 1e-12)

    def test_not_positive_definite(self, monkeypatch):
        sim, sw = small_instance("hsem", side=6, missing=0.2, seed=10)
        res = fitted("hsem", 0.3, 1.0, sim.dataset, sw)
        monkeypatch.setattr(inf, "_info_zeta",
                            lambda *a: (np.diag([1.0, -2.0, 3.0]), np.full(3, 1e-4)))
        with pytest.warns(UserWarning, match="not positive definite"):
            se = inf.standard_errors("hsem", res, sim.dataset, sw)
        assert not se.info_pd
        assert np.all(np.isnan(se.se_zeta)) and np.all(np.isfinite(se.se_beta))

    def test_singular(self, monkeypatch):
        sim, sw = small_instance("hsem", side=6, missing=0.2, seed=10)
        res = fitted("hsem", 0.3, 1.0, sim.dataset, sw)
        monkeypatch.setattr(inf, "_info_zeta",
                            lambda *a: (np.diag([1.0, 0.0, 3.0]), np.full(3, 1e-4)))
        with pytest.raises(SingularInformation) as info:
            inf.standard_errors("hsem", res, sim.dataset, sw)
        assert info.value.eigenvalues is not None

    def test_fit_failure_is_a_warning(self, monkeypatch):
        sim, sw = small_instance("hsem", side=6, missing=0.2, seed=11)

        def boom(*a, **k):
            raise SingularInformation("forced")

        monkeypatch.setattr(inf, "standard_errors", boom)
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            res = fit("hsem", sim.dataset, sw, FitOptions(se=True))
        assert res.se is None and any("forced" in str(w.message) for w in rec)
