import json

import numpy as np
import pytest

from infkit.compress import explicit_plan, make_plan
from infkit.errors import SingularInput, SingularIntermediate
from infkit.gradstore import LayerSpec
from infkit.influence import ihvp_datainf
from infkit.theory import (
    DeltaHessianCase,
    check_dropout_bound,
    check_gaussian_bound,
    check_woodbury,
    delta_h,
    make_case,
    run_suite,
    singular_value_convergence_probe,
)

from oracles import delta_h_lu


def _plan(method, d, r, seed=0):
    return make_plan(method, r, seed, [LayerSpec("theta", d)])


class TestDeltaH:
    def test_full_retention_zero(self, rng):
        for d in (4, 16, 32):
            G = rng.standard_normal((5, d))
            H = G.T @ G / 5
            for lam in (0.01, 1.0, 50.0):
                assert np.abs(delta_h(H, lam, _plan("dropout", d, d))).max() <= 1e-10

    def test_zero_hessian(self):
        plan = _plan("dropout", 6, 3)
        D = delta_h(np.zeros((6, 6)), 1.0, plan)
        P = plan.matrix()
        np.testing.assert_allclose(D, np.eye(6) - P.T @ P, atol=1e-14)
        kept = plan.per_layer[0].indices
        np.testing.assert_array_equal(np.diag(D)[kept], 0.0)
        assert np.all(np.delete(np.diag(D), kept) == 1.0)

    def test_matches_lu_oracle(self, rng):
        case = make_case(32, 8, 8, 0.1, "gaussian", 5)
        P = case.plan.matrix()
        np.testing.assert_allclose(delta_h(case.H, 0.1, case.plan), delta_h_lu(case.H, 0.1, P), rtol=1e-8, atol=1e-8)

    def test_symmetric_for_orthonormal_maps(self, rng):
        G = rng.standard_normal((8, 20))
        H = G.T @ G / 8
        for plan in (_plan("dropout", 20, 5), make_plan("pca", 5, 0, [LayerSpec("t", 20)], G)):
            D = delta_h(H, 0.3, plan)
            assert np.abs(D - D.T).max() <= 1e-10

    def test_dense_limit(self):
        with pytest.raises(ValueError):
            delta_h(np.eye(300), 1.0, np.eye(300)[:2])
        with pytest.raises(ValueError):
            delta_h(np.eye(3), 0.0, np.eye(3))


class TestBounds:
    def test_dropout_zero_hessian(self):
        case = DeltaHessianCase(5, 1, 2, np.zeros((5, 5)), 1.0, _plan("dropout", 5, 2))
        res = check_dropout_bound(case)
        assert res.actual == pytest.approx(1.0) and res.bound == 2.0 and res.passed
        assert case.delta_norm == res.actual and case.bound_value == res.bound

    def test_dropout_monte_carlo(self):
        for seed in range(100):
            assert check_dropout_bound(make_case(64, 16, 8, 0.1, "dropout", seed)).passed

    def test_dropout_large_damping(self):
        case = make_case(64, 16, 8, 100.0, "dropout", 0)
        res = check_dropout_bound(case)
        assert res.margin > 0
        assert res.bound == pytest.approx(2 / 100.0, rel=0.5)

    def test_gaussian_zero_hessian(self):
        plan = _plan("gaussian", 6, 3)
        case = DeltaHessianCase(6, 1, 3, np.zeros((6, 6)), 1.0, plan)
        res = check_gaussian_bound(case)
        P = plan.matrix()
        ptp = np.linalg.norm(P.T @ P, 2)
        assert res.bound == pytest.approx(1.0 + ptp)
        assert res.actual == pytest.approx(np.linalg.norm(np.eye(6) - P.T @ P, 2))
        assert res.passed

    def test_gaussian_monte_carlo(self):
        skipped = 0
        for seed in range(100):
            try:
                res = check_gaussian_bound(make_case(64, 16, 8, 0.1, "gaussian", seed))
            except SingularIntermediate:
                skipped += 1
                continue
            assert res.passed
            assert "PtP_le_d" in res.stats
        assert skipped < 100

    def test_sigma_min_is_singular_value(self, rng):
        # lam I + P^T P H is not symmetric, so its smallest eigenvalue modulus
        # and smallest singular value differ in general
        case = make_case(16, 4, 4, 0.1, "gaussian", 1)
        P = case.plan.matrix()
        M = 0.1 * np.eye(16) + P.T @ P @ case.H
        assert np.abs(M - M.T).max() > 1e-6
        s = np.linalg.svd(M, compute_uv=False)[-1]
        res = check_gaussian_bound(case)
        ptp = np.linalg.norm(P.T @ P, 2)
        third = ptp**2 * np.linalg.norm(case.H, 2) / (0.1 * s)
        first = 1 / np.linalg.svd(0.1 * np.eye(16) + case.H, compute_uv=False)[-1]
        assert res.bound == pytest.approx(first + ptp / 0.1 + third, rel=1e-10)

    def test_singular_intermediate(self):
        # P^T P H = -lam I exactly is impossible for PSD H, so force it with an indefinite H
        H = -np.eye(2)
        plan = explicit_plan([LayerSpec("t", 2)], [np.eye(2)])
        with pytest.raises(SingularIntermediate):
            check_gaussian_bound(DeltaHessianCase(2, 1, 2, H, 1.0, plan))


class TestWoodbury:
    def test_zero_update(self, rng):
        A = rng.standard_normal((5, 5)) + 5 * np.eye(5)
        assert check_woodbury(A, np.zeros((5, 2)), np.zeros((2, 5))).passed

    def test_rank_one_matches_datainf(self, rng):
        u = rng.standard_normal(6)
        assert check_woodbury(np.eye(6), u[:, None], u[None, :]).passed
        v = rng.standard_normal(6)
        sm = np.linalg.inv(np.eye(6) + np.outer(u, u)) @ v
        np.testing.assert_allclose(ihvp_datainf(u[None, :], 1.0, v[:, None])[:, 0], sm, rtol=1e-10)

    def test_random(self, rng):
        A = rng.standard_normal((16, 16)) + 16 * np.eye(16)
        assert check_woodbury(A, rng.standard_normal((16, 4)), rng.standard_normal((4, 16))).passed

    def test_singular(self):
        with pytest.raises(SingularInput):
            check_woodbury(np.zeros((3, 3)), np.zeros((3, 1)), np.zeros((1, 3)))


class TestProbe:
    def test_square(self):
        row = singular_value_convergence_probe([1024], 1.0)[0]
        assert 1.85 <= row["sigma_max_ratio"] <= 2.15 and row["checked"] and row["passed"]

    def test_thin(self):
        row = singular_value_convergence_probe([1024], 1 / 64)[0]
        assert row["m"] == 16
        assert abs(row["sigma_max_ratio"] - 1.125) <= 0.15

    def test_orthogonal_documentation_case(self):
        row = singular_value_convergence_probe([64], 1.0, kind="orthogonal")[0]
        assert row["sigma_max_ratio"] == pytest.approx(1.0) and row["sigma_min_ratio"] == pytest.approx(1.0)
        assert not row["checked"]

    def test_kappa_range(self):
        with pytest.raises(ValueError):
            singular_value_convergence_probe([8], 0.0)


def test_suite_report():
    rep = run_suite(cases=5, d=16, n=4, r=4, probe_k=(32,))
    doc = json.loads(rep.to_json())
    assert doc["ok"] and doc["suites"]["dropout"]["cases"] == 5
    assert "dropout" in rep.summary() and "probe" in rep.summary()
