import numpy as np
import pytest

import nomadmf as nm
from nomadmf.core import NormalEquation
from nomadmf.kernels import ResidualMatrix, SingularSystemError, ccdpp_epoch

from conftest import random_instance


def shard1(entries):
    return nm.shard(entries, nm.partition_rows(entries.m, 1))


class TestSgdUpdatePair:
    def test_zero_residual_identity(self):
        w = np.array([0.3, -0.2, 0.5])
        h = np.array([1.0, 2.0, 0.0])
        a = float(w @ h)
        w2, h2 = nm.sgd_update_pair(w, h, a, lam=0.0, s=0.5)
        assert np.array_equal(w2, w)
        assert np.array_equal(h2, h)

    def test_hand_example(self):
        w2, h2 = nm.sgd_update_pair(np.array([1.0, 0.0]), np.array([0.5, 0.5]), 1.0, 0.0, 0.1)
        # e = 0.5; h' uses the old w
        np.testing.assert_allclose(w2, [1.025, 0.025], rtol=1e-15)
        np.testing.assert_allclose(h2, [0.55, 0.5], rtol=1e-15)

    def test_pure_shrinkage(self):
        w2, h2 = nm.sgd_update_pair(np.array([1.0, 0.0]), np.array([0.0, 0.0]), 0.0, 1.0, 0.1)
        np.testing.assert_allclose(w2, [0.9, 0.0], rtol=1e-15)
        np.testing.assert_allclose(h2, [0.0, 0.0])

    def test_moves_downhill(self):
        rng = np.random.default_rng(0)
        s = 1e-4
        for _ in range(50):
            k = rng.integers(1, 5)
            w = rng.standard_normal(k)
            h = rng.standard_normal(k)
            a = rng.standard_normal()
            lam = float(rng.random())
            def J(w_, h_):
                e = a - w_ @ h_
                return 0.5 * e * e + 0.5 * lam * (w_ @ w_ + h_ @ h_)
            before = J(w, h)
            w2, h2 = nm.sgd_update_pair(w, h, a, lam, s)
            after = J(w2, h2)
            grad_norm = np.linalg.norm(-(a - w @ h) * h + lam * w) + np.linalg.norm(
                -(a - w @ h) * w + lam * h
            )
            if grad_norm > 1e-8:
                assert after < before

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            nm.sgd_update_pair(np.array([np.nan]), np.array([1.0]), 1.0, 0.0, 0.1)
        with pytest.raises(ValueError):
            nm.sgd_update_pair(np.array([1.0]), np.array([1.0]), 1.0, 0.0, -0.1)


class TestNormalEquation:
    def test_single_rating_weighted(self):
        eq = nm.build_normal_equation(np.array([[1.0, 0.0]]), np.array([2.0]), 0.5, "weighted")
        np.testing.assert_allclose(eq.M, [[1.5, 0.0], [0.0, 0.5]])
        np.testing.assert_allclose(eq.b, [2.0, 0.0])

    def test_empty_plain(self):
        eq = nm.build_normal_equation([], [], 1.0, "plain", k=2)
        np.testing.assert_allclose(eq.M, np.eye(2))
        np.testing.assert_allclose(eq.b, [0.0, 0.0])

    def test_orthonormal_rows(self):
        eq = nm.build_normal_equation(
            np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.0, 1.0]), 0.0, "weighted"
        )
        np.testing.assert_allclose(eq.M, np.eye(2))
        np.testing.assert_allclose(eq.b, [1.0, 1.0])

    def test_empty_without_reg_is_singular(self):
        with pytest.raises(SingularSystemError):
            nm.build_normal_equation([], [], 0.0, "weighted", k=2)


class TestAlsSolveRow:
    def test_diagonal(self):
        x = nm.als_solve_row(NormalEquation(M=np.diag([1.5, 0.5]), b=np.array([2.0, 0.0])))
        np.testing.assert_allclose(x, [4.0 / 3.0, 0.0], rtol=1e-14)

    def test_identity(self):
        b = np.array([3.0, -1.0, 2.0])
        x = nm.als_solve_row(NormalEquation(M=np.eye(3), b=b))
        np.testing.assert_allclose(x, b, rtol=1e-14)

    def test_scaled_identity(self):
        x = nm.als_solve_row(NormalEquation(M=2 * np.eye(2), b=np.array([2.0, 4.0])))
        np.testing.assert_allclose(x, [1.0, 2.0], rtol=1e-14)

    def test_residual_bound(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            k = int(rng.integers(1, 8))
            A = rng.standard_normal((k + 3, k))
            M = A.T @ A + 0.1 * np.eye(k)
            b = rng.standard_normal(k)
            x = nm.als_solve_row(NormalEquation(M=M, b=b))
            assert np.linalg.norm(M @ x - b) <= 1e-10 * max(np.linalg.norm(b), 1e-30)

    def test_singular_rejected(self):
        with pytest.raises(SingularSystemError):
            nm.als_solve_row(NormalEquation(M=np.zeros((2, 2)), b=np.zeros(2)))
        with pytest.raises(SingularSystemError):
            nm.als_solve_row(NormalEquation(M=-np.eye(2), b=np.ones(2)))


class TestCcdCoordinateUpdate:
    def test_diagonal_system(self):
        eq = NormalEquation(M=np.diag([1.5, 0.5]), b=np.array([2.0, 0.0]))
        assert nm.ccd_coordinate_update(np.zeros(2), 0, eq) == pytest.approx(4.0 / 3.0, rel=1e-14)

    def test_fixed_point(self):
        rng = np.random.default_rng(2)
        A = rng.standard_normal((5, 3))
        M = A.T @ A + np.eye(3)
        b = rng.standard_normal(3)
        x = np.linalg.solve(M, b)
        for l in range(3):
            assert nm.ccd_coordinate_update(x, l, NormalEquation(M=M, b=b)) == pytest.approx(
                x[l], rel=1e-12
            )

    def test_scalar(self):
        eq = NormalEquation(M=np.eye(1), b=np.array([3.0]))
        assert nm.ccd_coordinate_update(np.zeros(1), 0, eq) == 3.0

    def test_zero_curvature(self):
        eq = NormalEquation(M=np.array([[0.0, 0.0], [0.0, 1.0]]), b=np.zeros(2))
        with pytest.raises(SingularSystemError):
            nm.ccd_coordinate_update(np.zeros(2), 0, eq)

    def test_cyclic_sweeps_converge_to_als(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            k = 4
            A = rng.standard_normal((8, k))
            M = A.T @ A + np.diag(1.0 + rng.random(k)) * k  # diagonally dominant
            b = rng.standard_normal(k)
            eq = NormalEquation(M=M, b=b)
            x = np.zeros(k)
            for _ in range(200):
                for l in range(k):
                    x[l] = nm.ccd_coordinate_update(x, l, eq)
            np.testing.assert_allclose(x, nm.als_solve_row(eq), atol=1e-8)


class TestCcdppEpoch:
    def test_rank1_exact_fit(self):
        rng = np.random.default_rng(4)
        m, n = 12, 9
        u = rng.standard_normal(m)
        v = rng.standard_normal(n)
        users, items = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
        values = (u[:, None] * v[None, :]).ravel()
        entries = nm.Entries(users.ravel(), items.ravel(), values, m=m, n=n)
        data = shard1(entries)
        params = nm.HyperParams(k=1, lam=0.0)
        W, H = nm.init_factors(m, n, 1, seed=0)
        residual = ResidualMatrix.from_factors(W, H, data)
        for _ in range(5):
            ccdpp_epoch(W, H, data, residual, params)
        assert nm.objective(W, H, data, params) <= 1e-8

    def test_all_zero_ratings_shrink(self):
        rng = np.random.default_rng(5)
        entries = random_instance(rng, 8, 6, 2)
        entries = nm.Entries(entries.users, entries.items, np.zeros(len(entries)), m=8, n=6)
        data = shard1(entries)
        params = nm.HyperParams(k=2, lam=0.5)
        W, H = nm.init_factors(8, 6, 2, seed=1)
        norms = [float(np.abs(W.data).sum() + np.abs(H.data).sum())]
        residual = ResidualMatrix.from_factors(W, H, data)
        for _ in range(10):
            ccdpp_epoch(W, H, data, residual, params)
            norms.append(float(np.abs(W.data).sum() + np.abs(H.data).sum()))
        assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))
        assert norms[-1] < 0.01 * norms[0]

    @pytest.mark.parametrize("reg_mode", ["weighted", "plain"])
    def test_oracle_equivalence_against_coordinate_formula(self, reg_mode):
        """Replay the rank-wise sweep with from-scratch normal equations."""
        rng = np.random.default_rng(6)
        entries = random_instance(rng, 7, 5, 2)
        k = 3
        data = shard1(entries)
        params = nm.HyperParams(k=k, lam=0.3, reg_mode=reg_mode)
        W, H = nm.init_factors(7, 5, k, seed=2)
        Wq, Hq = W.data.copy(), H.data.copy()

        residual = ResidualMatrix.from_factors(W, H, data)
        ccdpp_epoch(W, H, data, residual, params)

        # independent oracle: per rank, per row, one exact coordinate update
        # computed from a fresh normal equation (no residual machinery)
        def fresh_coord(i, axis, l):
            if axis == "w":
                sel = entries.users == i
                other_rows = Hq[entries.items[sel]]
            else:
                sel = entries.items == i
                other_rows = Wq[entries.users[sel]]
            vals = entries.values[sel]
            eq = nm.build_normal_equation(other_rows, vals, params.lam, reg_mode, k=k)
            vec = Wq[i] if axis == "w" else Hq[i]
            return nm.ccd_coordinate_update(vec, l, eq)

        for l in range(k):
            for i in range(7):
                Wq[i, l] = fresh_coord(i, "w", l)
            for j in range(5):
                Hq[j, l] = fresh_coord(j, "h", l)

        np.testing.assert_allclose(W.data, Wq, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(H.data, Hq, rtol=1e-10, atol=1e-12)

    def test_objective_never_increases(self):
        rng = np.random.default_rng(7)
        entries = random_instance(rng, 15, 10, 2)
        data = shard1(entries)
        params = nm.HyperParams(k=3, lam=0.05)
        W, H = nm.init_factors(15, 10, 3, seed=3)
        residual = ResidualMatrix.from_factors(W, H, data)
        prev = nm.objective(W, H, data, params)
        for _ in range(30):
            ccdpp_epoch(W, H, data, residual, params, inner_iters=2)
            cur = nm.objective(W, H, data, params)
            assert cur <= prev * (1 + 1e-9) + 1e-12
            prev = cur

    def test_residual_drift_bounded(self):
        rng = np.random.default_rng(8)
        entries = random_instance(rng, 20, 12, 3)
        data = shard1(entries)
        params = nm.HyperParams(k=4, lam=0.1)
        W, H = nm.init_factors(20, 12, 4, seed=4)
        residual = ResidualMatrix.from_factors(W, H, data)
        for _ in range(100):
            ccdpp_epoch(W, H, data, residual, params)
        assert residual.drift(W, H, data) <= 1e-7

    def test_inconsistent_residual_detected(self):
        rng = np.random.default_rng(9)
        entries = random_instance(rng, 5, 4, 2)
        data = shard1(entries)
        params = nm.HyperParams(k=2, lam=0.1)
        W, H = nm.init_factors(5, 4, 2, seed=5)
        residual = ResidualMatrix.from_factors(W, H, data)
        residual.values = residual.values + 1.0
        with pytest.raises(ValueError):
            ccdpp_epoch(W, H, data, residual, params, check=True)
