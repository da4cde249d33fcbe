import numpy as np
import pytest

from radonlines.admm import (
    AdmmConfig,
    SolveHistory,
    objective,
    solve,
    u_update,
    z_update,
)
from radonlines.prox import soft_threshold
from radonlines.radon import AngleSet, build_operator


class IdentityOp:
    """Surrogate operator whose project and synthesize are the identity."""

    def __init__(self, n=4):
        self.image_shape = (n, n)
        self.sinogram_shape = (n, n)

    def project(self, img):
        return np.asarray(img, dtype=float).copy()

    def synthesize(self, sino):
        return np.asarray(sino, dtype=float).copy()


def small_op():
    return build_operator(16, 16, AngleSet((0.0, 45.0, 90.0)), 23)


def dense_synthesis_matrix(op):
    """Materialize synthesize as a dense matrix, column by column."""
    n_sino = op.sinogram_shape[0] * op.sinogram_shape[1]
    n_img = op.image_shape[0] * op.image_shape[1]
    mat = np.zeros((n_img, n_sino))
    basis = np.zeros(op.sinogram_shape)
    for j in range(n_sino):
        basis.ravel()[j] = 1.0
        mat[:, j] = op.synthesize(basis).ravel()
        basis.ravel()[j] = 0.0
    return mat


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            AdmmConfig(gamma=0.0)
        with pytest.raises(ValueError):
            AdmmConfig(alpha=-1.0)
        with pytest.raises(ValueError):
            AdmmConfig(tol_primal=0.0)


class TestObjective:
    def test_zero_x(self):
        op = small_op()
        y = np.random.default_rng(0).random((16, 16))
        assert objective(op, y, np.zeros(op.sinogram_shape), 1.0) == pytest.approx(
            0.5 * np.sum(y ** 2))

    def test_zero_y_one_hot(self):
        op = small_op()
        x = np.zeros(op.sinogram_shape)
        x[10, 1] = -2.5
        expect = 0.5 * np.sum(op.synthesize(x) ** 2) + 2.5
        assert objective(op, np.zeros((16, 16)), x, 1.0) == pytest.approx(expect)

    def test_matches_independent_summation(self):
        op = small_op()
        rng = np.random.default_rng(4)
        y = rng.random((16, 16))
        x = rng.standard_normal(op.sinogram_shape) * 0.1
        # second straightforward implementation: explicit elementwise sums
        recon = op.synthesize(x)
        quad = 0.0
        for v in (y - recon).ravel():
            quad += v * v
        l1 = 0.0
        for v in x.ravel():
            l1 += abs(v)
        assert objective(op, y, x, 0.7) == pytest.approx(0.5 * quad + 0.7 * l1,
                                                         abs=1e-8)


class TestUpdates:
    def test_u_update_zero_inputs(self):
        op = small_op()
        zeros_s = np.zeros(op.sinogram_shape)
        u = u_update(op, np.zeros((16, 16)), zeros_s, zeros_s, 1.0)
        assert np.all(u == 0)

    def test_u_update_identity_closed_form(self):
        op = IdentityOp(4)
        rng = np.random.default_rng(1)
        y = rng.random((4, 4))
        x = rng.random((4, 4))
        z = rng.random((4, 4))
        u = u_update(op, y, x, z, 1.0)
        assert np.allclose(u, (y + x - z) / 2.0, atol=1e-8)

    def test_u_update_matches_dense_solve(self):
        op = small_op()
        rng = np.random.default_rng(2)
        y = rng.random((16, 16))
        x = rng.standard_normal(op.sinogram_shape) * 0.1
        z = rng.standard_normal(op.sinogram_shape) * 0.1
        gamma = 1.0
        u = u_update(op, y, x, z, gamma, cg_tol=1e-10, cg_max_iter=500)
        a_mat = dense_synthesis_matrix(op)
        lhs = a_mat.T @ a_mat + gamma * np.eye(a_mat.shape[1])
        rhs = a_mat.T @ y.ravel() + gamma * x.ravel() - z.ravel()
        u_ref = np.linalg.solve(lhs, rhs)
        assert np.allclose(u.ravel(), u_ref, atol=1e-5)

    def test_z_update(self):
        z = np.array([[1.0]])
        u = np.array([[3.0]])
        x = np.array([[1.0]])
        assert z_update(z, u, x, 2.0)[0, 0] == 5.0
        assert np.array_equal(z_update(z, u, u, 2.0), z)
        d = np.array([[0.25]])
        assert z_update(np.zeros((1, 1)), d, np.zeros((1, 1)), 1.0)[0, 0] == 0.25


class TestSolve:
    def test_zero_image_one_iteration(self):
        op = small_op()
        x, hist = solve(op, np.zeros((16, 16)), AdmmConfig())
        assert np.all(x == 0)
        assert len(hist) == 1

    def test_identity_operator_analytic(self):
        op = IdentityOp(4)
        rng = np.random.default_rng(3)
        y = rng.standard_normal((4, 4))
        cfg = AdmmConfig(alpha=0.8, gamma=1.0, max_iter=200,
                         tol_primal=1e-7, tol_dual=1e-7)
        x, _ = solve(op, y, cfg)
        assert np.allclose(x, soft_threshold(y, 0.8), atol=1e-4)

    def test_planted_vertical_line_recovered(self):
        band = AngleSet.vertical_band(half_width=10)
        op = build_operator(32, 32, band, 47)
        img = np.zeros((32, 32))
        img[:, 20] = 1.0  # vertical line at r = 20 - 16 = 4, omega = 0
        x, _ = solve(op, img, AdmmConfig(alpha=1.0, gamma=1.0, max_iter=20))
        ri, ai = np.unravel_index(np.argmax(x), x.shape)
        assert abs(op.radii[ri] - 4.0) <= 2.0
        assert abs(op.angle_set.angles[ai]) <= 2.0

    def test_objective_never_worse_than_zero(self):
        op = small_op()
        rng = np.random.default_rng(8)
        for seed in range(3):
            y = np.random.default_rng(seed).random((16, 16))
            cfg = AdmmConfig(max_iter=15)
            x, hist = solve(op, y, cfg)
            assert hist.objective[-1] <= objective(
                op, y, np.zeros(op.sinogram_shape), cfg.alpha) + 1e-9

    def test_primal_residual_below_tol_on_early_stop(self):
        op = IdentityOp(4)
        y = np.random.default_rng(6).standard_normal((4, 4))
        cfg = AdmmConfig(alpha=0.5, max_iter=500, tol_primal=1e-6, tol_dual=1e-6)
        x, hist = solve(op, y, cfg)
        assert len(hist) < cfg.max_iter
        ref = max(np.linalg.norm(x), 1e-12)
        assert hist.primal_residual[-1] <= cfg.tol_primal * ref * 1.5

    def test_alpha_zero_approaches_least_squares(self):
        op = build_operator(12, 12, AngleSet((0.0, 90.0)), 18)
        rng = np.random.default_rng(10)
        y = rng.random((12, 12))
        grads = []
        for k in range(1, 9):
            cfg = AdmmConfig(alpha=0.0, max_iter=k,
                             tol_primal=1e-14, tol_dual=1e-14)
            x, _ = solve(op, y, cfg)
            resid = op.synthesize(x) - y
            grads.append(np.linalg.norm(op.project(resid)))
        assert all(b <= a + 1e-10 for a, b in zip(grads, grads[1:]))

    def test_solve_composition_matches_manual_loop(self):
        op = small_op()
        rng = np.random.default_rng(12)
        y = rng.random((16, 16))
        cfg = AdmmConfig(alpha=0.4, gamma=2.0, max_iter=3,
                         tol_primal=1e-14, tol_dual=1e-14)
        x_solve, _ = solve(op, y, cfg)
        # replicate the three iterations by hand from the primitives
        u = np.zeros(op.sinogram_shape)
        x = np.zeros(op.sinogram_shape)
        z = np.zeros(op.sinogram_shape)
        proj_y = op.project(y)
        for _ in range(3):
            u = u_update(op, y, x, z, cfg.gamma, cfg.cg_tol, cfg.cg_max_iter,
                         u0=u, proj_y=proj_y)
            x = soft_threshold(u + z / cfg.gamma, cfg.alpha / cfg.gamma)
            z_prev = z
            z = z_update(z, u, x, cfg.gamma)
            assert np.allclose(z, z_prev + cfg.gamma * (u - x), atol=0)
        assert np.allclose(x_solve, x, atol=1e-12)

    def test_history_lengths_consistent(self):
        op = small_op()
        y = np.random.default_rng(14).random((16, 16))
        _, hist = solve(op, y, AdmmConfig(max_iter=5, tol_primal=1e-14,
                                          tol_dual=1e-14))
        assert isinstance(hist, SolveHistory)
        assert len(hist.objective) == len(hist.primal_residual) == 5
        assert len(hist.dual_residual) == len(hist.wall_time) == 5
        assert all(t >= 0 for t in hist.wall_time)
