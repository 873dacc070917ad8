import numpy as np
import pytest

from conftest import random_weights
from gvd.config import ModelConfig
from gvd.errors import NumericalError
from gvd.grid_ops import StackedState, WeightPair, alpha_constant, apply_A, apply_S_adjoint, assemble_A, energy
from gvd.linsolve import (conjugate_gradient, jacobi_preconditioner, normal_diagonal, solve_dense_oracle,
                          solve_normal_equations)


def test_cg_on_small_spd_matrix(rng):
    B = rng.standard_normal((12, 12))
    A = B @ B.T + 12 * np.eye(12)
    b = rng.standard_normal(12)
    x, info = conjugate_gradient(lambda v: v @ A.T, b, tol=1e-12, max_iters=100)
    np.testing.assert_allclose(x, np.linalg.solve(A, b), rtol=1e-10)
    assert bool(info.converged)


def test_cg_zero_rhs():
    x, info = conjugate_gradient(lambda v: 2 * v, np.zeros(5), x0=np.ones(5))
    assert not np.any(x) and int(info.iterations) == 0


def test_cg_nan_raises():
    with pytest.raises(NumericalError):
        conjugate_gradient(lambda v: v * np.nan, np.ones(3))


def test_constant_image_is_exact(cfg, rng):
    f = np.full((7, 9), 0.42)
    for w in (WeightPair.uniform(f.shape, 0.3, cfg), random_weights(f.shape, cfg, rng)):
        x, rep = solve_normal_equations(f, w, cfg)
        np.testing.assert_array_equal(x.cartoon, f)
        assert not np.any(x.flow)
        assert rep.final_relative_residual < 1e-10 and rep.iterations == 0


def test_zero_rhs_gives_zero(cfg):
    x, rep = solve_normal_equations(np.zeros((4, 4)), WeightPair.uniform((4, 4), 0.5, cfg), cfg)
    assert x.norm() == 0 and rep.iterations == 0


def test_cg_matches_dense(rng):
    cfg = ModelConfig(cg_tol=1e-12, cg_max_iters=2000)
    f = rng.random((6, 6))
    w = random_weights((6, 6), cfg, rng)
    x, rep = solve_normal_equations(f, w, cfg)
    ref = solve_dense_oracle(f, w, cfg)
    assert rep.converged
    assert np.linalg.norm(x.vector() - ref.vector()) <= 1e-6 * np.linalg.norm(ref.vector())


def test_dense_oracle_residual(cfg, rng):
    f = rng.random((4, 4))
    w = WeightPair.uniform((4, 4), cfg.omega_max, cfg)
    x = solve_dense_oracle(f, w, cfg)
    r = assemble_A(w, cfg) @ x.vector() - apply_S_adjoint(f).vector()
    assert np.max(np.abs(r)) < 1e-10


def test_dense_min_eigenvalue_above_alpha(cfg, rng):
    alpha = alpha_constant(cfg, (4, 4))
    for _ in range(10):
        lmin = np.linalg.eigvalsh(assemble_A(random_weights((4, 4), cfg, rng), cfg))[0]
        assert lmin >= alpha - 1e-10


def test_dense_oracle_limits(cfg):
    with pytest.raises(ValueError):
        solve_dense_oracle(np.zeros((17, 16)), WeightPair.uniform((17, 16), 0.5, cfg), cfg)


def test_energy_minimized(cfg, rng):
    for _ in range(10):
        f = rng.random((5, 6))
        w = random_weights(f.shape, cfg, rng)
        x, _ = solve_normal_equations(f, w, cfg)
        assert energy(x, f, w, cfg) <= energy(StackedState.from_observation(f), f, w, cfg) + 1e-9


def test_batched_equals_single(cfg, rng):
    F = rng.random((3, 5, 5))
    lam1 = np.array([0.5, 1.0, 2.0])
    w = WeightPair(rng.uniform(0.1, 0.9, (3, 2, 5, 5)), rng.uniform(0.1, 0.9, (3, 2, 5, 5)), 0.01, 0.99)
    xb, reps = solve_normal_equations(F, w, cfg, lambda1=lam1)
    for i in range(3):
        wi = WeightPair(w.w1[i], w.w2[i], 0.01, 0.99)
        xi, rep = solve_normal_equations(F[i], wi, cfg, lambda1=lam1[i])
        np.testing.assert_allclose(xb.cartoon[i], xi.cartoon, atol=1e-12)
        assert reps[i].iterations == rep.iterations


def test_deterministic(cfg, rng):
    f = rng.random((6, 6))
    w = random_weights(f.shape, cfg, rng)
    a, _ = solve_normal_equations(f, w, cfg)
    b, _ = solve_normal_equations(f, w, cfg)
    assert a.vector().tobytes() == b.vector().tobytes()


def test_nonconvergence_is_reported(rng):
    cfg = ModelConfig(cg_max_iters=2)
    f = rng.random((8, 8))
    x, rep = solve_normal_equations(f, WeightPair.uniform(f.shape, 0.5, cfg), cfg)
    assert not rep.converged and rep.iterations == 2 and rep.final_relative_residual > cfg.cg_tol


def test_warm_start_flag(cfg, rng):
    f = rng.random((6, 6))
    w = random_weights(f.shape, cfg, rng)
    x, rep = solve_normal_equations(f, w, cfg)
    _, rep2 = solve_normal_equations(f, w, cfg, warm_start=x)
    assert rep2.warm_started and not rep.warm_started
    assert rep2.iterations <= 1


def test_jacobi_diagonal_and_preconditioned_solve(cfg, rng):
    w = random_weights((4, 5), cfg, rng)
    np.testing.assert_allclose(normal_diagonal(w, cfg.lambda1, cfg.lambda2), np.diag(assemble_A(w, cfg)),
                               atol=1e-14)
    f = rng.random((4, 5))
    tight = cfg.replace(cg_tol=1e-12)
    xp, rep = solve_normal_equations(f, w, tight, preconditioner=jacobi_preconditioner(w, cfg))
    ref = solve_dense_oracle(f, w, cfg)
    assert rep.converged
    np.testing.assert_allclose(xp.vector(), ref.vector(), atol=1e-8)


def test_solution_satisfies_normal_equations(cfg, rng):
    f = rng.random((9, 7))
    w = random_weights(f.shape, cfg, rng)
    x, rep = solve_normal_equations(f, w, cfg)
    b = apply_S_adjoint(f).vector()
    r = apply_A(x, w, cfg).vector() - b
    assert np.linalg.norm(r) <= cfg.cg_tol * np.linalg.norm(b) * (1 + 1e-6)
