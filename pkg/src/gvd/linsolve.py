"""Matrix-free solution of the normal equations ``A(W1, W2) x = S^T f``.

The system is symmetric positive definite, so conjugate gradient applies
directly.  Batched inputs (leading axis) are solved simultaneously with
per-item step sizes; an item stops updating once it meets the tolerance,
which keeps batched results identical to one-at-a-time solves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .config import ModelConfig
from .errors import GVDError, NumericalError
from .grid_ops import (DENSE_LIMIT, StackedState, WeightPair, _apply_A_arrays, _lam,
                       apply_S_adjoint, as_image, assemble_A)


@dataclass
class SolveReport:
    iterations: int
    final_relative_residual: float
    converged: bool
    warm_started: bool


@dataclass
class CGInfo:
    iterations: np.ndarray
    relative_residual: np.ndarray
    converged: np.ndarray


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def conjugate_gradient(apply_op: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
                       x0: np.ndarray | None = None, *, tol=1e-8, max_iters=500,
                       preconditioner: Callable[[np.ndarray], np.ndarray] | None = None):
    """(Preconditioned) conjugate gradient on vectors of shape ``(..., N)``.

    Each batch item stops once ``||A x - b|| <= tol ||b||``.  A zero
    right-hand side returns zero after no iterations.
    """
    b = np.asarray(b, dtype=np.float64)
    batch = b.shape[:-1]
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64, copy=True)
    bnorm = np.sqrt(_dot(b, b))
    zero_rhs = bnorm == 0.0
    x[zero_rhs] = 0.0
    r = b - apply_op(x)
    rnorm = np.sqrt(_dot(r, r))
    if not np.all(np.isfinite(rnorm)):
        raise NumericalError("non-finite initial residual in conjugate gradient")
    safe_b = np.where(zero_rhs, 1.0, bnorm)
    active = ~zero_rhs & (rnorm > tol * bnorm)
    iters = np.zeros(batch, dtype=int)
    M = preconditioner if preconditioner is not None else (lambda v: v)
    z = M(r)
    p = z.copy()
    rz = _dot(r, z)
    k = 0
    while np.any(active) and k < max_iters:
        k += 1
        Ap = apply_op(p)
        pAp = _dot(p, Ap)
        if np.any(~np.isfinite(pAp)):
            raise NumericalError("non-finite value in conjugate gradient")
        alpha = np.where(active, rz / np.where(pAp > 0, pAp, 1.0), 0.0)
        x += alpha[..., None] * p
        r -= alpha[..., None] * Ap
        iters += active
        rnorm = np.sqrt(_dot(r, r))
        active = active & (rnorm > tol * bnorm)
        if not np.any(active):
            break
        z = M(r)
        rz_new = _dot(r, z)
        beta = np.where(active, rz_new / np.where(rz != 0, rz, 1.0), 0.0)
        p = np.where(active[..., None], z + beta[..., None] * p, p)
        rz = np.where(active, rz_new, rz)
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite iterate in conjugate gradient")
    # report the true residual, not the recursively updated one
    r_true = b - apply_op(x)
    rel = np.where(zero_rhs, 0.0, np.sqrt(_dot(r_true, r_true)) / safe_b)
    converged = zero_rhs | (rel <= tol)
    return x, CGInfo(iters, rel, converged)


def normal_operator(w: WeightPair, lambda1, lambda2, shape):
    """Vectorized ``v -> A(W1, W2) v`` for stacked vectors of length ``3n``."""
    h, wd = shape
    n = h * wd
    lam1 = _lam(lambda1, 2)
    lam2 = _lam(lambda2, 3)

    def apply(v):
        lead = v.shape[:-1]
        c = v[..., :n].reshape(lead + (h, wd))
        xi = v[..., n:].reshape(lead + (2, h, wd))
        oc, oxi = _apply_A_arrays(c, xi, w.w1, w.w2, lam1, lam2)
        return np.concatenate([oc.reshape(lead + (n,)), oxi.reshape(lead + (2 * n,))], axis=-1)

    return apply


def normal_diagonal(w: WeightPair, lambda1, lambda2) -> np.ndarray:
    """Diagonal of ``A(W1, W2)`` as a stacked vector, for Jacobi preconditioning."""
    h, wd = w.w1.shape[-2:]
    lam1 = _lam(lambda1, 2)
    lam2 = _lam(lambda2, 2)
    w1x, w1y = w.w1[..., 0, :, :], w.w1[..., 1, :, :]
    gtg = np.zeros(w.w1.shape[:-3] + (h, wd))
    gtg[..., :, :-1] += w1x[..., :, :-1]
    gtg[..., :, 1:] += w1x[..., :, :-1]
    gtg[..., :-1, :] += w1y[..., :-1, :]
    gtg[..., 1:, :] += w1y[..., :-1, :]
    dc = 1.0 + lam1 * gtg
    # (div^T div) has diagonal 2 on interior flow entries, 0 on the dead boundary ones
    ddx = np.zeros((h, wd))
    ddx[:, :-1] = 2.0
    ddy = np.zeros((h, wd))
    ddy[:-1, :] = 2.0
    dxi = np.stack([ddx + lam2 * w.w2[..., 0, :, :], ddy + lam2 * w.w2[..., 1, :, :]], axis=-3)
    lead = dxi.shape[:-3]
    dc = np.broadcast_to(dc, lead + (h, wd))
    return np.concatenate([dc.reshape(lead + (-1,)), dxi.reshape(lead + (-1,))], axis=-1)


def jacobi_preconditioner(w: WeightPair, cfg: ModelConfig, lambda1=None, lambda2=None):
    lam1 = cfg.lambda1 if lambda1 is None else lambda1
    lam2 = cfg.lambda2 if lambda2 is None else lambda2
    inv = 1.0 / normal_diagonal(w, lam1, lam2)
    return lambda r: inv * r


def solve_normal_equations(f, w: WeightPair, cfg: ModelConfig, warm_start: StackedState | None = None,
                           *, lambda1=None, lambda2=None, tol=None, preconditioner=None):
    """Solve ``A(W1, W2) x = S^T f`` by conjugate gradient.

    Parameters
    ----------
    f : array, shape (h, w) or (B, h, w)
        Observation(s).
    w : WeightPair
        Admissible weights, broadcastable against ``f``.
    cfg : ModelConfig
        Supplies lambdas, tolerance and iteration cap.
    warm_start : StackedState, optional
        Initial iterate; defaults to ``(f, 0)``.
    lambda1, lambda2 : float or array, optional
        Per-call (or per-batch-item) overrides of the config lambdas.
    tol : float, optional
        Overrides ``cfg.cg_tol``.
    preconditioner : callable, optional
        Applied to residual vectors, e.g. :func:`jacobi_preconditioner`.

    Returns
    -------
    state : StackedState
    report : SolveReport, or a list of them for batched input
    """
    f = as_image(f, "observation")
    lam1 = cfg.lambda1 if lambda1 is None else lambda1
    lam2 = cfg.lambda2 if lambda2 is None else lambda2
    shape = f.shape[-2:]
    b = apply_S_adjoint(f).vector()
    x0 = (warm_start if warm_start is not None else StackedState.from_observation(f)).vector()
    x0 = np.broadcast_to(x0, b.shape)
    op = normal_operator(w, lam1, lam2, shape)
    vec, info = conjugate_gradient(op, b, x0, tol=cfg.cg_tol if tol is None else tol,
                                   max_iters=cfg.cg_max_iters, preconditioner=preconditioner)
    state = StackedState.from_vector(vec, shape)
    warm = warm_start is not None
    if f.ndim == 2:
        report = SolveReport(int(info.iterations), float(info.relative_residual),
                             bool(info.converged), warm)
    else:
        report = [SolveReport(int(i), float(r), bool(c), warm)
                  for i, r, c in zip(info.iterations.reshape(-1), info.relative_residual.reshape(-1),
                                     info.converged.reshape(-1))]
    return state, report


def solve_dense_oracle(f, w: WeightPair, cfg: ModelConfig, *, lambda1=None, lambda2=None) -> StackedState:
    """Direct Cholesky solve of the assembled system (at most 256 pixels)."""
    f = as_image(f, "observation")
    if f.ndim != 2:
        raise ValueError("dense oracle takes a single image")
    h, wd = f.shape
    if h * wd > DENSE_LIMIT:
        raise ValueError(f"dense oracle limited to {DENSE_LIMIT} pixels, got {h * wd}")
    A = assemble_A(w, cfg, lambda1, lambda2)
    if not np.allclose(A, A.T, rtol=0, atol=1e-12):
        raise GVDError("assembled normal matrix is not symmetric")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True)
    except np.linalg.LinAlgError as exc:
        raise GVDError(f"assembled normal matrix is not positive definite: {exc}") from exc
    if not np.all(np.diag(factor[0]) > 0):
        raise GVDError("assembled normal matrix has a non-positive pivot")
    b = apply_S_adjoint(f).vector()
    return StackedState.from_vector(scipy.linalg.cho_solve(factor, b), (h, wd))
