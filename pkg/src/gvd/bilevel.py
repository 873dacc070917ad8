"""Supervised training of the weight predictor through the unrolled outer loop.

The upper-level loss is the mean over images of
``1/2 ||c_K - c*||^2 + 1/2 ||div(xi_K) - t*||^2``.  Gradients are exact:
the ``K`` outer steps are unrolled, and each inner linear solve is
differentiated implicitly with one adjoint solve ``A mu = x_bar``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConvergenceError, NumericalError
from .grid_ops import StackedState, WeightPair, as_image, assemble_A, gradient
from .linsolve import conjugate_gradient, normal_operator, solve_dense_oracle, solve_normal_equations
from .predictor import (PredictorParams, kappa_bound, predict_lambdas_backward, predict_lambdas_forward,
                        predict_weights_backward, predict_weights_forward, renormalize)

logger = logging.getLogger(__name__)

ADJOINT_TOL = 1e-10


@dataclass
class Dataset:
    """Observations with cartoon and texture labels, each of shape ``(B, h, w)``."""

    f: np.ndarray
    cartoon: np.ndarray
    texture: np.ndarray

    def __post_init__(self):
        self.f = as_image(self.f, "observations")
        self.cartoon = as_image(self.cartoon, "cartoon labels")
        self.texture = as_image(self.texture, "texture labels")
        if self.f.ndim == 2:
            self.f, self.cartoon, self.texture = self.f[None], self.cartoon[None], self.texture[None]
        if not (self.f.shape == self.cartoon.shape == self.texture.shape):
            raise ValueError(f"label shapes {self.cartoon.shape}, {self.texture.shape} "
                             f"do not match observations {self.f.shape}")

    def __len__(self):
        return self.f.shape[0]

    def subset(self, index) -> "Dataset":
        return Dataset(self.f[index], self.cartoon[index], self.texture[index])


class TrainingError(NumericalError):
    """Training stopped on a non-finite loss; carries the history so far."""

    def __init__(self, message, history, params):
        super().__init__(message)
        self.history = history
        self.params = params


def load_dataset(manifest) -> Dataset:
    from .io import read_manifest

    triples = read_manifest(manifest)
    if not triples:
        raise ValueError(f"manifest {manifest} lists no images")
    return Dataset(*(np.stack(a) for a in zip(*triples)))


def _slice_weights(w: WeightPair, i) -> WeightPair:
    return WeightPair(w.w1[i], w.w2[i], w.omega_min, w.omega_max)


def _solve(f, w, lam1, lam2, cfg, warm, solver):
    if solver == "dense":
        states = [solve_dense_oracle(f[i], _slice_weights(w, i), cfg, lambda1=lam1[i], lambda2=lam2[i])
                  for i in range(f.shape[0])]
        return StackedState(np.stack([s.cartoon for s in states]), np.stack([s.flow for s in states]))
    x, reports = solve_normal_equations(f, w, cfg, warm_start=warm, lambda1=lam1, lambda2=lam2)
    if not all(r.converged for r in reports):
        logger.warning("forward solve stopped before tolerance")
    return x


def _forward(data: Dataset, params: PredictorParams, cfg: ModelConfig, solver="cg"):
    lam, lam_cache = predict_lambdas_forward(data.f, params)
    lam1, lam2 = lam[:, 0], lam[:, 1]
    x = StackedState.from_observation(data.f)
    states, weights, caches = [x], [], []
    for _ in range(cfg.K):
        w, cache = predict_weights_forward(x, params, cfg)
        x = _solve(data.f, w, lam1, lam2, cfg, x, solver)
        states.append(x)
        weights.append(w)
        caches.append(cache)
    return states, weights, caches, lam, lam_cache


def _residuals(x: StackedState, data: Dataset):
    return x.cartoon - data.cartoon, x.texture() - data.texture


def loss(data: Dataset, params: PredictorParams, cfg: ModelConfig, *, solver="cg") -> float:
    """Mean over images of ``1/2 ||D x_K - g||^2``; ``solver`` is ``"cg"`` or ``"dense"``."""
    states, *_ = _forward(data, params, cfg, solver)
    rc, rt = _residuals(states[-1], data)
    per_image = 0.5 * (np.sum(rc**2, axis=(-2, -1)) + np.sum(rt**2, axis=(-2, -1)))
    return float(np.mean(per_image))


def _adjoint_solve(rhs: StackedState, w: WeightPair, lam1, lam2, solver, cfg):
    shape = rhs.shape
    if solver == "dense":
        out = []
        for i in range(rhs.cartoon.shape[0]):
            A = assemble_A(_slice_weights(w, i), cfg, lam1[i], lam2[i])
            out.append(np.linalg.solve(A, StackedState(rhs.cartoon[i], rhs.flow[i]).vector()))
        return StackedState.from_vector(np.stack(out), shape)
    op = normal_operator(w, lam1, lam2, shape)
    vec, info = conjugate_gradient(op, rhs.vector(), tol=ADJOINT_TOL, max_iters=max(cfg.cg_max_iters, 5000))
    if not np.all(info.converged):
        raise ConvergenceError(f"adjoint solve did not reach {ADJOINT_TOL:g} "
                               f"(worst residual {np.max(info.relative_residual):.3g})",
                               estimate=float(np.max(info.relative_residual)),
                               iterations=int(np.max(info.iterations)))
    return StackedState.from_vector(vec, shape)


def value_and_gradient(data: Dataset, params: PredictorParams, cfg: ModelConfig, *, solver="cg"):
    """Loss and its exact gradient (a dict keyed like :meth:`PredictorParams.arrays`)."""
    states, weights, caches, lam, lam_cache = _forward(data, params, cfg, solver)
    B = len(data)
    lam1, lam2 = lam[:, 0], lam[:, 1]
    rc, rt = _residuals(states[-1], data)
    value = float(np.mean(0.5 * (np.sum(rc**2, axis=(-2, -1)) + np.sum(rt**2, axis=(-2, -1)))))
    # d/dx of the mean loss: cartoon residual, and div^T = -grad applied to the texture residual
    x_bar = StackedState(rc / B, -gradient(rt) / B)
    grads = params.zeros_like()
    lam_bar = np.zeros((B, 2))
    for k in range(cfg.K, 0, -1):
        x, w = states[k], weights[k - 1]
        mu = _adjoint_solve(x_bar, w, lam1, lam2, solver, cfg)
        g_mu = gradient(mu.cartoon)
        g_c = gradient(x.cartoon)
        w1_bar = -lam1[:, None, None, None] * g_mu * g_c
        w2_bar = -lam2[:, None, None, None] * mu.flow * x.flow
        lam_bar[:, 0] -= np.sum(g_mu * w.w1 * g_c, axis=(-3, -2, -1))
        lam_bar[:, 1] -= np.sum(mu.flow * w.w2 * x.flow, axis=(-3, -2, -1))
        conv_grads, x_bar = predict_weights_backward(caches[k - 1], params, w1_bar, w2_bar)
        for name, g in conv_grads.items():
            grads[name] += g
    for name, g in predict_lambdas_backward(lam_cache, params, lam_bar).items():
        grads[name] += g
    return value, grads


def gradient_of_loss(data: Dataset, params: PredictorParams, cfg: ModelConfig, *, solver="cg") -> dict:
    return value_and_gradient(data, params, cfg, solver=solver)[1]


def finite_difference_gradient(data: Dataset, params: PredictorParams, cfg: ModelConfig, *,
                               step=1e-5, solver="dense") -> dict:
    """Central differences of :func:`loss`, one parameter entry at a time."""
    out = {}
    for name, arr in params.arrays().items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            vals = []
            for sign in (1.0, -1.0):
                pert = arr.copy()
                pert[idx] += sign * step
                vals.append(loss(data, params.replace_arrays({name: pert}), cfg, solver=solver))
            g[idx] = (vals[0] - vals[1]) / (2 * step)
        out[name] = g
    return out


def train(data: Dataset, init: PredictorParams, cfg: ModelConfig, steps: int, learning_rate: float, *,
          renormalize_shape=None, callback=None):
    """Fixed-step gradient descent.

    Parameters
    ----------
    renormalize_shape : (h, w), optional
        When given, both conv kernels are rescaled to their target spectral
        factors (at this input size) after every step.

    Returns
    -------
    params : PredictorParams
    history : list of float
        Loss before each step, then the final loss (``steps + 1`` entries).
    """
    params = init.copy()
    if renormalize_shape is not None:
        params = renormalize(params, renormalize_shape)
    history = []
    for step in range(steps):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                value, grads = value_and_gradient(data, params, cfg)
        except NumericalError as exc:
            raise TrainingError(f"numerical failure at step {step}: {exc}", history, params) from exc
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}", history, params)
        history.append(value)
        if callback is not None:
            callback(step, value, params)
        if learning_rate != 0.0:
            try:
                params = params.replace_arrays({n: a - learning_rate * grads[n]
                                                for n, a in params.arrays().items()})
            except ValueError as exc:
                raise TrainingError(f"parameters became non-finite at step {step}", history, params) from exc
            if renormalize_shape is not None:
                params = renormalize(params, renormalize_shape)
    final = loss(data, params, cfg)
    if not np.isfinite(final):
        raise TrainingError("non-finite loss after the last step", history, params)
    history.append(final)
    if renormalize_shape is not None:
        logger.info("post-training kappa %.6g", kappa_bound(params, cfg, renormalize_shape))
    return params, history
