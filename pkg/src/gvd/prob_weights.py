"""Model-based weights from local gradient statistics of the cartoon.

For each pixel the local variance of the cartoon gradient is estimated by
maximum likelihood over a ``(2N+1) x (2N+1)`` window, and its (floored)
reciprocal is the raw weight::

    w_raw = 1 / (eps + sum_window ||grad c||^2 / (2 M))

with ``M`` the number of window pixels actually inside the image.  ``W1``
is the raw map divided by its maximum; ``W2`` is the same normalization of
the reciprocal map, which encodes the cartoon/texture covariance duality.
Both are scaled by ``omega_max`` and clamped to the admissible range.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .grid_ops import StackedState, WeightPair, as_image, gradient
from .linsolve import solve_normal_equations


def _box_sum(a: np.ndarray, radius: int):
    """Sum and sample count over a clipped square window, per pixel of ``(..., h, w)``."""

    def along(arr, axis):
        size = arr.shape[axis]
        cs = np.cumsum(arr, axis=axis)
        zero_shape = list(arr.shape)
        zero_shape[axis] = 1
        cs = np.concatenate([np.zeros(zero_shape), cs], axis=axis)
        idx = np.arange(size)
        hi = np.minimum(idx + radius + 1, size)
        lo = np.maximum(idx - radius, 0)
        return np.take(cs, hi, axis=axis) - np.take(cs, lo, axis=axis), (hi - lo)

    s, ny = along(a, -2)
    s, nx = along(s, -1)
    return s, ny[:, None] * nx[None, :]


def raw_weights(cartoon, radius: int, epsilon: float) -> np.ndarray:
    """Per-pixel estimator ``(eps + local_sum ||grad c||^2 / (2M))^-1``."""
    c = as_image(cartoon, "cartoon")
    g = gradient(c)
    energy = g[..., 0, :, :] ** 2 + g[..., 1, :, :] ** 2
    total, count = _box_sum(energy, radius)
    return 1.0 / (epsilon + total / (2.0 * count))


def _normalize(raw: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    peak = np.max(raw, axis=(-2, -1), keepdims=True)
    return np.clip(cfg.omega_max * (raw / peak), cfg.omega_min, cfg.omega_max)


def estimate_weights(x: StackedState, cfg: ModelConfig, *, return_raw=False):
    """Isotropic admissible weights from the cartoon channel of ``x``.

    With ``return_raw=True`` also returns the raw maps feeding ``W1`` and
    ``W2`` (the estimator and its reciprocal).
    """
    raw = raw_weights(x.cartoon, cfg.neighborhood_radius, cfg.epsilon)
    m1 = _normalize(raw, cfg)
    m2 = _normalize(1.0 / raw, cfg)
    w = WeightPair.isotropic_maps(m1, m2, cfg)
    if return_raw:
        return w, raw, 1.0 / raw
    return w


class ProbabilisticSource:
    """Weight source for the outer iteration that ignores learned parameters."""

    name = "probabilistic"

    def weights(self, x: StackedState, cfg: ModelConfig) -> WeightPair:
        return estimate_weights(x, cfg)

    def lambdas(self, f, cfg: ModelConfig):
        return cfg.lambda1, cfg.lambda2


def identity_solve(f, cfg: ModelConfig):
    """Single solve with the uniform stand-in ``omega_max I`` for identity weights."""
    f = as_image(f, "observation")
    w0 = WeightPair.uniform(f.shape, cfg.omega_max, cfg)
    return solve_normal_equations(f, w0, cfg)


def probabilistic_decompose(f, cfg: ModelConfig):
    """Iteratively re-estimated probabilistic decomposition.

    The first solve uses uniform weights ``omega_max``; then ``cfg.K``
    rounds of (estimate weights from the current cartoon, re-solve warm
    started from the current state) follow.

    Returns
    -------
    state : StackedState
        Final ``(c, xi)``; the texture is ``div(xi)``.
    reports : list of SolveReport
        ``cfg.K + 1`` entries, the identity-weight solve first.
    """
    x, report = identity_solve(f, cfg)
    reports = [report]
    for _ in range(cfg.K):
        w = estimate_weights(x, cfg)
        x, report = solve_normal_equations(f, w, cfg, warm_start=x)
        reports.append(report)
    return x, reports
