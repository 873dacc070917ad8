"""Finite-difference operators on an ``h x w`` grid and the block operators
of the stacked decomposition unknown ``x = (c, xi)``.

Images are float64 arrays of shape ``(h, w)``; flow fields are arrays of
shape ``(2, h, w)`` holding the x (column) and y (row) components.  Every
operator also accepts leading batch dimensions.

The gradient uses forward differences with a replicate (Neumann) boundary,
so the last column (row) of the x (y) component is zero.  The divergence is
defined as the exact negative adjoint of the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConvergenceError

DENSE_LIMIT = 256
POWER_LIMIT = 1024


def as_image(u, name="image") -> np.ndarray:
    a = np.asarray(u, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] < 1 or a.shape[-2] < 1:
        raise ValueError(f"{name} must have shape (..., h, w), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def gradient(u: np.ndarray) -> np.ndarray:
    """Forward-difference gradient; returns shape ``(..., 2, h, w)``."""
    u = np.asarray(u, dtype=np.float64)
    g = np.zeros(u.shape[:-2] + (2,) + u.shape[-2:])
    g[..., 0, :, :-1] = u[..., :, 1:] - u[..., :, :-1]
    g[..., 1, :-1, :] = u[..., 1:, :] - u[..., :-1, :]
    return g


def divergence(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`gradient`; maps ``(..., 2, h, w)`` to ``(..., h, w)``."""
    p = np.asarray(p, dtype=np.float64)
    px = p[..., 0, :, :]
    py = p[..., 1, :, :]
    d = np.zeros(p.shape[:-3] + p.shape[-2:])
    d[..., :, :-1] += px[..., :, :-1]
    d[..., :, 1:] -= px[..., :, :-1]
    d[..., :-1, :] += py[..., :-1, :]
    d[..., 1:, :] -= py[..., :-1, :]
    return d


@dataclass
class StackedState:
    """The unknown ``x = (c, xi)``: a cartoon image and a two-channel flow field."""

    cartoon: np.ndarray
    flow: np.ndarray

    def __post_init__(self):
        self.cartoon = np.asarray(self.cartoon, dtype=np.float64)
        self.flow = np.asarray(self.flow, dtype=np.float64)
        expected = self.cartoon.shape[:-2] + (2,) + self.cartoon.shape[-2:]
        if self.flow.shape != expected:
            raise ValueError(f"flow shape {self.flow.shape} does not match cartoon {self.cartoon.shape}")

    @classmethod
    def from_observation(cls, f) -> "StackedState":
        """The initial state ``(f, 0)``."""
        f = as_image(f, "observation")
        return cls(f.copy(), np.zeros(f.shape[:-2] + (2,) + f.shape[-2:]))

    @classmethod
    def zeros(cls, shape) -> "StackedState":
        shape = tuple(shape)
        return cls(np.zeros(shape), np.zeros(shape[:-2] + (2,) + shape[-2:]))

    @classmethod
    def from_vector(cls, v: np.ndarray, shape) -> "StackedState":
        """Inverse of :meth:`vector` for image shape ``(h, w)``."""
        h, w = shape
        n = h * w
        v = np.asarray(v, dtype=np.float64)
        lead = v.shape[:-1]
        return cls(v[..., :n].reshape(lead + (h, w)), v[..., n:].reshape(lead + (2, h, w)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.cartoon.shape[-2:]

    def vector(self) -> np.ndarray:
        """Concatenate ``c``, ``xi_x``, ``xi_y`` into one ``3n`` vector (per batch item)."""
        lead = self.cartoon.shape[:-2]
        return np.concatenate([self.cartoon.reshape(lead + (-1,)), self.flow.reshape(lead + (-1,))], axis=-1)

    def texture(self) -> np.ndarray:
        return divergence(self.flow)

    def norm(self) -> np.ndarray | float:
        return np.sqrt(np.sum(self.cartoon**2, axis=(-2, -1)) + np.sum(self.flow**2, axis=(-3, -2, -1)))

    def copy(self) -> "StackedState":
        return StackedState(self.cartoon.copy(), self.flow.copy())


@dataclass
class WeightPair:
    """Diagonal weight maps ``W1`` (on the cartoon gradient) and ``W2`` (on the flow).

    ``w1`` and ``w2`` have shape ``(..., 2, h, w)``; index 0 is the x entry,
    index 1 the y entry.
    """

    w1: np.ndarray
    w2: np.ndarray
    omega_min: float
    omega_max: float

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        if self.w1.shape != self.w2.shape or self.w1.ndim < 3 or self.w1.shape[-3] != 2:
            raise ValueError(f"weight maps must share shape (..., 2, h, w), got {self.w1.shape}, {self.w2.shape}")

    @classmethod
    def uniform(cls, shape, value: float, cfg: ModelConfig) -> "WeightPair":
        shape = tuple(shape)
        full = np.full(shape[:-2] + (2,) + shape[-2:], float(value))
        return cls(full, full.copy(), cfg.omega_min, cfg.omega_max)

    @classmethod
    def isotropic_maps(cls, m1, m2, cfg: ModelConfig) -> "WeightPair":
        """Build a pair whose x and y entries share the per-pixel maps ``m1``, ``m2``."""
        m1 = np.asarray(m1, dtype=np.float64)
        m2 = np.asarray(m2, dtype=np.float64)
        w1 = np.stack([m1, m1], axis=-3)
        w2 = np.stack([m2, m2], axis=-3)
        return cls(w1, w2, cfg.omega_min, cfg.omega_max)

    @property
    def isotropic(self) -> bool:
        return bool(np.array_equal(self.w1[..., 0, :, :], self.w1[..., 1, :, :])
                    and np.array_equal(self.w2[..., 0, :, :], self.w2[..., 1, :, :]))

    def is_admissible(self) -> bool:
        lo, hi = self.omega_min, self.omega_max
        return bool(np.all((self.w1 >= lo) & (self.w1 <= hi) & (self.w2 >= lo) & (self.w2 <= hi)))

    def max_abs_diff(self, other: "WeightPair") -> tuple[float, float]:
        """Operator 2-norms of ``W1~ - W1`` and ``W2~ - W2`` (max-abs diagonal difference)."""
        return float(np.max(np.abs(other.w1 - self.w1))), float(np.max(np.abs(other.w2 - self.w2)))


def apply_S(x: StackedState) -> np.ndarray:
    """``S x = c + div(xi)``."""
    return x.cartoon + divergence(x.flow)


def apply_S_adjoint(r) -> StackedState:
    """``S^T r = (r, div^T r) = (r, -grad r)``."""
    r = np.asarray(r, dtype=np.float64)
    return StackedState(r.copy(), -gradient(r))


def _apply_A_arrays(c, xi, w1, w2, lam1, lam2):
    s = c + divergence(xi)
    out_c = s - lam1 * divergence(w1 * gradient(c))
    out_xi = -gradient(s) + lam2 * w2 * xi
    return out_c, out_xi


def _lam(value, ndim_extra):
    """Broadcast a scalar or per-batch array of lambdas against ``(..., h, w)``-like arrays."""
    a = np.asarray(value, dtype=np.float64)
    return a.reshape(a.shape + (1,) * ndim_extra)


def apply_A(x: StackedState, w: WeightPair, cfg: ModelConfig, lambda1=None, lambda2=None) -> StackedState:
    """Matrix-free ``A(W1, W2) x = S^T S x + lambda1 G^T W1 G x + lambda2 R^T W2 R x``.

    ``lambda1``/``lambda2`` override the config values; they may be arrays
    with one entry per batch item.
    """
    if w.w1.shape[-2:] != x.shape or w.w1.shape[:-3] not in ((), x.cartoon.shape[:-2]):
        raise ValueError(f"weights of shape {w.w1.shape} do not match state of shape {x.cartoon.shape}")
    lam1 = cfg.lambda1 if lambda1 is None else lambda1
    lam2 = cfg.lambda2 if lambda2 is None else lambda2
    c, xi = _apply_A_arrays(x.cartoon, x.flow, w.w1, w.w2, _lam(lam1, 2), _lam(lam2, 3))
    return StackedState(c, xi)


def energy(x: StackedState, f, w: WeightPair, cfg: ModelConfig, lambda1=None, lambda2=None):
    """Objective ``J(x) = 1/2||Sx - f||^2 + lambda1/2 ||Gx||_W1^2 + lambda2/2 ||Rx||_W2^2``."""
    lam1 = cfg.lambda1 if lambda1 is None else lambda1
    lam2 = cfg.lambda2 if lambda2 is None else lambda2
    r = apply_S(x) - f
    g = gradient(x.cartoon)
    return (0.5 * np.sum(r**2, axis=(-2, -1))
            + 0.5 * np.asarray(lam1) * np.sum(w.w1 * g**2, axis=(-3, -2, -1))
            + 0.5 * np.asarray(lam2) * np.sum(w.w2 * x.flow**2, axis=(-3, -2, -1)))


# ---------------------------------------------------------------------------
# Dense assembly (validation oracles; small grids only)
# ---------------------------------------------------------------------------

def gradient_matrix(shape) -> np.ndarray:
    """Dense ``2n x n`` forward-difference matrix, rows ordered (x block, y block)."""
    h, w = shape
    n = h * w
    D = np.zeros((2 * n, n))
    for i in range(h):
        for j in range(w):
            q = i * w + j
            if j < w - 1:
                D[q, q] = -1.0
                D[q, q + 1] = 1.0
            if i < h - 1:
                D[n + q, q] = -1.0
                D[n + q, q + w] = 1.0
    return D


def block_matrices(shape):
    """Dense ``S``, ``G``, ``R`` acting on the stacked vector ``(c, xi_x, xi_y)``."""
    h, w = shape
    n = h * w
    D = gradient_matrix(shape)
    S = np.hstack([np.eye(n), -D.T])
    G = np.hstack([D, np.zeros((2 * n, 2 * n))])
    R = np.hstack([np.zeros((2 * n, n)), np.eye(2 * n)])
    return S, G, R


def assemble_A(w: WeightPair, cfg: ModelConfig, lambda1=None, lambda2=None) -> np.ndarray:
    lam1 = cfg.lambda1 if lambda1 is None else lambda1
    lam2 = cfg.lambda2 if lambda2 is None else lambda2
    shape = w.w1.shape[-2:]
    S, G, R = block_matrices(shape)
    W1 = np.diag(w.w1.reshape(-1))
    W2 = np.diag(w.w2.reshape(-1))
    return S.T @ S + lam1 * G.T @ W1 @ G + lam2 * R.T @ W2 @ R


def assemble_M(cfg: ModelConfig, shape, lambda1=None, lambda2=None) -> np.ndarray:
    """Stacked operator ``[S; sqrt(lambda1 omega_min) G; sqrt(lambda2 omega_min) R]``."""
    lam1 = cfg.lambda1 if lambda1 is None else lambda1
    lam2 = cfg.lambda2 if lambda2 is None else lambda2
    S, G, R = block_matrices(shape)
    return np.vstack([S, np.sqrt(lam1 * cfg.omega_min) * G, np.sqrt(lam2 * cfg.omega_min) * R])


# ---------------------------------------------------------------------------
# Spectral constants
# ---------------------------------------------------------------------------

def power_iteration(apply_gram, n: int, *, tol=1e-6, max_iters=10000, seed=0, batch_shape=()):
    """Largest eigenvalue of a symmetric positive semidefinite operator.

    Stops once the eigen-residual ``||B v - theta v||`` falls below
    ``tol * theta``, which bounds the distance of ``theta`` to the spectrum.
    Returns ``(theta, v)``.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(tuple(batch_shape) + (n,))
    v /= np.linalg.norm(v)
    theta = 0.0
    for it in range(1, max_iters + 1):
        Bv = apply_gram(v)
        theta = float(np.vdot(v, Bv))
        res = np.linalg.norm(Bv - theta * v)
        nrm = np.linalg.norm(Bv)
        if nrm == 0.0:
            return 0.0, v
        if res <= tol * abs(theta):
            return theta, v
        v = Bv / nrm
    raise ConvergenceError(f"power iteration did not converge in {max_iters} iterations "
                           f"(estimate {theta:.12g})", estimate=theta, iterations=max_iters)


def operator_norm(which: str, shape, *, method="auto", tol=1e-6, max_iters=10000, seed=0) -> float:
    """Spectral norm of ``S``, ``G`` or ``R`` on an ``h x w`` grid.

    ``method="power"`` runs power iteration on the smaller Gram operator
    (``S S^T`` for ``S``, ``G^T G`` restricted to the cartoon block for
    ``G``).  ``method="spectral"`` uses the closed-form top eigenvalue of the
    Neumann Laplacian.  ``"auto"`` picks power iteration up to
    ``POWER_LIMIT`` pixels, where its eigenvalue gap still allows
    convergence within ``max_iters``.
    """
    h, w = shape
    n = h * w
    if which == "R":
        return 1.0
    if which not in ("S", "G"):
        raise ValueError(f"unknown operator {which!r}; expected 'S', 'G' or 'R'")
    if method == "auto":
        method = "power" if n <= POWER_LIMIT else "spectral"
    if method == "spectral":
        top = float(laplacian_eigenvalues(shape).max())
        return float(np.sqrt(top if which == "G" else 1.0 + top))
    if method != "power":
        raise ValueError(f"unknown method {method!r}")
    if which == "G":
        def gram(v):
            u = v.reshape(h, w)
            return -divergence(gradient(u)).reshape(-1)
    else:
        def gram(v):
            u = v.reshape(h, w)
            return (u - divergence(gradient(u))).reshape(-1)
    theta, _ = power_iteration(gram, n, tol=tol, max_iters=max_iters, seed=seed)
    return float(np.sqrt(theta))


def laplacian_eigenvalues(shape) -> np.ndarray:
    """Eigenvalues ``mu`` of ``grad^T grad`` under the Neumann forward-difference stencil."""
    h, w = shape
    ey = 4.0 * np.sin(np.pi * np.arange(h) / (2 * h)) ** 2
    ex = 4.0 * np.sin(np.pi * np.arange(w) / (2 * w)) ** 2
    return (ey[:, None] + ex[None, :]).reshape(-1)


def _alpha_spectral(shape, lam1, lam2, omega) -> float:
    # A(omega I) splits into: divergence-free flows (eigenvalue lam2*omega),
    # the constant cartoon (eigenvalue 1), and one 2x2 block per nonzero
    # Laplacian eigenvalue mu coupling c = u and xi = grad u / sqrt(mu).
    mu = laplacian_eigenvalues(shape)
    mu = mu[mu > 1e-14]
    a = 1.0 + lam1 * omega * mu
    d = mu + lam2 * omega
    b = np.sqrt(mu)
    mean = 0.5 * (a + d)
    det = a * d - b * b
    disc = np.sqrt(np.maximum(mean**2 - det, 0.0))
    # smaller root written as det / larger root to avoid cancellation
    small = det / (mean + disc)
    candidates = [lam2 * omega, 1.0]
    if small.size:
        candidates.append(float(np.min(small)))
    return float(min(candidates))


def _alpha_inverse_iteration(shape, lam1, lam2, omega, *, tol, max_iters, seed) -> float:
    from .linsolve import conjugate_gradient

    h, w = shape
    n = h * w
    w1 = np.full((2, h, w), omega)

    def gram(v):
        x = StackedState.from_vector(v, shape)
        c, xi = _apply_A_arrays(x.cartoon, x.flow, w1, w1, lam1, lam2)
        return np.concatenate([c.reshape(-1), xi.reshape(-1)])

    rng = np.random.default_rng(seed)
    v = rng.standard_normal(3 * n)
    v /= np.linalg.norm(v)
    theta = np.inf
    for it in range(1, max_iters + 1):
        y, info = conjugate_gradient(gram, v, x0=v * (1.0 / theta if np.isfinite(theta) else 1.0),
                                     tol=1e-13, max_iters=20 * 3 * n)
        ny = np.linalg.norm(y)
        v_new = y / ny
        Bv = gram(v_new)
        theta = float(v_new @ Bv)
        res = np.linalg.norm(Bv - theta * v_new)
        v = v_new
        if res <= tol * theta:
            return theta
    raise ConvergenceError(f"inverse iteration did not converge in {max_iters} iterations "
                           f"(estimate {theta:.12g})", estimate=theta, iterations=max_iters)


def alpha_constant(cfg: ModelConfig, shape, *, lambda1=None, lambda2=None, method="auto",
                   tol=1e-6, max_iters=10000, seed=0) -> float:
    """Coercivity constant ``alpha = sigma_min(M)^2 = lambda_min(M^T M)``.

    ``M^T M`` equals ``A(omega_min I, omega_min I)``.  ``method`` selects

    * ``"dense"``: eigendecomposition of the assembled ``M^T M``;
    * ``"iterative"``: inverse power iteration with matrix-free solves;
    * ``"spectral"``: closed form from the Neumann Laplacian spectrum;
    * ``"auto"``: dense up to 256 pixels, spectral above.
    """
    lam1 = cfg.lambda1 if lambda1 is None else float(lambda1)
    lam2 = cfg.lambda2 if lambda2 is None else float(lambda2)
    h, w = shape
    if method == "auto":
        method = "dense" if h * w <= DENSE_LIMIT else "spectral"
    if method == "dense":
        # M^T M assembled as A(omega_min I): bit-identical to the matrix the
        # the coercivity check builds for the extreme admissible weights
        floor = WeightPair.uniform(shape, cfg.omega_min, cfg)
        return float(np.linalg.eigvalsh(assemble_A(floor, cfg, lam1, lam2))[0])
    if method == "spectral":
        return _alpha_spectral(shape, lam1, lam2, cfg.omega_min)
    if method == "iterative":
        return _alpha_inverse_iteration(shape, lam1, lam2, cfg.omega_min, tol=tol,
                                        max_iters=max_iters, seed=seed)
    raise ValueError(f"unknown method {method!r}")
