"""Small convolutional weight predictor and the scalar lambda head.

The weight map is ``x -> conv1 (3x3) -> leaky ReLU -> conv2 (1x1) ->
sigmoid -> [omega_min, omega_max]``, applied to the three channels
``(c, xi_x, xi_y)`` of the current state.  The lambda head maps four global
statistics of the observation through a two-layer perceptron and a
softplus.  Every forward pass has a hand-written reverse pass used by the
bilevel trainer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh
from scipy.special import expit

from .config import ModelConfig
from .errors import ConvergenceError, FormatError
from .grid_ops import StackedState, WeightPair, as_image, gradient, power_iteration

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "head_w1", "head_b1", "head_w2", "head_b2")
N_STATS = 4


@dataclass
class PredictorParams:
    """Predictor weights ``Theta``.

    Shapes: ``conv1_w (C, 3, 3, 3)``, ``conv1_b (C,)``, ``conv2_w (P, C, 1, 1)``,
    ``conv2_b (P,)`` with ``P = 2`` (isotropic) or ``4`` (anisotropic),
    ``head_w1 (H, 4)``, ``head_b1 (H,)``, ``head_w2 (2, H)``, ``head_b2 (2,)``.
    ``spectral_factors`` are the target per-layer norms used by
    :func:`renormalize`.
    """

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    head_w1: np.ndarray
    head_b1: np.ndarray
    head_w2: np.ndarray
    head_b2: np.ndarray
    leaky_slope: float = 0.01
    spectral_factors: tuple = field(default=(1.0, 1.0))

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        C = self.conv1_w.shape[0]
        P = self.conv2_w.shape[0]
        H = self.head_w1.shape[0]
        expected = {
            "conv1_w": (C, 3, 3, 3), "conv1_b": (C,), "conv2_w": (P, C, 1, 1), "conv2_b": (P,),
            "head_w1": (H, N_STATS), "head_b1": (H,), "head_w2": (2, H), "head_b2": (2,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if P not in (2, 4):
            raise ValueError(f"conv2 must emit 2 or 4 channels, got {P}")
        self.spectral_factors = tuple(float(c) for c in self.spectral_factors)
        if len(self.spectral_factors) != 2 or min(self.spectral_factors) <= 0:
            raise ValueError("spectral_factors must be two positive reals")
        if not all(np.all(np.isfinite(getattr(self, n))) for n in PARAM_NAMES):
            raise ValueError("parameters must be finite")

    @property
    def channels(self) -> int:
        return self.conv1_w.shape[0]

    @property
    def anisotropic(self) -> bool:
        return self.conv2_w.shape[0] == 4

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace_arrays(self, arrays: dict) -> "PredictorParams":
        merged = {**self.arrays(), **arrays}
        return PredictorParams(**{k: np.array(v, dtype=np.float64) for k, v in merged.items()},
                               leaky_slope=self.leaky_slope, spectral_factors=self.spectral_factors)

    def copy(self) -> "PredictorParams":
        return self.replace_arrays({})

    def zeros_like(self) -> dict:
        return {name: np.zeros_like(a) for name, a in self.arrays().items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays().values()])


def zero_params(cfg: ModelConfig, channels=8, hidden=8) -> PredictorParams:
    """All-zero parameters: uniform midpoint weights and ``lambda = log 2``."""
    P = 4 if cfg.anisotropic else 2
    return PredictorParams(np.zeros((channels, 3, 3, 3)), np.zeros(channels), np.zeros((P, channels, 1, 1)),
                           np.zeros(P), np.zeros((hidden, N_STATS)), np.zeros(hidden),
                           np.zeros((2, hidden)), np.zeros(2))


def _softplus_inv(y):
    return np.log(np.expm1(y))


def init_params(cfg: ModelConfig, seed=0, channels=8, hidden=8, scale=0.3) -> PredictorParams:
    """Small random parameters whose lambda head starts near the config lambdas."""
    rng = np.random.default_rng(seed)
    P = 4 if cfg.anisotropic else 2
    return PredictorParams(
        conv1_w=scale * rng.standard_normal((channels, 3, 3, 3)) / 3.0,
        conv1_b=0.1 * rng.standard_normal(channels),
        conv2_w=scale * rng.standard_normal((P, channels, 1, 1)) / np.sqrt(channels),
        conv2_b=np.zeros(P),
        head_w1=0.1 * rng.standard_normal((hidden, N_STATS)),
        head_b1=0.1 * np.abs(rng.standard_normal(hidden)),
        head_w2=0.01 * rng.standard_normal((2, hidden)),
        head_b2=_softplus_inv(np.array([cfg.lambda1, cfg.lambda2])),
    )


# ---------------------------------------------------------------------------
# Convolution (cross-correlation, zero padding, stride 1)
# ---------------------------------------------------------------------------

def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """Shifted copies ``(k, k, ..., Cin, h, w)`` of a zero-padded input."""
    p = k // 2
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    xp = np.pad(x, pad)
    return np.stack([np.stack([xp[..., dy:dy + h, dx:dx + w] for dx in range(k)]) for dy in range(k)])


def conv2d(x: np.ndarray, kernel: np.ndarray, bias=None) -> np.ndarray:
    """``out[o] = b[o] + sum_{i,dy,dx} K[o,i,dy,dx] x_pad[i, y+dy, x+dx]``."""
    k = kernel.shape[-1]
    out = np.einsum("oiab,ab...ihw->...ohw", kernel, _patches(x, k))
    if bias is not None:
        out = out + bias[:, None, None]
    return out


def conv2d_adjoint(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Transpose of the linear part of :func:`conv2d` (maps outputs back to inputs)."""
    k = kernel.shape[-1]
    p = k // 2
    h, w = g.shape[-2:]
    gp = np.einsum("oiab,...ohw->ab...ihw", kernel, g)
    out = np.zeros(gp.shape[2:-2] + (h + 2 * p, w + 2 * p))
    for dy in range(k):
        for dx in range(k):
            out[..., dy:dy + h, dx:dx + w] += gp[dy, dx]
    return out[..., p:p + h, p:p + w]


def conv2d_kernel_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """Gradient of ``<g, conv2d(x, K)>`` with respect to ``K``, summed over batch axes."""
    g = g.reshape((-1,) + g.shape[-3:])
    x = x.reshape((-1,) + x.shape[-3:])
    return np.einsum("nohw,abnihw->oiab", g, _patches(x, k))


def spectral_norm_conv(kernel, input_shape, *, method="lanczos", tol=1e-5, max_iters=20000, seed=0) -> float:
    """Largest singular value of the zero-padded convolution on an ``h x w`` input.

    Parameters
    ----------
    kernel : array, shape (Cout, Cin, k, k)
    input_shape : (h, w)
    method : {"lanczos", "power"}
        ``"power"`` alternates the convolution and its adjoint until the
        eigen-residual of ``K^T K`` is below ``tol``; ``"lanczos"`` hands the
        same operator to ARPACK, which converges far faster when the top
        singular values are clustered.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    cin = kernel.shape[1]
    h, w = input_shape
    n = cin * h * w
    if not np.any(kernel):
        return 0.0

    def gram(v):
        u = v.reshape(cin, h, w)
        return conv2d_adjoint(conv2d(u, kernel), kernel).reshape(-1)

    if method == "power" or n < 3:
        try:
            theta, _ = power_iteration(gram, n, tol=tol, max_iters=max_iters, seed=seed)
        except ConvergenceError as exc:
            est = np.sqrt(max(exc.estimate, 0.0))
            raise ConvergenceError(f"conv spectral norm did not converge (estimate {est:.12g})",
                                   estimate=est, iterations=exc.iterations) from exc
        return float(np.sqrt(max(theta, 0.0)))
    if method != "lanczos":
        raise ValueError(f"unknown method {method!r}")
    op = LinearOperator((n, n), matvec=gram, dtype=np.float64)
    v0 = np.random.default_rng(seed).standard_normal(n)
    try:
        theta = eigsh(op, k=1, which="LA", v0=v0, tol=min(tol, 1e-10), maxiter=max_iters,
                      return_eigenvectors=False)[0]
    except ArpackNoConvergence as exc:
        est = float(np.sqrt(max(exc.eigenvalues.max(), 0.0))) if len(exc.eigenvalues) else float("nan")
        raise ConvergenceError(f"conv spectral norm did not converge (estimate {est:.12g})",
                               estimate=est, iterations=max_iters) from exc
    return float(np.sqrt(max(theta, 0.0)))


def conv_matrix_dense(kernel, input_shape) -> np.ndarray:
    """Assembled matrix of the linear convolution (validation oracle; small inputs only)."""
    cin = kernel.shape[1]
    n = cin * input_shape[0] * input_shape[1]
    cols = [conv2d(e.reshape((cin,) + tuple(input_shape)), kernel).ravel() for e in np.eye(n)]
    return np.stack(cols, axis=1)


def layer_norms(params: PredictorParams, input_shape) -> tuple[float, float]:
    return (spectral_norm_conv(params.conv1_w, input_shape),
            spectral_norm_conv(params.conv2_w, input_shape))


def kappa_bound(params: PredictorParams, cfg: ModelConfig, input_shape) -> float:
    """Lipschitz bound of the weight map on ``h x w`` inputs.

    Product of the two layer spectral norms, the leaky-ReLU constant 1 and
    the scaled-sigmoid slope ``(omega_max - omega_min) / 4``.
    """
    s1, s2 = layer_norms(params, input_shape)
    return s1 * s2 * (cfg.omega_max - cfg.omega_min) / 4.0


def renormalize(params: PredictorParams, input_shape, factors=None) -> PredictorParams:
    """Rescale each conv kernel to spectral norm ``c_i`` (default ``params.spectral_factors``)."""
    factors = params.spectral_factors if factors is None else tuple(float(c) for c in factors)
    s1, s2 = layer_norms(params, input_shape)
    if s1 == 0.0 or s2 == 0.0:
        raise ValueError("cannot renormalize a zero kernel")
    out = params.replace_arrays({"conv1_w": params.conv1_w * (factors[0] / s1),
                                 "conv2_w": params.conv2_w * (factors[1] / s2)})
    out.spectral_factors = factors
    return out


# ---------------------------------------------------------------------------
# Forward / reverse passes
# ---------------------------------------------------------------------------

def _state_channels(x: StackedState) -> np.ndarray:
    return np.concatenate([x.cartoon[..., None, :, :], x.flow], axis=-3)


def predict_weights_forward(x: StackedState, params: PredictorParams, cfg: ModelConfig):
    """Weights plus the intermediate values needed by :func:`predict_weights_backward`."""
    if params.anisotropic != cfg.anisotropic:
        raise ValueError("predictor output channels do not match cfg.anisotropic")
    inp = _state_channels(x)
    z = conv2d(inp, params.conv1_w, params.conv1_b)
    a = np.where(z > 0, z, params.leaky_slope * z)
    s = conv2d(a, params.conv2_w, params.conv2_b)
    sig = expit(s)
    span = cfg.omega_max - cfg.omega_min
    m = np.clip(cfg.omega_min + span * sig, cfg.omega_min, cfg.omega_max)
    if params.anisotropic:
        w1, w2 = m[..., 0:2, :, :], m[..., 2:4, :, :]
    else:
        w1 = np.stack([m[..., 0, :, :]] * 2, axis=-3)
        w2 = np.stack([m[..., 1, :, :]] * 2, axis=-3)
    cache = {"inp": inp, "z": z, "a": a, "sig": sig, "span": span}
    return WeightPair(w1, w2, cfg.omega_min, cfg.omega_max), cache


def predict_weights(x: StackedState, params: PredictorParams, cfg: ModelConfig) -> WeightPair:
    """Admissible weight pair predicted from the current state."""
    return predict_weights_forward(x, params, cfg)[0]


def predict_weights_backward(cache, params: PredictorParams, w1_bar, w2_bar):
    """Pull weight cotangents back to parameter and input cotangents.

    Returns ``(grads, x_bar)`` where ``grads`` holds the four conv blocks
    and ``x_bar`` is a :class:`StackedState` of input cotangents.
    """
    if params.anisotropic:
        m_bar = np.concatenate([w1_bar, w2_bar], axis=-3)
    else:
        m_bar = np.stack([w1_bar[..., 0, :, :] + w1_bar[..., 1, :, :],
                          w2_bar[..., 0, :, :] + w2_bar[..., 1, :, :]], axis=-3)
    sig = cache["sig"]
    s_bar = m_bar * cache["span"] * sig * (1.0 - sig)
    batch_axes = tuple(range(s_bar.ndim - 3))
    grads = {
        "conv2_w": conv2d_kernel_grad(cache["a"], s_bar, 1),
        "conv2_b": s_bar.sum(axis=batch_axes + (-2, -1)),
    }
    a_bar = conv2d_adjoint(s_bar, params.conv2_w)
    z_bar = np.where(cache["z"] > 0, a_bar, params.leaky_slope * a_bar)
    grads["conv1_w"] = conv2d_kernel_grad(cache["inp"], z_bar, 3)
    grads["conv1_b"] = z_bar.sum(axis=batch_axes + (-2, -1))
    inp_bar = conv2d_adjoint(z_bar, params.conv1_w)
    return grads, StackedState(inp_bar[..., 0, :, :], inp_bar[..., 1:, :, :])


def image_statistics(f) -> np.ndarray:
    """Mean and std of ``f`` and of ``||grad f||``; shape ``(..., 4)``."""
    f = as_image(f, "observation")
    g = gradient(f)
    mag = np.sqrt(g[..., 0, :, :] ** 2 + g[..., 1, :, :] ** 2)
    ax = (-2, -1)
    return np.stack([f.mean(axis=ax), f.std(axis=ax), mag.mean(axis=ax), mag.std(axis=ax)], axis=-1)


def predict_lambdas_forward(f, params: PredictorParams):
    stats = image_statistics(f)
    pre = stats @ params.head_w1.T + params.head_b1
    hid = np.maximum(pre, 0.0)
    out = hid @ params.head_w2.T + params.head_b2
    lam = np.logaddexp(0.0, out)
    return lam, {"stats": stats, "pre": pre, "hid": hid, "out": out}


def predict_lambdas(f, params: PredictorParams):
    """Strictly positive ``(lambda1, lambda2)``; arrays of shape ``(B,)`` for batched ``f``."""
    lam, _ = predict_lambdas_forward(f, params)
    return lam[..., 0], lam[..., 1]


def predict_lambdas_backward(cache, params: PredictorParams, lam_bar) -> dict:
    """Head-parameter gradients from cotangents ``lam_bar`` of shape ``(..., 2)``."""
    out_bar = lam_bar * expit(cache["out"])
    hid = cache["hid"].reshape(-1, params.head_w1.shape[0])
    ob = out_bar.reshape(-1, 2)
    pre_bar = (ob @ params.head_w2) * (cache["pre"].reshape(hid.shape) > 0)
    stats = cache["stats"].reshape(-1, N_STATS)
    return {"head_w2": ob.T @ hid, "head_b2": ob.sum(axis=0),
            "head_w1": pre_bar.T @ stats, "head_b1": pre_bar.sum(axis=0)}


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_MAGIC = b"GVDP"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII3d")


def params_to_bytes(params: PredictorParams) -> bytes:
    C = params.channels
    P = params.conv2_w.shape[0]
    H = params.head_w1.shape[0]
    header = _HEADER.pack(_MAGIC, _VERSION, C, P, H, params.leaky_slope, *params.spectral_factors)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays().values())
    return header + body


def params_from_bytes(data: bytes) -> PredictorParams:
    if len(data) < _HEADER.size:
        raise FormatError("parameter file too short for header")
    magic, version, C, P, H, slope, c1, c2 = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported parameter file version {version}")
    shapes = [(C, 3, 3, 3), (C,), (P, C, 1, 1), (P,), (H, N_STATS), (H,), (2, H), (2,)]
    total = sum(int(np.prod(s)) for s in shapes)
    if C > 1 << 20 or H > 1 << 20:
        raise FormatError("layer dimensions overflow")
    payload = data[_HEADER.size:]
    if len(payload) < 8 * total:
        raise FormatError("truncated payload")
    if len(payload) > 8 * total:
        raise FormatError("trailing bytes after payload")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    arrays, pos = {}, 0
    for name, shape in zip(PARAM_NAMES, shapes):
        size = int(np.prod(shape))
        arrays[name] = flat[pos:pos + size].reshape(shape)
        pos += size
    try:
        return PredictorParams(**arrays, leaky_slope=slope, spectral_factors=(c1, c2))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_params(path, params: PredictorParams) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> PredictorParams:
    return params_from_bytes(Path(path).read_bytes())


__all__ = [
    "PredictorParams", "zero_params", "init_params", "conv2d", "conv2d_adjoint", "spectral_norm_conv",
    "kappa_bound", "renormalize", "predict_weights", "predict_lambdas", "image_statistics",
    "save_params", "load_params", "params_to_bytes", "params_from_bytes",
]
