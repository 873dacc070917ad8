"""Outer fixed-point iteration ``x_k = T(x_{k-1})``.

Each step asks a weight source for ``(W1, W2)`` at the previous state and
re-solves the normal equations warm-started from it.  Sources expose
``weights(x, cfg)`` and ``lambdas(f, cfg)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .errors import GVDError
from .grid_ops import StackedState, WeightPair, apply_S, as_image, energy
from .linsolve import SolveReport, solve_normal_equations
from .predictor import PredictorParams, predict_lambdas, predict_weights
from .prob_weights import ProbabilisticSource, identity_solve

logger = logging.getLogger(__name__)

MIN_STEP = 1e-13


class PredictorSource:
    """Learned weights and lambdas from a :class:`PredictorParams`."""

    name = "predictor"

    def __init__(self, params: PredictorParams):
        self.params = params

    def weights(self, x: StackedState, cfg: ModelConfig) -> WeightPair:
        return predict_weights(x, self.params, cfg)

    def lambdas(self, f, cfg: ModelConfig):
        l1, l2 = predict_lambdas(f, self.params)
        return (float(l1), float(l2)) if np.ndim(l1) == 0 else (l1, l2)


class FrozenSource:
    """Fixed weights that ignore the state; the outer map becomes constant."""

    name = "frozen"

    def __init__(self, weights: WeightPair, lambdas=None):
        self.w = weights
        self._lambdas = lambdas

    def weights(self, x, cfg):
        return self.w

    def lambdas(self, f, cfg):
        return self._lambdas if self._lambdas is not None else (cfg.lambda1, cfg.lambda2)


@dataclass
class IterationTrace:
    step_norms: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    state_norms: list = field(default_factory=list)
    residual: float = float("nan")  # ||c + t - f|| at the final iterate
    lambdas: tuple = ()

    @property
    def non_decreasing_steps(self) -> list[int]:
        """1-based iterations whose step did not shrink (diagnostic only)."""
        return [k + 2 for k, r in enumerate(self.ratios) if np.isfinite(r) and r >= 1.0]

    def to_csv(self) -> str:
        lines = ["# gvd-trace v1", "iteration,step_norm,energy,ratio,state_norm,cg_iterations,cg_residual,converged"]
        for k, (s, e, rep, n) in enumerate(zip(self.step_norms, self.energies, self.reports, self.state_norms)):
            ratio = self.ratios[k - 1] if k >= 1 else float("nan")
            lines.append(f"{k + 1},{s:.17g},{e:.17g},{ratio:.17g},{n:.17g},{rep.iterations},"
                         f"{rep.final_relative_residual:.17g},{int(rep.converged)}")
        return "\n".join(lines) + "\n"


def as_source(source):
    if source is None or source == "probabilistic":
        return ProbabilisticSource()
    if isinstance(source, PredictorParams):
        return PredictorSource(source)
    return source


def _ratio(num, den):
    if den < MIN_STEP:
        return float("nan")
    return num / den


def iterate(f, source, cfg: ModelConfig, steps: int, x0: StackedState | None = None, *, tol=None):
    """Run ``steps`` outer iterations from ``x0`` (default ``(f, 0)``).

    Returns the final state, the trace and the list of all iterates
    ``x_0 .. x_steps``.
    """
    f = as_image(f, "observation")
    if f.ndim != 2:
        raise ValueError("the outer iteration takes a single image")
    source = as_source(source)
    lam1, lam2 = source.lambdas(f, cfg)
    x = StackedState.from_observation(f) if x0 is None else x0.copy()
    trace = IterationTrace(lambdas=(lam1, lam2))
    states = [x]
    for _ in range(steps):
        w = source.weights(x, cfg)
        x_new, report = solve_normal_equations(f, w, cfg, warm_start=x, lambda1=lam1, lambda2=lam2, tol=tol)
        if not report.converged:
            logger.warning("inner solve stopped at relative residual %.3g", report.final_relative_residual)
        step = float(StackedState(x_new.cartoon - x.cartoon, x_new.flow - x.flow).norm())
        if trace.step_norms:
            trace.ratios.append(_ratio(step, trace.step_norms[-1]))
        trace.step_norms.append(step)
        trace.energies.append(float(energy(x_new, f, w, cfg, lam1, lam2)))
        trace.reports.append(report)
        trace.state_norms.append(float(x_new.norm()))
        x = x_new
        states.append(x)
    trace.residual = float(np.linalg.norm(apply_S(x) - f))
    if trace.non_decreasing_steps:
        logger.info("step norms did not decrease at iterations %s", trace.non_decreasing_steps)
    return x, trace, states


def decompose(f, weight_source, cfg: ModelConfig, x0: StackedState | None = None):
    """Guided decomposition with ``cfg.K`` outer iterations.

    Parameters
    ----------
    f : array (h, w)
    weight_source : "probabilistic", PredictorParams, or a source object
        With a predictor, the lambdas come from its head.
    cfg : ModelConfig
    x0 : StackedState, optional
        Starting state; ``(f, 0)`` by default.

    Returns
    -------
    cartoon, texture : arrays (h, w)
        ``texture = div(xi_K)``.
    trace : IterationTrace
    """
    x, trace, _ = iterate(f, weight_source, cfg, cfg.K, x0)
    return x.cartoon, x.texture(), trace


def decompose_probabilistic(f, cfg: ModelConfig):
    """Probabilistic pipeline: a uniform ``omega_max`` solve, then ``cfg.K`` re-estimations."""
    x0, report = identity_solve(f, cfg)
    c, t, trace = decompose(f, ProbabilisticSource(), cfg, x0=x0)
    trace.reports.insert(0, report)
    return c, t, trace


def estimate_contraction(f, weight_source, cfg: ModelConfig, extra_iters: int = 8, *, tol=None) -> float:
    """Largest observed ratio ``||x_{k+1} - x_k|| / ||x_k - x_{k-1}||``.

    Runs ``cfg.K + extra_iters`` iterations from ``(f, 0)``; ratios whose
    denominator is below ``1e-13`` are skipped.
    """
    steps = cfg.K + extra_iters
    if steps < 3:
        raise GVDError("insufficient steps: need at least 3 outer iterations")
    _, trace, _ = iterate(f, weight_source, cfg, steps, tol=tol)
    valid = [r for r in trace.ratios if np.isfinite(r)]
    if not valid:
        raise GVDError("insufficient steps: fewer than two nonzero consecutive steps")
    return float(max(valid))


__all__ = ["PredictorSource", "FrozenSource", "IterationTrace", "iterate", "decompose",
           "decompose_probabilistic", "estimate_contraction", "SolveReport"]
