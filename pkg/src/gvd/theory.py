"""Numerical checks of the coercivity, perturbation, Lipschitz, stability and
invariant-ball bounds of the guided fixed-point map.

Every check returns a :class:`CheckResult`; inequality checks allow an
absolute slack of ``1e-8`` for inner-solve truncation.  Solves use the dense
Cholesky oracle up to 256 pixels and tight conjugate gradient above.
"""

from __future__ import annotations

import io as _io
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .grid_ops import (DENSE_LIMIT, StackedState, WeightPair, alpha_constant, as_image, assemble_A,
                       operator_norm)
from .linsolve import solve_dense_oracle, solve_normal_equations
from .predictor import PredictorParams, kappa_bound, predict_lambdas
from .fixed_point import as_source, iterate

logger = logging.getLogger(__name__)

SLACK = 1e-8
TIGHT_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    bound: float
    informational: bool = False
    details: dict = field(default_factory=dict)

    @property
    def margin(self) -> float:
        return self.bound - self.measured


@dataclass
class TheoryReport:
    alpha: float
    norm_S: float
    norm_G: float
    norm_R: float
    kappa: float
    Q: float
    r_ball: float
    lambdas: tuple = ()
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if not c.informational)

    def to_text(self) -> str:
        lines = [f"alpha   {self.alpha:.10g}", f"||S||   {self.norm_S:.10g}", f"||G||   {self.norm_G:.10g}",
                 f"||R||   {self.norm_R:.10g}", f"kappa   {self.kappa:.10g}", f"Q       {self.Q:.10g}",
                 f"r_ball  {self.r_ball:.10g}"]
        if self.lambdas:
            lines.append(f"lambdas {self.lambdas[0]:.10g} {self.lambdas[1]:.10g}")
        for c in self.checks:
            tag = "PASS" if c.passed else ("INFO" if c.informational else "FAIL")
            lines.append(f"[{tag}] {c.name}: measured {c.measured:.6g}, bound {c.bound:.6g}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = _io.StringIO()
        buf.write("# gvd-theory v1\n")
        buf.write("name,measured,bound,margin,pass\n")
        for c in self.checks:
            buf.write(f"{c.name},{c.measured:.17g},{c.bound:.17g},{c.margin:.17g},{int(c.passed)}\n")
        return buf.getvalue()


def _tight(cfg: ModelConfig) -> ModelConfig:
    return cfg.replace(cg_tol=TIGHT_TOL, cg_max_iters=max(cfg.cg_max_iters, 5000))


def _solve(f, w, cfg, lam1, lam2):
    if f.size <= DENSE_LIMIT:
        return solve_dense_oracle(f, w, cfg, lambda1=lam1, lambda2=lam2)
    x, _ = solve_normal_equations(f, w, _tight(cfg), lambda1=lam1, lambda2=lam2)
    return x


def _diff_norm(a: StackedState, b: StackedState) -> float:
    return float(StackedState(a.cartoon - b.cartoon, a.flow - b.flow).norm())


def random_weights(shape, cfg: ModelConfig, rng, isotropic=False) -> WeightPair:
    """Entries drawn uniformly from ``[omega_min, omega_max]``."""
    h, w = shape
    lo, hi = cfg.omega_min, cfg.omega_max
    if isotropic:
        return WeightPair.isotropic_maps(rng.uniform(lo, hi, (h, w)), rng.uniform(lo, hi, (h, w)), cfg)
    return WeightPair(rng.uniform(lo, hi, (2, h, w)), rng.uniform(lo, hi, (2, h, w)), lo, hi)


def constants(shape, cfg: ModelConfig, lambdas=None):
    lam1, lam2 = (cfg.lambda1, cfg.lambda2) if lambdas is None else (float(lambdas[0]), float(lambdas[1]))
    alpha = alpha_constant(cfg, shape, lambda1=lam1, lambda2=lam2)
    return {"alpha": alpha, "norm_S": operator_norm("S", shape), "norm_G": operator_norm("G", shape),
            "norm_R": operator_norm("R", shape), "lambdas": (lam1, lam2)}


def compute_Q(f, params: PredictorParams, cfg: ModelConfig, *, lambdas=None) -> TheoryReport:
    """Constants of the contraction bound for observation ``f`` and predictor ``params``.

    ``Q = (lambda1 ||G||^2 + lambda2 ||R||^2) kappa ||S|| ||f|| / alpha^2`` and
    ``r = ||S|| ||f|| / alpha``.  Lambdas come from the predictor head unless
    given.
    """
    f = as_image(f, "observation")
    if lambdas is None:
        l1, l2 = predict_lambdas(f, params)
        lambdas = (float(l1), float(l2))
    k = constants(f.shape, cfg, lambdas)
    lam1, lam2 = k["lambdas"]
    kappa = kappa_bound(params, cfg, f.shape)
    fn = float(np.linalg.norm(f))
    Q = (lam1 * k["norm_G"] ** 2 + lam2 * k["norm_R"] ** 2) * kappa * k["norm_S"] * fn / k["alpha"] ** 2
    r = k["norm_S"] * fn / k["alpha"]
    report = TheoryReport(k["alpha"], k["norm_S"], k["norm_G"], k["norm_R"], kappa, Q, r, (lam1, lam2))
    report.checks.append(CheckResult("Q<1", Q < 1.0, Q, 1.0, informational=True))
    return report


def check_lemma1(cfg: ModelConfig, trials=100, *, shape=(8, 8), seed=0, lambdas=None) -> CheckResult:
    """Dense check of ``lambda_min(A) >= alpha`` and ``||A^-1|| <= 1/alpha``.

    The first draw is the extreme pair ``W1 = W2 = omega_min I``.
    """
    h, w = shape
    if h * w > DENSE_LIMIT:
        raise ValueError("lemma check uses dense matrices; grid too large")
    lam1, lam2 = (cfg.lambda1, cfg.lambda2) if lambdas is None else lambdas
    alpha = alpha_constant(cfg, shape, lambda1=lam1, lambda2=lam2, method="dense")
    rng = np.random.default_rng(seed)
    worst_min, worst_inv, ok = np.inf, 0.0, True
    for t in range(trials):
        wp = WeightPair.uniform(shape, cfg.omega_min, cfg) if t == 0 else random_weights(shape, cfg, rng)
        lmin = float(np.linalg.eigvalsh(assemble_A(wp, cfg, lam1, lam2))[0])
        inv_norm = 1.0 / lmin
        ok &= (lmin >= alpha - 1e-10) and (inv_norm <= 1.0 / alpha + 1e-10)
        worst_min = min(worst_min, lmin)
        worst_inv = max(worst_inv, inv_norm)
    return CheckResult("lemma1", bool(ok), worst_min, alpha,
                       details={"max_inverse_norm": worst_inv, "inverse_bound": 1.0 / alpha, "trials": trials})


def check_perturbation_lemma(cfg: ModelConfig, trials=100, *, shape=(8, 8), seed=0) -> CheckResult:
    """Solution change under a weight change versus the first-order bound."""
    rng = np.random.default_rng(seed)
    k = constants(shape, cfg)
    lam1, lam2 = k["lambdas"]
    ok, worst, slack_ratios = True, -np.inf, []
    for t in range(trials):
        f = rng.uniform(0.0, 1.0, shape)
        wa = random_weights(shape, cfg, rng)
        if t == 0:
            wb = wa
        else:
            # mix of small and large perturbations
            scale = 10.0 ** rng.uniform(-4, 0)
            d1 = rng.uniform(-1, 1, wa.w1.shape) * scale
            d2 = rng.uniform(-1, 1, wa.w2.shape) * scale
            wb = WeightPair(np.clip(wa.w1 + d1, cfg.omega_min, cfg.omega_max),
                            np.clip(wa.w2 + d2, cfg.omega_min, cfg.omega_max), cfg.omega_min, cfg.omega_max)
        xa = _solve(f, wa, cfg, lam1, lam2)
        xb = _solve(f, wb, cfg, lam1, lam2)
        dw1, dw2 = wa.max_abs_diff(wb)
        lhs = _diff_norm(xa, xb)
        rhs = (lam1 * k["norm_G"] ** 2 * dw1 + lam2 * k["norm_R"] ** 2 * dw2) / k["alpha"] * float(xb.norm())
        ok &= lhs <= rhs + SLACK
        worst = max(worst, lhs - rhs)
        if rhs > 0:
            slack_ratios.append(lhs / rhs)
    med = float(np.median(slack_ratios)) if slack_ratios else float("nan")
    logger.info("perturbation bound: median lhs/rhs %.3g", med)
    return CheckResult("perturbation_lemma", bool(ok), worst, SLACK,
                       details={"median_ratio": med, "trials": trials})


def _T(x, f, source, cfg, lam1, lam2):
    return _solve(f, source.weights(x, cfg), cfg, lam1, lam2)


def check_lipschitz_T(f, params: PredictorParams, cfg: ModelConfig, pairs=200, *, seed=0,
                      report: TheoryReport | None = None) -> CheckResult:
    """Sampled ``||T(x) - T(y)|| <= Q ||x - y||`` inside the invariant ball."""
    f = as_image(f, "observation")
    report = compute_Q(f, params, cfg) if report is None else report
    lam1, lam2 = report.lambdas
    source = as_source(params)
    rng = np.random.default_rng(seed)
    n = 3 * f.size

    def in_ball():
        v = rng.standard_normal(n)
        return StackedState.from_vector(v / np.linalg.norm(v) * report.r_ball * rng.uniform() ** (1.0 / n),
                                        f.shape)

    ok, ratios = True, []
    for p in range(pairs):
        x = in_ball()
        if p == 0:
            y = x
        elif p % 2:
            y = in_ball()
        else:
            # nearby pair probes the local slope
            d = rng.standard_normal(n)
            y = StackedState.from_vector(x.vector() + d / np.linalg.norm(d) * 10.0 ** rng.uniform(-3, 0), f.shape)
        lhs = _diff_norm(_T(x, f, source, cfg, lam1, lam2), _T(y, f, source, cfg, lam1, lam2))
        dist = _diff_norm(x, y)
        ok &= lhs <= report.Q * dist + SLACK
        if dist > 0:
            ratios.append(lhs / dist)
    emp = float(max(ratios)) if ratios else 0.0
    return CheckResult("lipschitz_T", bool(ok), emp, report.Q, details={"pairs": pairs})


def check_stability(f, source, cfg: ModelConfig, trials=20, *, magnitudes=(1e-3, 1e-1), seed=0):
    """Fixed-point sensitivity to the observation under frozen weights.

    Weights are taken from ``source`` at the end of a ``cfg.K`` run on
    ``f`` and then held fixed.  Returns the asserted check and an
    informational one that reruns the adaptive pipeline on ``f + delta``.
    """
    f = as_image(f, "observation")
    source = as_source(source)
    lam1, lam2 = source.lambdas(f, cfg)
    k = constants(f.shape, cfg, (lam1, lam2))
    factor = k["norm_S"] / k["alpha"]
    x_end, _, _ = iterate(f, source, cfg, cfg.K)
    w = source.weights(x_end, cfg)
    x_f = _solve(f, w, cfg, lam1, lam2)
    rng = np.random.default_rng(seed)
    ok, adaptive_ok, worst, tight = True, True, -np.inf, []
    for t in range(trials):
        mag = magnitudes[t % len(magnitudes)]
        d = rng.standard_normal(f.shape)
        d *= mag / np.linalg.norm(d)
        lhs = _diff_norm(x_f, _solve(f + d, w, cfg, lam1, lam2))
        bound = factor * mag
        ok &= lhs <= bound + SLACK
        worst = max(worst, lhs - bound)
        tight.append(lhs / bound if bound > 0 else 0.0)
        if t < 2:
            # adaptive pipeline, informational only
            xa, _, _ = iterate(f + d, source, cfg, cfg.K)
            adaptive_ok &= _diff_norm(x_end, xa) <= bound + SLACK
    logger.info("stability: max tightness %.3g", max(tight))
    frozen = CheckResult("stability_frozen", bool(ok), worst, SLACK,
                         details={"max_tightness": float(max(tight)), "factor": factor})
    adaptive = CheckResult("stability_adaptive", bool(adaptive_ok), float(adaptive_ok), 1.0, informational=True)
    return frozen, adaptive


def check_invariant_ball(f, source, cfg: ModelConfig, *, steps=None) -> CheckResult:
    """Every iterate of a ``2K``-step run lies in the ball of radius ``||S|| ||f|| / alpha``."""
    f = as_image(f, "observation")
    source = as_source(source)
    lam1, lam2 = source.lambdas(f, cfg)
    k = constants(f.shape, cfg, (lam1, lam2))
    r = k["norm_S"] * float(np.linalg.norm(f)) / k["alpha"]
    steps = 2 * cfg.K if steps is None else steps
    _, trace, states = iterate(f, source, _tight(cfg), steps)
    largest = max(float(s.norm()) for s in states)
    return CheckResult("invariant_ball", largest <= r + 1e-6, largest, r, details={"steps": steps})


def run_suite(f, cfg: ModelConfig, params: PredictorParams | None = None, *, seed=0,
              lemma_trials=100, perturbation_trials=100, pairs=200, stability_trials=20) -> TheoryReport:
    """All checks for one observation; predictor checks need ``params``."""
    f = as_image(f, "observation")
    if params is not None:
        report = compute_Q(f, params, cfg)
        source = as_source(params)
    else:
        k = constants(f.shape, cfg)
        fn = float(np.linalg.norm(f))
        report = TheoryReport(k["alpha"], k["norm_S"], k["norm_G"], k["norm_R"], float("nan"), float("nan"),
                              k["norm_S"] * fn / k["alpha"], k["lambdas"])
        source = as_source("probabilistic")
    small = (min(f.shape[0], 8), min(f.shape[1], 8))
    report.checks.append(check_lemma1(cfg, lemma_trials, shape=small, seed=seed))
    report.checks.append(check_perturbation_lemma(cfg, perturbation_trials, shape=small, seed=seed))
    if params is not None:
        report.checks.append(check_lipschitz_T(f, params, cfg, pairs, seed=seed, report=report))
    report.checks.extend(check_stability(f, source, cfg, stability_trials, seed=seed))
    report.checks.append(check_invariant_ball(f, source, cfg))
    return report


__all__ = ["CheckResult", "TheoryReport", "compute_Q", "check_lemma1", "check_perturbation_lemma",
           "check_lipschitz_T", "check_stability", "check_invariant_ball", "run_suite", "random_weights"]
