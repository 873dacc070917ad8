"""Model configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class ModelConfig:
    """Parameters of the guided quadratic decomposition model.

    Attributes
    ----------
    lambda1, lambda2 : float
        Global weights of the cartoon-gradient and flow-field penalties.
    K : int
        Number of outer (weight refinement) iterations.
    cg_tol : float
        Relative residual tolerance ``||Ax - b|| / ||b||`` of the inner solve.
    cg_max_iters : int
        Iteration cap of the inner conjugate gradient solve.
    omega_min, omega_max : float
        Admissible range of every diagonal weight entry.
    neighborhood_radius : int
        Radius ``N`` of the square window of the probabilistic estimator.
    epsilon : float
        Floor added to the local variance estimate.
    anisotropic : bool
        Predict separate x/y weight maps (learned weights only).
    """

    lambda1: float = 1.0
    lambda2: float = 0.2
    K: int = 8
    cg_tol: float = 1e-8
    cg_max_iters: int = 500
    omega_min: float = 0.01
    omega_max: float = 0.99
    neighborhood_radius: int = 3
    epsilon: float = 1e-4
    anisotropic: bool = False

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError("lambda1 and lambda2 must be positive")
        if not (0 < self.omega_min <= self.omega_max < 1):
            raise ValueError("need 0 < omega_min <= omega_max < 1")
        if not self.cg_tol > 0:
            raise ValueError("cg_tol must be positive")
        if self.cg_max_iters < 1:
            raise ValueError("cg_max_iters must be a positive integer")
        if self.K < 0:
            raise ValueError("K must be non-negative")
        if self.neighborhood_radius < 1:
            raise ValueError("neighborhood_radius must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}


def _parse_value(name: str, text: str):
    kind = type(getattr(ModelConfig(), name))
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    if kind is int:
        return int(text)
    return float(text)


def parse_config(text: str) -> ModelConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, unknown keys are rejected."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, value)
    return ModelConfig(**values)


def load_config(path: str | Path | None) -> ModelConfig:
    if path is None:
        return ModelConfig()
    return parse_config(Path(path).read_text())


def format_config(cfg: ModelConfig) -> str:
    lines = []
    for name in _FIELDS:
        value = getattr(cfg, name)
        lines.append(f"{name} = {str(value).lower() if isinstance(value, bool) else repr(value)}")
    return "\n".join(lines) + "\n"
