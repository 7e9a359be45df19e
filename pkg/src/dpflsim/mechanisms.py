"""Noise calibration, sampling, gradient clipping, and privacy-budget accounting.

A client that participates in `planned_rounds` rounds under a total budget
(epsilon, delta) adds per-round noise calibrated by linear composition:

    Gaussian: sigma = c2 * sensitivity * sqrt(planned_rounds * ln(1/delta)) / epsilon
    Laplace:  b     = planned_rounds * sensitivity / epsilon   (per coordinate)

Per-round sensitivity of the released update eta_t * clipped-mean-gradient is
2 * eta_t * clip_bound / num_samples, plus 2 * eta_t * loss_cap / num_samples
when the round additionally releases two distorted loss scalars.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ParameterError

# Remaining budget at or below this relative floor counts as exhausted; float
# dust from summing T equal slices is ~1e-13 relative, real slices are >= 1/T.
EXHAUSTION_REL_TOL = 1e-9
EXHAUSTION_ABS_TOL = 1e-15


class MechanismKind(enum.Enum):
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"

    @property
    def noise_exponent(self) -> int:
        """Exponent z of the participation count in the per-client noise energy."""
        return 1 if self is MechanismKind.GAUSSIAN else 2

    @property
    def clip_norm(self) -> str:
        """Norm whose ball bounds per-sample gradients for this mechanism."""
        return "l2" if self is MechanismKind.GAUSSIAN else "l1"

    @classmethod
    def parse(cls, name: str) -> "MechanismKind":
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            raise ParameterError(
                f"unknown mechanism {name!r}; expected 'gaussian' or 'laplace'"
            ) from None


def _check_finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ParameterError(f"{name} must be finite, got {value!r}")
    return value


def _check_positive(name: str, value: float) -> float:
    value = _check_finite(name, value)
    if value <= 0:
        raise ParameterError(f"{name} must be positive, got {value!r}")
    return value


def _check_nonnegative(name: str, value: float) -> float:
    value = _check_finite(name, value)
    if value < 0:
        raise ParameterError(f"{name} must be nonnegative, got {value!r}")
    return value


def _check_rounds(name: str, value) -> int:
    if value != int(value):
        raise ParameterError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < 1:
        raise ParameterError(f"{name} must be >= 1, got {value}")
    return value


@dataclass(frozen=True)
class PrivacyBudget:
    """Total and remaining (epsilon, delta) for one client."""

    epsilon: float
    delta: float
    epsilon_remaining: float
    delta_remaining: float

    def __post_init__(self):
        _check_positive("epsilon", self.epsilon)
        _check_nonnegative("delta", self.delta)
        if self.delta >= 1:
            raise ParameterError(f"delta must be < 1, got {self.delta}")
        _check_nonnegative("epsilon_remaining", self.epsilon_remaining)
        _check_nonnegative("delta_remaining", self.delta_remaining)
        if self.epsilon_remaining > self.epsilon * (1 + 1e-12):
            raise ParameterError("epsilon_remaining exceeds the total epsilon")
        if self.delta_remaining > self.delta * (1 + 1e-12) + 1e-300:
            raise ParameterError("delta_remaining exceeds the total delta")

    @classmethod
    def fresh(cls, epsilon: float, delta: float = 0.0) -> "PrivacyBudget":
        return cls(float(epsilon), float(delta), float(epsilon), float(delta))

    @property
    def exhausted(self) -> bool:
        floor = EXHAUSTION_REL_TOL * self.epsilon + EXHAUSTION_ABS_TOL
        return self.epsilon_remaining <= floor


@dataclass(frozen=True)
class NoiseSpec:
    """Resolved per-round noise parameters for one client in one stage."""

    mechanism: MechanismKind
    sensitivity: float
    scale: float
    per_round_epsilon: float
    per_round_delta: float
    planned_rounds: int

    def __post_init__(self):
        if not isinstance(self.mechanism, MechanismKind):
            raise ParameterError("mechanism must be a MechanismKind")
        _check_nonnegative("sensitivity", self.sensitivity)
        _check_nonnegative("scale", self.scale)
        _check_positive("per_round_epsilon", self.per_round_epsilon)
        _check_nonnegative("per_round_delta", self.per_round_delta)
        _check_rounds("planned_rounds", self.planned_rounds)


@dataclass(frozen=True)
class ClipConfig:
    """Per-sample gradient clipping ball: L2 for Gaussian, L1 for Laplace."""

    bound: float
    norm_kind: str

    def __post_init__(self):
        _check_positive("bound", self.bound)
        if self.norm_kind not in ("l1", "l2"):
            raise ParameterError(f"norm_kind must be 'l1' or 'l2', got {self.norm_kind!r}")

    @classmethod
    def for_mechanism(cls, mechanism: MechanismKind, bound: float) -> "ClipConfig":
        return cls(bound=float(bound), norm_kind=mechanism.clip_norm)


def gaussian_sigma(sensitivity: float, total_epsilon: float, total_delta: float,
                   planned_rounds, c2: float = 1.0) -> float:
    """Per-coordinate Gaussian noise std for `planned_rounds` releases.

    sigma = c2 * sensitivity * sqrt(planned_rounds * ln(1/total_delta)) / total_epsilon.
    Calibrated as an equality; the classical c1-based precondition on the
    per-release epsilon is intentionally not checked.
    """
    sensitivity = _check_nonnegative("sensitivity", sensitivity)
    total_epsilon = _check_positive("total_epsilon", total_epsilon)
    total_delta = _check_finite("total_delta", total_delta)
    if not 0 < total_delta < 1:
        raise ParameterError(f"total_delta must lie in (0, 1), got {total_delta}")
    planned_rounds = _check_rounds("planned_rounds", planned_rounds)
    c2 = _check_positive("c2", c2)
    return c2 * sensitivity * math.sqrt(planned_rounds * math.log(1.0 / total_delta)) / total_epsilon


def laplace_scale(sensitivity: float, total_epsilon: float, planned_rounds) -> float:
    """Per-coordinate Laplace scale b = planned_rounds * sensitivity / total_epsilon."""
    sensitivity = _check_nonnegative("sensitivity", sensitivity)
    total_epsilon = _check_positive("total_epsilon", total_epsilon)
    planned_rounds = _check_rounds("planned_rounds", planned_rounds)
    return planned_rounds * sensitivity / total_epsilon


def gradient_sensitivity(mechanism: MechanismKind, learning_rate: float, clip_bound: float,
                         num_samples, loss_cap: float = 0.0,
                         include_loss_terms: bool = False) -> float:
    """Sensitivity of one client's released round output.

    The gradient-only release has sensitivity 2 * eta * clip_bound / num_samples
    (swapping one sample moves the clipped mean by at most 2 * clip_bound / D in
    the mechanism's norm). When the round also releases the two distorted loss
    scalars, the joint release adds 2 * eta * loss_cap / num_samples.
    """
    if not isinstance(mechanism, MechanismKind):
        raise ParameterError("mechanism must be a MechanismKind")
    learning_rate = _check_nonnegative("learning_rate", learning_rate)
    clip_bound = _check_positive("clip_bound", clip_bound)
    num_samples = _check_rounds("num_samples", num_samples)
    loss_cap = _check_nonnegative("loss_cap", loss_cap)
    sens = 2.0 * learning_rate * clip_bound / num_samples
    if include_loss_terms:
        sens += 2.0 * learning_rate * loss_cap / num_samples
    return sens


def sample_noise(spec: NoiseSpec, dimension, rng: np.random.Generator) -> np.ndarray:
    """Draw one i.i.d. noise vector for a round's release.

    A zero scale yields an exactly zero vector without touching the generator.
    """
    dimension = _check_rounds("dimension", dimension)
    if spec.scale == 0.0:
        return np.zeros(dimension)
    if spec.mechanism is MechanismKind.GAUSSIAN:
        return rng.normal(0.0, spec.scale, size=dimension)
    return rng.laplace(0.0, spec.scale, size=dimension)


def expected_noise_sq_norm(mechanism: MechanismKind, learning_rate: float, clip_bound: float,
                           dimension, planned_rounds, budget: PrivacyBudget,
                           num_samples, c2: float = 1.0) -> float:
    """E||Z||^2 for one round's gradient-only release under the total budget.

    Gaussian: 4 * eta^2 * B^2 * d * c2^2 * T * ln(1/delta) / (D^2 * epsilon^2)
    Laplace:  8 * d * B^2 * eta^2 * T^2 / (D^2 * epsilon^2)

    Equals dimension * sigma^2 (Gaussian) or dimension * 2 b^2 (Laplace) with
    the scale calibrated from the gradient-only sensitivity.
    """
    if not isinstance(mechanism, MechanismKind):
        raise ParameterError("mechanism must be a MechanismKind")
    learning_rate = _check_nonnegative("learning_rate", learning_rate)
    clip_bound = _check_positive("clip_bound", clip_bound)
    dimension = _check_rounds("dimension", dimension)
    planned_rounds = _check_rounds("planned_rounds", planned_rounds)
    num_samples = _check_rounds("num_samples", num_samples)
    c2 = _check_positive("c2", c2)
    eps = budget.epsilon
    if mechanism is MechanismKind.GAUSSIAN:
        if not 0 < budget.delta < 1:
            raise ParameterError("Gaussian budget needs delta in (0, 1)")
        return (4.0 * learning_rate**2 * clip_bound**2 * dimension * c2**2
                * planned_rounds * math.log(1.0 / budget.delta)
                / (num_samples**2 * eps**2))
    if budget.delta != 0.0:
        raise ParameterError("Laplace budget needs delta = 0")
    return (8.0 * dimension * clip_bound**2 * learning_rate**2 * planned_rounds**2
            / (num_samples**2 * eps**2))


def _row_norms(matrix: np.ndarray, norm_kind: str) -> np.ndarray:
    if norm_kind == "l2":
        return np.sqrt(np.sum(matrix * matrix, axis=1))
    return np.sum(np.abs(matrix), axis=1)


def clip_per_sample_gradient(gradient: np.ndarray, config: ClipConfig) -> np.ndarray:
    """Project one per-sample gradient onto the clipping ball.

    Vectors already inside the ball are returned unchanged (bit-identical);
    others are rescaled to norm config.bound.
    """
    gradient = np.asarray(gradient, dtype=float)
    if gradient.ndim != 1:
        raise ParameterError(f"gradient must be 1-d, got shape {gradient.shape}")
    norm = _row_norms(gradient[None, :], config.norm_kind)[0]
    if not math.isfinite(norm):
        raise ParameterError("gradient has non-finite entries")
    if norm <= config.bound:
        return gradient
    out = gradient * (config.bound / norm)
    # One or two refinement passes absorb rounding so the output never exceeds
    # the bound and a second clip call is a bitwise no-op.
    for _ in range(4):
        n = _row_norms(out[None, :], config.norm_kind)[0]
        if n <= config.bound:
            break
        out = out * (config.bound / n)
    return out


def clip_gradient_matrix(gradients: np.ndarray, config: ClipConfig) -> np.ndarray:
    """Row-wise clipping of a (num_samples, dim) per-sample gradient matrix."""
    gradients = np.asarray(gradients, dtype=float)
    if gradients.ndim != 2:
        raise ParameterError(f"gradients must be 2-d, got shape {gradients.shape}")
    if not np.all(np.isfinite(gradients)):
        raise ParameterError("gradients have non-finite entries")
    norms = _row_norms(gradients, config.norm_kind)
    factors = np.ones_like(norms)
    over = norms > config.bound
    factors[over] = config.bound / norms[over]
    out = gradients * factors[:, None]
    norms2 = _row_norms(out, config.norm_kind)
    over2 = norms2 > config.bound
    if np.any(over2):
        out[over2] *= (config.bound / norms2[over2])[:, None]
    return out


def consume_budget(budget: PrivacyBudget, per_round_epsilon: float,
                   per_round_delta: float = 0.0) -> tuple[PrivacyBudget, bool]:
    """Deduct one round's slice; returns (new budget, exhausted flag).

    Remaining values clamp at zero. The exhausted flag trips when the remaining
    epsilon falls to (or below) a 1e-9-relative floor, absorbing float dust
    from repeated equal slices.
    """
    per_round_epsilon = _check_nonnegative("per_round_epsilon", per_round_epsilon)
    per_round_delta = _check_nonnegative("per_round_delta", per_round_delta)
    new_eps = budget.epsilon_remaining - per_round_epsilon
    new_delta = budget.delta_remaining - per_round_delta
    floor = EXHAUSTION_REL_TOL * budget.epsilon + EXHAUSTION_ABS_TOL
    exhausted = new_eps <= floor
    out = replace(
        budget,
        epsilon_remaining=max(0.0, new_eps),
        delta_remaining=max(0.0, new_delta),
    )
    return out, exhausted
