"""Closed-form steady-state error bounds and stability checks.

Two compression schemes admit steady-state mean-squared-error upper
bounds when the step map is a contraction (Lipschitz constant L < 1)
and the codec removes a delta fraction of input energy:

    naive (compress the full activation):
        v_naive = (1 - delta) * sigma_a^2 / (1 - L^2)

    residual with feedback (compress the change against the shared base):
        v_residual = (1 - delta) * sigma_delta^2
                     / (1 - L^2 - (1 - delta) * (L^2 + 1))

The residual bound only exists above a codec-quality floor,
delta > 1 - (1 - L^2) / (L^2 + 1). Compressing the raw step difference
without any feedback does not converge at all; its error grows linearly,
t * (1 - delta) * sigma_delta^2.
"""

from __future__ import annotations

from dataclasses import dataclass


class InstabilityError(ValueError):
    """The requested bound does not exist for these parameters."""


@dataclass(frozen=True)
class BoundParams:
    delta: float
    lipschitz: float
    sigma_a_sq: float
    sigma_delta_sq: float

    def __post_init__(self):
        if not (0.0 < self.delta <= 1.0):
            raise ValueError(f"delta must be in (0, 1], got {self.delta}")
        if not (0.0 < self.lipschitz < 1.0):
            raise ValueError(f"lipschitz must be in (0, 1), got {self.lipschitz}")
        if self.sigma_a_sq <= 0.0 or self.sigma_delta_sq <= 0.0:
            raise ValueError("energy parameters must be positive")

    @property
    def exact_compressor(self):
        return self.delta == 1.0

    def residual_margin(self):
        """Positive iff the residual-scheme bound exists."""
        l2 = self.lipschitz * self.lipschitz
        return (1.0 - l2) - (1.0 - self.delta) * (l2 + 1.0)


def stability_threshold(lipschitz):
    """Minimum delta for the residual bound to exist at this L."""
    if not (0.0 <= lipschitz < 1.0):
        raise InstabilityError(f"threshold undefined for L = {lipschitz}")
    l2 = lipschitz * lipschitz
    return 1.0 - (1.0 - l2) / (l2 + 1.0)


def v_naive(p):
    l2 = p.lipschitz * p.lipschitz
    if l2 >= 1.0:
        raise InstabilityError("naive bound requires L < 1")
    return (1.0 - p.delta) * p.sigma_a_sq / (1.0 - l2)


def v_residual(p):
    margin = p.residual_margin()
    if margin <= 0.0:
        raise InstabilityError(
            f"residual bound requires 1 - L^2 > (1 - delta)(L^2 + 1): "
            f"delta = {p.delta:.6g} is below threshold "
            f"{stability_threshold(p.lipschitz):.6g} at L = {p.lipschitz:.6g}"
        )
    return (1.0 - p.delta) * p.sigma_delta_sq / margin


def bound_ratio(p):
    """v_residual / v_naive in closed form; 0 by convention when delta = 1."""
    if p.exact_compressor:
        return 0.0
    margin = p.residual_margin()
    if margin <= 0.0:
        raise InstabilityError("ratio undefined below the stability threshold")
    l2 = p.lipschitz * p.lipschitz
    return (p.sigma_delta_sq / p.sigma_a_sq) * (1.0 - l2) / margin


def no_feedback_growth(delta, sigma_delta_sq, t):
    """Linear error predictor for feedback-less step-difference compression."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return t * (1.0 - delta) * sigma_delta_sq
