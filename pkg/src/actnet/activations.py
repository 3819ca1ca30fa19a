"""Parametric element-wise activation families and their analytic partials.

Three families, all vanishing at zero and differentiable in the input and
in every parameter on x >= 0:

    sinh     a * sinh(b*x)
    exp      a * (exp(b*x) - 1)
    weibull  (x/a)^(b-1) * exp(-(x/g)^z),  b > 1

sinh and exp are strictly increasing amplifiers.  The weibull family grows
polynomially up to a peak ``x0 = g * ((b-1)/z)^(1/z)`` and decays
exponentially past it, so it both squashes near-zero noise and caps very
strong responses instead of letting them dominate the later pooling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError
from .tensor import FeatureMap

FAMILIES = ("sinh", "exp", "weibull")

# sinh/exp arguments are clamped here before exponentiation; float64 exp
# overflows near 709 and gradients are useless long before that.
EXP_ARG_MAX = 60.0

# floor for x inside logarithms and negative powers of the weibull partials
LOG_FLOOR = 1e-12

# constraint set enforced after every optimizer step
MIN_PARAM = 1e-6
MIN_WEIBULL_BETA = 1.0 + 1e-6


class ClampCounter:
    """Counts overflow-guard clamps applied during activation evaluation."""

    def __init__(self):
        self.count = 0

    def add(self, n):
        self.count += int(n)


@dataclass(frozen=True)
class ActivationParams:
    """Learnable parameter vector of one activation family instance.

    ``gamma`` and ``zeta`` exist only for the weibull family.
    """

    family: str
    alpha: float
    beta: float
    gamma: float | None = None
    zeta: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown activation family {self.family!r}")
        wants_tail = self.family == "weibull"
        has_tail = self.gamma is not None or self.zeta is not None
        if wants_tail and (self.gamma is None or self.zeta is None):
            raise ParameterError("weibull needs gamma and zeta")
        if not wants_tail and has_tail:
            raise ParameterError(f"{self.family} takes only alpha and beta")
        for name, value in zip(self.names(), self.vector()):
            if not np.isfinite(value) or value <= 0:
                raise ParameterError(f"{self.family} parameter {name} must be a positive finite real, got {value}")
        if wants_tail and self.beta <= 1:
            raise ParameterError(f"weibull beta must exceed 1, got {self.beta}")

    def names(self) -> tuple[str, ...]:
        if self.family == "weibull":
            return ("alpha", "beta", "gamma", "zeta")
        return ("alpha", "beta")

    def vector(self) -> np.ndarray:
        if self.family == "weibull":
            return np.array([self.alpha, self.beta, self.gamma, self.zeta])
        return np.array([self.alpha, self.beta])

    def with_vector(self, vec) -> "ActivationParams":
        vec = [float(v) for v in vec]
        if self.family == "weibull":
            return ActivationParams("weibull", vec[0], vec[1], vec[2], vec[3])
        return ActivationParams(self.family, vec[0], vec[1])

    def constrain_vector(self, vec) -> np.ndarray:
        """Project a raw parameter vector onto the family's constraint set."""
        vec = np.maximum(np.asarray(vec, dtype=np.float64), MIN_PARAM)
        if self.family == "weibull":
            vec[1] = max(vec[1], MIN_WEIBULL_BETA)
        return vec


def default_params(family: str) -> ActivationParams:
    """Initial parameters: identity-scale amplifiers, weibull peak at 3."""
    if family == "weibull":
        return ActivationParams("weibull", alpha=1.0, beta=2.0, gamma=3.0, zeta=1.0)
    return ActivationParams(family, alpha=1.0, beta=1.0)


@dataclass(frozen=True)
class ActivationGradients:
    """Partials of the activation at a point; gamma/zeta only for weibull."""

    d_input: np.ndarray | float
    d_alpha: np.ndarray | float
    d_beta: np.ndarray | float
    d_gamma: np.ndarray | float | None = None
    d_zeta: np.ndarray | float | None = None

    def by_name(self) -> dict:
        out = {"input": self.d_input, "alpha": self.d_alpha, "beta": self.d_beta}
        if self.d_gamma is not None:
            out["gamma"] = self.d_gamma
            out["zeta"] = self.d_zeta
        return out

    def param_stack(self):
        if self.d_gamma is not None:
            return (self.d_alpha, self.d_beta, self.d_gamma, self.d_zeta)
        return (self.d_alpha, self.d_beta)


def _check_input(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise DataError("activation input contains a non-finite value")
    return x


def _clamped_arg(x, beta, counter):
    arg = beta * x
    if counter is not None:
        counter.add(np.count_nonzero(arg > EXP_ARG_MAX))
    return np.minimum(arg, EXP_ARG_MAX)


def activate(x, p: ActivationParams, clamp_counter: ClampCounter | None = None):
    """Evaluate one activation family element-wise on x >= 0.

    Returns a scalar for scalar input, an array for array input.
    """
    x = _check_input(x)
    scalar = x.ndim == 0
    if p.family == "sinh":
        out = p.alpha * np.sinh(_clamped_arg(x, p.beta, clamp_counter))
    elif p.family == "exp":
        out = p.alpha * np.expm1(_clamped_arg(x, p.beta, clamp_counter))
    else:
        # 0^(beta-1) = 0 for beta > 1, so no special case at x = 0
        out = (x / p.alpha) ** (p.beta - 1.0) * np.exp(-((x / p.gamma) ** p.zeta))
    return float(out) if scalar else out


def activate_gradients(
    x, p: ActivationParams, clamp_counter: ClampCounter | None = None
) -> ActivationGradients:
    """Analytic partials of the activation w.r.t. input and all parameters."""
    x = _check_input(x)
    scalar = x.ndim == 0
    if p.family == "sinh":
        arg = _clamped_arg(x, p.beta, clamp_counter)
        ch, sh = np.cosh(arg), np.sinh(arg)
        grads = ActivationGradients(
            d_input=p.alpha * p.beta * ch,
            d_alpha=sh,
            d_beta=p.alpha * x * ch,
        )
    elif p.family == "exp":
        arg = _clamped_arg(x, p.beta, clamp_counter)
        e = np.exp(arg)
        grads = ActivationGradients(
            d_input=p.alpha * p.beta * e,
            d_alpha=np.expm1(arg),
            d_beta=p.alpha * x * e,
        )
    else:
        # x is floored so that log(x/..) and x^(beta-2) stay finite at 0;
        # the products below all vanish there anyway for beta > 1.
        xs = np.maximum(x, LOG_FLOOR)
        theta = (xs / p.alpha) ** (p.beta - 1.0) * np.exp(-((xs / p.gamma) ** p.zeta))
        tail = (xs / p.gamma) ** p.zeta
        grads = ActivationGradients(
            d_input=theta * ((p.beta - 1.0) / xs - p.zeta * xs ** (p.zeta - 1.0) / p.gamma**p.zeta),
            d_alpha=theta * (1.0 - p.beta) / p.alpha,
            d_beta=theta * np.log(xs / p.alpha),
            d_gamma=theta * p.zeta * tail / p.gamma,
            d_zeta=theta * (-tail) * np.log(xs / p.gamma),
        )
    if scalar:
        grads = ActivationGradients(
            *(None if g is None else float(g) for g in (
                grads.d_input, grads.d_alpha, grads.d_beta, grads.d_gamma, grads.d_zeta))
        )
    return grads


def weibull_peak(p: ActivationParams) -> float:
    """Input value where the weibull activation turns from rising to falling."""
    if p.family != "weibull":
        raise ParameterError(f"peak is defined only for weibull, not {p.family}")
    return p.gamma * ((p.beta - 1.0) / p.zeta) ** (1.0 / p.zeta)


def apply_activation(
    t: FeatureMap, p: ActivationParams, clamp_counter: ClampCounter | None = None
) -> FeatureMap:
    """Element-wise activation over a whole feature map, shape preserved."""
    return FeatureMap(activate(t.values, p, clamp_counter))
