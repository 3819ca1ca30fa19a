"""Distribution of exp(A/scale) for exponentially distributed A.

If A ~ Exponential(rate) and Y = exp(A/scale), then Y is Pareto on
y >= 1 with CDF 1 - y^(-rate*scale): the exponential map turns the
exponential tail into a power law.  The mean is rate*scale/(rate*scale-1)
when rate*scale > 1 and diverges otherwise; a Monte Carlo check verifies
both the CDF (Kolmogorov-Smirnov) and the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class ExpTransformModel:
    """Exponential input rate plus the divisor of the exp transform."""

    rate: float  # rate of the exponential source distribution
    scale: float  # divisor in y = exp(a / scale)

    def __post_init__(self):
        if not (self.rate > 0 and self.scale > 0):
            raise ParameterError(f"rate and scale must be positive, got {self.rate}, {self.scale}")

    @property
    def exponent(self) -> float:
        """Power-law exponent of the transformed variable."""
        return self.rate * self.scale


def transformed_cdf(m: ExpTransformModel, y):
    """CDF of Y = exp(A/scale): 0 below 1, else 1 - y^(-rate*scale)."""
    y = np.asarray(y, dtype=np.float64)
    out = np.where(y < 1.0, 0.0, 1.0 - np.maximum(y, 1.0) ** (-m.exponent))
    return float(out) if out.ndim == 0 else out


def transformed_pdf(m: ExpTransformModel, y):
    """Density of Y: rate*scale * y^(-1-rate*scale) on y >= 1."""
    y = np.asarray(y, dtype=np.float64)
    out = np.where(y < 1.0, 0.0, m.exponent * np.maximum(y, 1.0) ** (-1.0 - m.exponent))
    return float(out) if out.ndim == 0 else out


def transformed_mean(m: ExpTransformModel) -> float:
    """E[Y] = exponent/(exponent-1) for exponent > 1, else +inf (divergent)."""
    if m.exponent <= 1.0:
        return float("inf")
    return m.exponent / (m.exponent - 1.0)


def sample_transformed(m: ExpTransformModel, n: int, rng) -> np.ndarray:
    """Draw Y = exp(A/scale) with A sampled by inverse transform.

    A = -log(1-u)/rate for u uniform in [0, 1); inverse-transform keeps the
    stream identical across platforms for a fixed generator.
    """
    u = rng.random(n)
    a = -np.log1p(-u) / m.rate
    return np.exp(a / m.scale)


def ks_distance(samples, cdf) -> float:
    """Kolmogorov-Smirnov distance between an empirical sample and a CDF."""
    y = np.sort(np.asarray(samples, dtype=np.float64))
    n = y.shape[0]
    f = cdf(y)
    steps = np.arange(1, n + 1) / n
    return float(max(np.max(steps - f), np.max(f - (steps - 1.0 / n))))


@dataclass
class ValidationReport:
    """Monte Carlo agreement between samples and the closed-form law."""

    rate: float
    scale: float
    n: int
    mean_closed_form: float | None  # None when the mean diverges
    mean_empirical: float
    mean_error: float | None
    ks_distance: float

    def to_json_dict(self) -> dict:
        return {
            "lambda_exp": self.rate,
            "p_scale": self.scale,
            "n": self.n,
            "mean_closed_form": self.mean_closed_form,
            "mean_empirical": self.mean_empirical,
            "mean_error": self.mean_error,
            "ks_distance": self.ks_distance,
        }


def monte_carlo_validate(m: ExpTransformModel, n_samples: int, rng) -> ValidationReport:
    """Sample Y and report mean error (when finite) plus the KS distance."""
    if n_samples < 10_000:
        raise ParameterError(f"need at least 1e4 samples for a stable check, got {n_samples}")
    y = sample_transformed(m, n_samples, rng)
    empirical = float(y.mean())
    closed = transformed_mean(m)
    if np.isinf(closed):
        mean_closed, mean_error = None, None
    else:
        mean_closed, mean_error = closed, abs(empirical - closed)
    return ValidationReport(
        rate=m.rate,
        scale=m.scale,
        n=n_samples,
        mean_closed_form=mean_closed,
        mean_empirical=empirical,
        mean_error=mean_error,
        ks_distance=ks_distance(y, lambda v: transformed_cdf(m, v)),
    )


def estimate_rate(values) -> float:
    """Method-of-moments exponential rate estimate, 1/mean."""
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    if not mean > 0:
        raise ParameterError("rate estimate needs values with a positive mean")
    return 1.0 / mean
