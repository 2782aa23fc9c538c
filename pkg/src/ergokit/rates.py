"""Explicit convergence-rate constants.

The time-average error bound has the shape  k_t / t + k_sqrt / sqrt(t)
(times the centered L2 norm of the observable).  Constants come either
from the abstract route (micro/macro gaps plus relative-boundedness
constants) or from the per-model specializations; the specialized values
absorb the sqrt(2) prefactor of the abstract route, and the two routes are
cross-checked against each other on every call.

Bound curves are always emitted with fully resolved coefficients
C1 / t + C2 / sqrt(t), so downstream code never sees the prefactor
convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .core import ValidationError

__all__ = [
    "AbstractConstants",
    "RateConstants",
    "RateReport",
    "generic_rates",
    "langevin_rates",
    "fiber_rates",
    "bound_coefficients",
]

_SQRT2 = math.sqrt(2.0)
_CROSS_TOL = 1e-12


@dataclass(frozen=True)
class AbstractConstants:
    """Inputs of the abstract rate theorem.

    micro_gap: dissipation gap on velocity fluctuations (positive)
    macro_gap: gap of the velocity-averaged generator (positive)
    c1, c2:    relative bound of the mixed operator by the macroscopic one
    c3:        eigenvalue in the transported-average relation (optional)
    """

    micro_gap: float
    macro_gap: float
    c1: float
    c2: float
    c3: Optional[float] = None
    provenance: str = "analytic"  # "analytic" | "estimated"

    def __post_init__(self):
        if self.micro_gap <= 0 or self.macro_gap <= 0:
            raise ValidationError("gap-positive", "gaps must be positive")
        if self.c1 < 0 or self.c2 < 0 or (self.c3 is not None and self.c3 < 0):
            raise ValidationError("constant-negative", "c constants must be >= 0")


@dataclass(frozen=True)
class RateConstants:
    """Rate pair for the time-average error bound.

    ``sqrt2_absorbed`` records whether the abstract-route sqrt(2) prefactor
    is already folded into (k_t, k_sqrt); :func:`bound_coefficients`
    resolves it either way.
    """

    k_t: float
    k_sqrt: float
    variant: str  # "generic" | "generic-e4" | "langevin" | "fiber"
    sqrt2_absorbed: bool
    provenance: str = "analytic"

    def __post_init__(self):
        if self.k_t <= 0 or self.k_sqrt <= 0:
            raise ValidationError("rate-positive", "rate constants must be positive")


def bound_coefficients(rc: RateConstants, centered_l2: float):
    """Fully resolved bound curve:  t -> C1 / t + C2 / sqrt(t)."""
    pref = 1.0 if rc.sqrt2_absorbed else _SQRT2
    return pref * rc.k_t * centered_l2, pref * rc.k_sqrt * centered_l2


def generic_rates(a: AbstractConstants, use_algebraic: bool = False) -> RateConstants:
    """Rate pair of the abstract theorem (sharper variant when the
    transported-average relation constant ``c3`` is available)."""
    lm, lM = a.micro_gap, a.macro_gap
    k_t = _SQRT2 / math.sqrt(lM)
    base = (a.c1 + 1.0) / math.sqrt(lm) + a.c2 / (math.sqrt(lm) * lM)
    if use_algebraic:
        if a.c3 is None:
            raise ValidationError("missing-c3",
                                  "algebraic variant needs the c3 constant")
        k_sqrt = base + math.sqrt(a.c3) / math.sqrt(lM)
        variant = "generic-e4"
    else:
        k_sqrt = base + math.sqrt(a.c1 / math.sqrt(lM) + a.c2 / (lM * math.sqrt(lM)))
        variant = "generic"
    return RateConstants(k_t=k_t, k_sqrt=k_sqrt, variant=variant,
                         sqrt2_absorbed=False, provenance=a.provenance)


@dataclass(frozen=True)
class RateReport:
    """Specialized rate pair plus the abstract-route inputs and cross-check."""

    rate: RateConstants
    abstract: AbstractConstants
    generic: RateConstants
    a_phi: float
    b_phi: float
    cross_error: float
    inputs: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "model": self.rate.variant,
            "inputs": dict(self.inputs),
            "micro_gap": self.abstract.micro_gap,
            "macro_gap": self.abstract.macro_gap,
            "c1": self.abstract.c1,
            "c2": self.abstract.c2,
            "c3": self.abstract.c3,
            "k_t": self.rate.k_t,
            "k_sqrt": self.rate.k_sqrt,
            "a_phi": self.a_phi,
            "b_phi": self.b_phi,
            "cross_error": self.cross_error,
            "provenance": self.rate.provenance,
        }


def _cross_check(spec: RateConstants, gen: RateConstants) -> float:
    e1 = abs(spec.k_t - _SQRT2 * gen.k_t) / spec.k_t
    e2 = abs(spec.k_sqrt - _SQRT2 * gen.k_sqrt) / spec.k_sqrt
    err = max(e1, e2)
    if err > 64.0 * _CROSS_TOL:
        raise ValidationError(
            "cross-check",
            f"specialized and abstract-route rates disagree ({err:.3e})")
    return err


def langevin_rates(alpha: float, beta: float, gap: float,
                   kato=(0.0, 0.0, 0.0, 0.0),
                   provenance: str = "analytic") -> RateReport:
    """Rate constants for the kinetic particle model.

    ``kato`` is (a_hess, a_drift, b_hess, b_drift): the relative bounds of
    the Hessian-norm sum and the diagonal drift-gradient sum against the
    overdamped generator.  Returns the specialized pair (sqrt(2) absorbed)
    together with the abstract-route inputs; the two routes are verified
    against each other to 1e-12 relative.
    """
    if gap <= 0:
        raise ValidationError("gap-positive", "spectral gap must be positive")
    if alpha <= 0 or beta <= 0:
        raise ValidationError("param-positive", "alpha and beta must be positive")
    k1, k2, k3, k4 = kato
    if min(k1, k2, k3, k4) < 0:
        raise ValidationError("kato-negative", "relative-bound constants are >= 0")

    sqg = math.sqrt(gap)
    abstract = AbstractConstants(
        micro_gap=alpha,
        macro_gap=gap / beta,
        c1=alpha * math.sqrt(beta) / sqg + math.sqrt(3.0) * k1 + k2,
        c2=math.sqrt(3.0) / beta * k3 + k4 / beta,
        c3=alpha,
        provenance=provenance,
    )
    a_phi = math.sqrt(6.0) * k1 + _SQRT2 * (k2 + 1.0)
    b_phi = math.sqrt(6.0) * k3 + _SQRT2 * k4
    k_t = math.sqrt(beta) * 2.0 / sqg
    k_sqrt = (math.sqrt(alpha * beta) * 2.0 * _SQRT2 / sqg
              + (a_phi + b_phi / gap) / math.sqrt(alpha))
    rate = RateConstants(k_t=k_t, k_sqrt=k_sqrt, variant="langevin",
                         sqrt2_absorbed=True, provenance=provenance)
    gen = generic_rates(abstract, use_algebraic=True)
    err = _cross_check(rate, gen)
    return RateReport(rate=rate, abstract=abstract, generic=gen,
                      a_phi=a_phi, b_phi=b_phi, cross_error=err,
                      inputs={"alpha": alpha, "beta": beta, "gap": gap,
                              "kato": list(kato)})


def fiber_rates(sigma: float, d: int, gap: float, kato=(0.0, 0.0),
                provenance: str = "analytic") -> RateReport:
    """Rate constants for the sphere-velocity model.

    ``kato`` is (a_mixed, b_mixed): the combined relative bound of the
    second-derivative and drift-gradient sums against the overdamped
    generator.
    """
    if d < 2:
        raise ValidationError("fiber-dimension", "sphere model needs d >= 2")
    if gap <= 0:
        raise ValidationError("gap-positive", "spectral gap must be positive")
    if sigma <= 0:
        raise ValidationError("param-positive", "sigma must be positive")
    k1, k2 = kato
    if min(k1, k2) < 0:
        raise ValidationError("kato-negative", "relative-bound constants are >= 0")

    sqg = math.sqrt(gap)
    abstract = AbstractConstants(
        micro_gap=0.5 * sigma ** 2 * (d - 1),
        macro_gap=gap / d,
        c1=math.sqrt(d) * (d - 1) * sigma ** 2 / (2.0 * sqg) + d * k1,
        c2=k2,
        c3=0.5 * sigma ** 2 * (d - 1),
        provenance=provenance,
    )
    a_phi = 2.0 / math.sqrt(d - 1) * (d * k1 + 1.0)
    b_phi = 2.0 * d * k2 / math.sqrt(d - 1)
    k_t = 2.0 * math.sqrt(d) / sqg
    k_sqrt = (sigma * 2.0 * math.sqrt(d * (d - 1.0)) / sqg
              + (a_phi + b_phi / gap) / sigma)
    rate = RateConstants(k_t=k_t, k_sqrt=k_sqrt, variant="fiber",
                         sqrt2_absorbed=True, provenance=provenance)
    gen = generic_rates(abstract, use_algebraic=True)
    err = _cross_check(rate, gen)
    return RateReport(rate=rate, abstract=abstract, generic=gen,
                      a_phi=a_phi, b_phi=b_phi, cross_error=err,
                      inputs={"sigma": sigma, "d": d, "gap": gap,
                              "kato": list(kato)})
