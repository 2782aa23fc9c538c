"""Domain types shared by all modules.

Potentials, model parameters, phase-space states, stationary measures and
observables.  Everything here is immutable after construction and safe to
share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

__all__ = [
    "ValidationError",
    "partition_mass",
    "Potential",
    "ModelParams",
    "PhasePoint",
    "GibbsMeasure",
    "Observable",
    "validate_model",
    "ValidatedModel",
    "gibbs_moments",
    "micro_gap",
    "tensor_quadrature",
]

# potential codes understood by the compiled kernels (see _kernels.py)
POT_QUADRATIC = 0
POT_LJ2_1D = 1
POT_FREE = 2


class ValidationError(ValueError):
    """Raised when parameters or potentials violate a model contract."""

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


@dataclass(frozen=True)
class Potential:
    """Confining/interaction potential on position space.

    ``eval_fn`` maps an (..., dim) array to (...,), with ``+inf`` allowed;
    the domain indicator is ``eval_fn(x) < inf``.  ``grad_fn`` must be the
    gradient of ``eval_fn`` wherever the value is finite.  Built-in kinds
    ship exact gradients; user potentials may request a central-difference
    fallback (step ``1e-6 * (1 + |x|)``), which is unreliable near
    singularities and therefore never used for built-ins.
    """

    dim: int
    eval_fn: Callable[[np.ndarray], np.ndarray]
    grad_fn: Callable[[np.ndarray], np.ndarray]
    kind: str  # "quadratic" | "pair-lj-harmonic" | "free" | "user"
    hessian_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    periodic: Optional[tuple] = None  # box lengths per coordinate
    lower_bound: float = 0.0
    normalized: bool = False  # attestation that e^{-phi} dx is a probability
    box_hint: Optional[tuple] = None  # ((lo, hi), ...) truncation per axis
    kernel_code: Optional[int] = None
    kernel_params: Optional[np.ndarray] = None

    # -- constructors -----------------------------------------------------

    @staticmethod
    def quadratic(coeffs) -> "Potential":
        """phi(x) = sum_i a_i x_i^2 + const, a_i > 0, normalized exactly."""
        a = np.asarray(coeffs, dtype=float)
        if a.ndim != 1 or np.any(a <= 0):
            raise ValidationError("bad-coefficients", "quadratic coefficients must be positive")
        dim = a.size
        # log Z of exp(-sum a_i x_i^2) so that exp(-phi) integrates to 1
        const = 0.5 * float(np.sum(np.log(np.pi / a)))

        def _eval(x):
            x = np.asarray(x, dtype=float)
            return np.sum(a * x * x, axis=-1) + const

        def _grad(x):
            x = np.asarray(x, dtype=float)
            return 2.0 * a * x

        def _hess(x):
            x = np.asarray(x, dtype=float)
            h = np.zeros(x.shape + (dim,))
            idx = np.arange(dim)
            h[..., idx, idx] = 2.0 * a
            return h

        sd = 1.0 / np.sqrt(2.0 * a)
        box = tuple((-8.0 * s, 8.0 * s) for s in sd)
        params = np.concatenate([a, [const]])
        return Potential(
            dim=dim, eval_fn=_eval, grad_fn=_grad, hessian_fn=_hess,
            kind="quadratic", lower_bound=const, normalized=True,
            box_hint=box, kernel_code=POT_QUADRATIC, kernel_params=params,
        )

    @staticmethod
    def lj_pair_harmonic(a: float, epsilon: float, sigma: float,
                         normalize: bool = True) -> "Potential":
        """Two particles on a line: harmonic traps plus a Lennard-Jones pair.

        phi(x1, x2) = a (x1^2 + x2^2) + 4 eps ((s/r)^12 - (s/r)^6) + const
        with r = |x1 - x2|.  Singular (+inf) at r = 0.
        """
        if a <= 0 or epsilon <= 0 or sigma <= 0:
            raise ValidationError("bad-coefficients", "a, epsilon, sigma must be positive")

        def _pair(r):
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                s6 = (sigma / r) ** 6
                v = 4.0 * epsilon * s6 * (s6 - 1.0)
            return np.where(r > 0, v, np.inf)

        def _raw(x):
            x = np.asarray(x, dtype=float)
            r = np.abs(x[..., 0] - x[..., 1])
            return a * (x[..., 0] ** 2 + x[..., 1] ** 2) + _pair(r)

        const = 0.0
        if normalize:
            # rotated coordinates split the integral into two 1-d factors:
            # with s, r the scaled sum/difference, phi = a s^2 + a r^2 +
            # pair(sqrt(2)|r|), so Z = sqrt(pi/a) * int exp(-a r^2 - pair)
            t, w = np.polynomial.legendre.leggauss(4000)
            span = 10.0 / math.sqrt(2.0 * a) + 2.0 * sigma
            r = span * t
            fr = np.exp(-a * r * r
                        - np.minimum(_pair(np.sqrt(2.0) * np.abs(r)), 700.0))
            const = 0.5 * math.log(math.pi / a) + math.log(span * float(np.sum(w * fr)))

        def _eval(x):
            return _raw(x) + const

        def _grad(x):
            x = np.asarray(x, dtype=float)
            d = x[..., 0] - x[..., 1]
            r = np.abs(d)
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                s6 = (sigma / r) ** 6
                dv = 4.0 * epsilon * s6 * (6.0 - 12.0 * s6) / r
                dv = np.where(r > 0, dv, np.inf)
                g = np.empty_like(x)
                g[..., 0] = 2.0 * a * x[..., 0] + dv * np.sign(d)
                g[..., 1] = 2.0 * a * x[..., 1] - dv * np.sign(d)
            return g

        def _hess(x):
            x = np.asarray(x, dtype=float)
            d = x[..., 0] - x[..., 1]
            r = np.abs(d)
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                s6 = (sigma / r) ** 6
                d2v = 4.0 * epsilon * s6 * (156.0 * s6 - 42.0) / (r * r)
            h = np.zeros(x.shape + (2,))
            h[..., 0, 0] = 2.0 * a + d2v
            h[..., 1, 1] = 2.0 * a + d2v
            h[..., 0, 1] = -d2v
            h[..., 1, 0] = -d2v
            return h

        sd = 1.0 / math.sqrt(2.0 * a)
        reach = 8.0 * sd + 2.0 * sigma
        params = np.array([a, epsilon, sigma, const])
        return Potential(
            dim=2, eval_fn=_eval, grad_fn=_grad, hessian_fn=_hess,
            kind="pair-lj-harmonic", lower_bound=const - 2.0 * epsilon,
            normalized=normalize, box_hint=((-reach, reach), (-reach, reach)),
            kernel_code=POT_LJ2_1D, kernel_params=params,
        )

    @staticmethod
    def free(dim: int) -> "Potential":
        """Constant potential (zero force).  Not normalizable on R^dim;
        intended for integrator tests and periodic boxes only."""

        def _eval(x):
            x = np.asarray(x, dtype=float)
            return np.zeros(x.shape[:-1])

        def _grad(x):
            x = np.asarray(x, dtype=float)
            return np.zeros_like(x)

        def _hess(x):
            x = np.asarray(x, dtype=float)
            return np.zeros(x.shape + (dim,))

        return Potential(
            dim=dim, eval_fn=_eval, grad_fn=_grad, hessian_fn=_hess,
            kind="free", normalized=False,
            kernel_code=POT_FREE, kernel_params=np.zeros(1),
        )

    @staticmethod
    def user(dim, eval_fn, grad_fn=None, hessian_fn=None, normalized=False,
             box_hint=None, lower_bound=0.0, periodic=None) -> "Potential":
        """Wrap a user-supplied potential.  Without ``grad_fn`` a
        central-difference fallback is installed."""
        if grad_fn is None:
            grad_fn = _central_difference_gradient(eval_fn)
        return Potential(
            dim=dim, eval_fn=eval_fn, grad_fn=grad_fn, hessian_fn=hessian_fn,
            kind="user", normalized=normalized, box_hint=box_hint,
            lower_bound=lower_bound, periodic=periodic,
        )

    # -- helpers -----------------------------------------------------------

    def in_domain(self, x) -> np.ndarray:
        return np.isfinite(self.eval_fn(x))

    def default_box(self) -> tuple:
        if self.box_hint is not None:
            return tuple(self.box_hint)
        return tuple((-8.0, 8.0) for _ in range(self.dim))


def _central_difference_gradient(eval_fn):
    def _grad(x):
        x = np.asarray(x, dtype=float)
        g = np.zeros_like(x)
        for i in range(x.shape[-1]):
            h = 1e-6 * (1.0 + np.abs(x[..., i]))
            xp = x.copy()
            xm = x.copy()
            xp[..., i] += h
            xm[..., i] -= h
            g[..., i] = (eval_fn(xp) - eval_fn(xm)) / (2.0 * h)
        return g
    return _grad


def tensor_quadrature(fn, box, nodes_per_axis=80):
    """Integrate fn over a box with a tensor Gauss-Legendre rule.

    ``fn`` takes an (Q, dim) array and returns (Q,).  Returns a float.
    """
    dim = len(box)
    pts_1d, wts_1d = [], []
    for (lo, hi) in box:
        t, w = np.polynomial.legendre.leggauss(nodes_per_axis)
        pts_1d.append(0.5 * (hi - lo) * t + 0.5 * (hi + lo))
        wts_1d.append(0.5 * (hi - lo) * w)
    grids = np.meshgrid(*pts_1d, indexing="ij")
    x = np.stack([g.ravel() for g in grids], axis=-1)
    w = np.ones(x.shape[0])
    for g in np.meshgrid(*wts_1d, indexing="ij"):
        w *= g.ravel()
    vals = np.asarray(fn(x), dtype=float)
    vals = np.where(np.isfinite(vals), vals, 0.0)
    return float(np.sum(w * vals))


def partition_mass(phi: "Potential", nodes_per_axis: int = 120) -> float:
    """Total mass of exp(-phi) dx (should be 1 for normalized potentials).

    The two-particle pair kind integrates in rotated sum/difference
    coordinates, where the mass factorizes into two one-dimensional
    integrals; a plain tensor rule misresolves the narrow pair channel.
    """
    if phi.kind == "pair-lj-harmonic":
        a, eps, sg, const = (float(v) for v in phi.kernel_params)
        t, w = np.polynomial.legendre.leggauss(4000)
        span = 10.0 / math.sqrt(2.0 * a) + 2.0 * sg
        r = span * t
        diff = np.zeros((t.size, 2))
        diff[:, 0] = r / math.sqrt(2.0)
        diff[:, 1] = -r / math.sqrt(2.0)
        fr = np.exp(-np.minimum(phi.eval_fn(diff), 700.0))
        zs = math.sqrt(math.pi / a)
        return float(zs * span * np.sum(w * fr))
    box = phi.default_box()
    return tensor_quadrature(
        lambda x: np.exp(-np.minimum(phi.eval_fn(x), 700.0)), box,
        nodes_per_axis)


@dataclass(frozen=True)
class ModelParams:
    """Model selector plus physical constants.

    kinetic particle model: friction ``alpha`` and inverse temperature
    ``beta``; sphere-velocity model: noise amplitude ``sigma``.  ``d`` is
    the ambient space dimension and ``n_particles`` the particle count
    (always 1 for the sphere model).
    """

    model: str  # "langevin" | "fiber"
    d: int
    n_particles: int = 1
    alpha: float = 1.0
    beta: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.model not in ("langevin", "fiber"):
            raise ValidationError("bad-model", f"unknown model {self.model!r}")
        if self.d < 1 or self.n_particles < 1:
            raise ValidationError("bad-dimension", "d and n_particles must be >= 1")
        if self.model == "langevin":
            if self.alpha <= 0:
                raise ValidationError("alpha-positive", "alpha must be positive")
            if self.beta <= 0:
                raise ValidationError("beta-positive", "beta must be positive")
        else:
            if self.sigma <= 0:
                raise ValidationError("sigma-positive", "sigma must be positive")
            if self.d < 2:
                raise ValidationError("fiber-dimension", "fiber requires d >= 2")
            if self.n_particles != 1:
                raise ValidationError("fiber-particles", "fiber model is single-particle")

    @property
    def position_dim(self) -> int:
        return self.d * self.n_particles

    @property
    def velocity_dim(self) -> int:
        return self.d * self.n_particles if self.model == "langevin" else self.d


def micro_gap(params: ModelParams) -> float:
    """Spectral-gap constant of the velocity dissipation.

    Equals the friction for the kinetic model and ``sigma^2 (d-1) / 2`` for
    the sphere-velocity model.  The same number is the eigenvalue constant
    of the transported-average relation checked in :mod:`ergokit.operators`.
    """
    if params.model == "langevin":
        return params.alpha
    return 0.5 * params.sigma ** 2 * (params.d - 1)


@dataclass(frozen=True)
class PhasePoint:
    """Position-velocity state.  Velocity lies on the unit sphere for the
    fiber model (checked to 1e-12 at construction)."""

    x: np.ndarray
    omega: np.ndarray
    spherical: bool = False

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float))
        if self.spherical:
            nrm = float(np.linalg.norm(self.omega))
            if abs(nrm - 1.0) > 1e-12:
                raise ValidationError("sphere-constraint",
                                      f"|omega| - 1 = {nrm - 1.0:.3e} exceeds 1e-12")


@dataclass(frozen=True)
class GibbsMeasure:
    """Stationary law: exp(-phi(x)) dx tensor a velocity marginal.

    The velocity marginal is a centered Gaussian with covariance I/beta for
    the kinetic model and the uniform (normalized surface) measure on the
    unit sphere for the sphere-velocity model.
    """

    potential: Potential
    params: ModelParams
    log_normalizer: Optional[float] = None

    def __post_init__(self):
        if self.potential.dim != self.params.position_dim:
            raise ValidationError("dim-mismatch", "potential dim != d * n_particles")

    @property
    def velocity_marginal(self) -> str:
        return "gaussian" if self.params.model == "langevin" else "uniform-sphere"

    def position_moments(self):
        """(mean, variance) per axis; closed form for quadratic potentials,
        quadrature otherwise (dim <= 3)."""
        phi = self.potential
        if phi.kind == "quadratic":
            a = phi.kernel_params[:-1]
            return np.zeros(phi.dim), 1.0 / (2.0 * a)
        if phi.dim > 3:
            raise ValidationError("moments-unavailable",
                                  "position moments need quadrature (dim <= 3)")
        box = phi.default_box()
        dens = lambda x: np.exp(-np.minimum(phi.eval_fn(x), 700.0))
        z = tensor_quadrature(dens, box, 120)
        mean = np.array([
            tensor_quadrature(lambda x: x[:, i] * dens(x), box, 120) / z
            for i in range(phi.dim)
        ])
        var = np.array([
            tensor_quadrature(lambda x: x[:, i] ** 2 * dens(x), box, 120) / z
            for i in range(phi.dim)
        ]) - mean ** 2
        return mean, var

    def velocity_moments(self):
        """(mean, covariance-diagonal) of the velocity marginal."""
        m = self.params.velocity_dim
        if self.params.model == "langevin":
            return np.zeros(m), np.full(m, 1.0 / self.params.beta)
        return np.zeros(m), np.full(m, 1.0 / self.params.d)


@dataclass(frozen=True)
class Observable:
    """Scalar phase-space function with optional analytic metadata.

    ``eval_fn(x, omega)`` is vectorized over a leading batch axis.  ``code``
    selects a compiled fast path: ``("x", i)`` or ``("omega", i)`` for
    coordinate observables.  ``generator_eval`` is the image under the full
    Kolmogorov generator when known (used by martingale accumulators).
    """

    eval_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    known_mean: Optional[float] = None
    known_l2: Optional[float] = None  # L2(mu) norm of the observable
    code: Optional[tuple] = None
    generator_eval: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    name: str = "f"

    @staticmethod
    def coordinate(block: str, index: int, measure: GibbsMeasure) -> "Observable":
        """Coordinate observable x_i or omega_i with exact moments."""
        if block not in ("x", "omega"):
            raise ValidationError("bad-observable", f"unknown block {block!r}")
        p = measure.params
        if block == "x":
            mean, var = measure.position_moments()
            known_mean = float(mean[index])
            known_l2 = math.sqrt(float(var[index]) + known_mean ** 2)
            fn = lambda x, om: x[..., index]
        else:
            _, vdiag = measure.velocity_moments()
            known_mean = 0.0
            known_l2 = math.sqrt(float(vdiag[index]))
            fn = lambda x, om: om[..., index]
        return Observable(eval_fn=fn, known_mean=known_mean, known_l2=known_l2,
                          code=(block, index), name=f"{block}{index}")


@dataclass(frozen=True)
class ValidatedModel:
    """Bundle returned by :func:`validate_model`; safe input for the
    integrator and ensemble layers."""

    params: ModelParams
    potential: Potential
    measure: GibbsMeasure
    checks: dict = field(default_factory=dict)


def validate_model(params: ModelParams, phi: Potential,
                   assume_normalized: bool = False,
                   assume_grad_integrable: bool = False) -> ValidatedModel:
    """Validate a (parameters, potential) pair and build its Gibbs measure.

    Quadrature checks (normalization of exp(-phi) dx, square integrability
    of the gradient under it) run for dim <= 3; above that the caller must
    attest via the ``assume_*`` flags.  Gradient consistency is spot-checked
    against central differences on interior sample points.
    """
    checks: dict = {}
    if phi.dim != params.position_dim:
        raise ValidationError("dim-mismatch",
                              f"potential dim {phi.dim} != d*N = {params.position_dim}")

    if phi.kind == "free":
        raise ValidationError("not-normalizable",
                              "free potential has no invariant probability measure")

    # normalization of exp(-phi) dx
    if phi.dim <= 3 and phi.periodic is None:
        mass = partition_mass(phi)
        checks["normalization_mass"] = mass
        if abs(mass - 1.0) > 1e-4:
            raise ValidationError(
                "normalization",
                f"int exp(-phi) dx = {mass:.6f}, expected 1 within 1e-4")
    elif not (phi.normalized or assume_normalized):
        raise ValidationError("normalization-unverified",
                              "dim > 3: pass assume_normalized=True to attest")

    # gradient square-integrability under exp(-phi) dx (kinetic model)
    if params.model == "langevin":
        if phi.dim <= 3 and phi.periodic is None:
            box = phi.default_box()

            def _g2(x):
                v = phi.eval_fn(x)
                g = phi.grad_fn(x)
                g2 = np.sum(np.where(np.isfinite(g), g, 0.0) ** 2, axis=-1)
                return np.where(np.isfinite(v), g2 * np.exp(-np.minimum(v, 700.0)), 0.0)

            gi = tensor_quadrature(_g2, box, 120)
            checks["grad_l2"] = gi
            if not np.isfinite(gi):
                raise ValidationError("gradient-integrability",
                                      "grad phi not square integrable under exp(-phi) dx")
        elif not assume_grad_integrable and phi.dim > 3:
            raise ValidationError("gradient-unverified",
                                  "dim > 3: pass assume_grad_integrable=True to attest")

    # spot check grad against finite differences at interior points
    rng = np.random.default_rng(0)
    box = phi.default_box()
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    pts = lo + (hi - lo) * rng.random((32, phi.dim)) * 0.5 + 0.25 * (hi - lo)
    vals = phi.eval_fn(pts)
    pts = pts[np.isfinite(vals) & (np.abs(vals) < 50.0)]
    if len(pts):
        fd = _central_difference_gradient(phi.eval_fn)(pts)
        ga = phi.grad_fn(pts)
        scale = np.maximum(np.abs(ga), 1.0)
        err = float(np.max(np.abs(fd - ga) / scale))
        checks["grad_fd_error"] = err
        if err > 1e-4:
            raise ValidationError("gradient-mismatch",
                                  f"grad_fn disagrees with finite differences ({err:.2e})")

    measure = GibbsMeasure(potential=phi, params=params)
    return ValidatedModel(params=params, potential=phi, measure=measure, checks=checks)


def gibbs_moments(measure: GibbsMeasure, spec: str, i: int = 0, j: int = 1) -> float:
    """Closed-form velocity-marginal moments (no quadrature).

    spec:
      "component_l2sq"  -> E[omega_i^2]
      "square_l2sq"     -> E[omega_i^4]        (norm^2 of omega_i^2)
      "pair_l2sq"       -> E[omega_i^2 omega_j^2], i != j
      "cross_mean"      -> E[omega_i omega_j]
    """
    p = measure.params
    if p.model == "langevin":
        b = p.beta
        if spec == "component_l2sq":
            return 1.0 / b
        if spec == "square_l2sq":
            return 3.0 / b ** 2
        if spec == "pair_l2sq":
            if i == j:
                raise ValidationError("bad-moment", "pair_l2sq needs i != j")
            return 1.0 / b ** 2
        if spec == "cross_mean":
            return (1.0 / b) if i == j else 0.0
    else:
        d = p.d
        if spec == "component_l2sq":
            return 1.0 / d
        if spec == "square_l2sq":
            return 3.0 / (d * (d + 2.0))
        if spec == "pair_l2sq":
            if i == j:
                raise ValidationError("bad-moment", "pair_l2sq needs i != j")
            return 1.0 / (d * (d + 2.0))
        if spec == "cross_mean":
            return (1.0 / d) if i == j else 0.0
    raise ValidationError("bad-moment", f"unsupported moment spec {spec!r}")
