"""Quadrature realization of the generator pieces on callable test functions.

The full Kolmogorov generator splits into a symmetric dissipative part
acting on the velocity and an antisymmetric transport part mixing position
and velocity.  Test functions carry analytic derivative oracles so that
nested applications (needed for the transported-average identities) do not
compound numerical differentiation error.

Velocity derivatives for the sphere model are ambient: a function given in
a neighborhood of the sphere is differentiated in R^d and the tangential
projection / radial-split formulas recover the intrinsic operators on
|omega| = 1.  These are extension independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.special import roots_jacobi

from .core import ModelParams, Potential, ValidationError, micro_gap

__all__ = [
    "OperatorError",
    "TestFunction",
    "QuadratureScheme",
    "build_quadrature",
    "inner_product",
    "position_inner_product",
    "velocity_average",
    "apply_dissipative",
    "apply_transport",
    "apply_generator",
    "apply_overdamped",
    "sphere_laplacian",
    "check_identity",
    "IdentityReport",
    "position_family",
    "phase_family",
    "Factor1D",
    "ProductBump",
    "PolyPart",
]


class OperatorError(ValueError):
    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


# ---------------------------------------------------------------------------
# test functions
# ---------------------------------------------------------------------------

@dataclass
class TestFunction:
    """Phase-space function with analytic partial-derivative oracles.

    All callables are vectorized: ``x`` has shape (Q, nx), ``omega`` shape
    (Q, nv); outputs are (Q,), (Q, nx), (Q, nx, nx) etc.  ``x_only`` marks
    functions constant in the velocity (their velocity oracles vanish
    identically).  Oracles that are ``None`` are unavailable; operators that
    need them raise :class:`OperatorError`.
    """

    eval_fn: Callable
    dx: Optional[Callable] = None
    dom: Optional[Callable] = None
    dxx: Optional[Callable] = None
    domom: Optional[Callable] = None
    dxom: Optional[Callable] = None
    x_only: bool = False
    support: Optional[tuple] = None
    name: str = "f"

    def __call__(self, x, om=None):
        return self.eval_fn(x, om)

    def need(self, *oracles):
        for o in oracles:
            if getattr(self, o) is None:
                raise OperatorError(
                    "missing-oracle",
                    f"test function {self.name!r} lacks derivative oracle {o!r}")


class Factor1D:
    """p((x-c)/s) * exp(-((x-c)/s)^2 / 2): polynomial times Gaussian bump.

    Closed under differentiation; derivative coefficient arrays are built
    once with the transform  P -> P' - t P  (one 1/s factor per order).
    """

    def __init__(self, coeffs, center=0.0, scale=1.0, orders=3):
        c = np.atleast_1d(np.asarray(coeffs, dtype=float))
        self.center = float(center)
        self.scale = float(scale)
        self.coeffs = [c]
        for _ in range(orders):
            p = self.coeffs[-1]
            self.coeffs.append(npoly.polysub(npoly.polyder(p), npoly.polymulx(p)))

    def deriv(self, x, order=0):
        t = (np.asarray(x, dtype=float) - self.center) / self.scale
        val = npoly.polyval(t, self.coeffs[order]) * np.exp(-0.5 * t * t)
        return val / self.scale ** order

    def boundary_max_ratio(self, lo, hi):
        # bound on |value| at box ends relative to the peak, for the
        # compact-support-within-box sanity check
        t = np.array([(lo - self.center) / self.scale, (hi - self.center) / self.scale])
        edge = np.max(np.abs(npoly.polyval(t, self.coeffs[0]) * np.exp(-0.5 * t * t)))
        grid = np.linspace(lo, hi, 512)
        peak = np.max(np.abs(self.deriv(grid, 0)))
        return float(edge / (peak + 1e-300))


class ProductBump:
    """Tensor product of :class:`Factor1D` over axes; value/grad/hess."""

    def __init__(self, factors):
        self.factors = list(factors)
        self.dim = len(self.factors)

    def val(self, z):
        out = np.ones(z.shape[0])
        for a, f in enumerate(self.factors):
            out *= f.deriv(z[:, a], 0)
        return out

    def grad(self, z):
        vals = [f.deriv(z[:, a], 0) for a, f in enumerate(self.factors)]
        d1 = [f.deriv(z[:, a], 1) for a, f in enumerate(self.factors)]
        g = np.empty((z.shape[0], self.dim))
        for a in range(self.dim):
            acc = d1[a].copy()
            for b in range(self.dim):
                if b != a:
                    acc *= vals[b]
            g[:, a] = acc
        return g

    def hess(self, z):
        vals = [f.deriv(z[:, a], 0) for a, f in enumerate(self.factors)]
        d1 = [f.deriv(z[:, a], 1) for a, f in enumerate(self.factors)]
        d2 = [f.deriv(z[:, a], 2) for a, f in enumerate(self.factors)]
        h = np.empty((z.shape[0], self.dim, self.dim))
        for a in range(self.dim):
            for b in range(self.dim):
                if a == b:
                    acc = d2[a].copy()
                else:
                    acc = d1[a] * d1[b]
                for c in range(self.dim):
                    if c != a and c != b:
                        acc *= vals[c]
                h[:, a, b] = acc
        return h


class PolyPart:
    """Multivariate polynomial in the ambient velocity coordinates.

    Serves both models: plain polynomial observables for the kinetic model
    (the Gauss-Hermite rule integrates them exactly) and harmonic-polynomial
    restrictions for the sphere model.
    """

    @staticmethod
    def coordinate(dim, i):
        return PolyPart({tuple(1 if a == i else 0 for a in range(dim)): 1.0})

    def __init__(self, terms: dict):
        # terms: {(k_1, ..., k_d): coefficient}
        self.terms = {tuple(k): float(v) for k, v in terms.items()}
        self.dim = len(next(iter(self.terms)))

    def val(self, z):
        out = np.zeros(z.shape[0])
        for k, c in self.terms.items():
            t = np.full(z.shape[0], c)
            for a, p in enumerate(k):
                if p:
                    t *= z[:, a] ** p
            out += t
        return out

    def grad(self, z):
        g = np.zeros((z.shape[0], self.dim))
        for k, c in self.terms.items():
            for a, p in enumerate(k):
                if p == 0:
                    continue
                t = np.full(z.shape[0], c * p)
                for b, q in enumerate(k):
                    e = q - 1 if b == a else q
                    if e:
                        t *= z[:, b] ** e
                g[:, a] += t
        return g

    def hess(self, z):
        h = np.zeros((z.shape[0], self.dim, self.dim))
        for k, c in self.terms.items():
            for a, p in enumerate(k):
                for b, q in enumerate(k):
                    if a == b:
                        if p < 2:
                            continue
                        coef = c * p * (p - 1)
                    else:
                        if p == 0 or q == 0:
                            continue
                        coef = c * p * q
                    t = np.full(z.shape[0], coef)
                    for e_ax, e in enumerate(k):
                        r = e
                        if e_ax == a:
                            r -= 1
                        if e_ax == b:
                            r -= 1
                        if r:
                            t *= z[:, e_ax] ** r
                    h[:, a, b] += t
        return h


def tensor_test_function(xpart: Optional[ProductBump], vpart=None,
                         support=None, name="f") -> TestFunction:
    """Assemble a TestFunction from a position part and a velocity part."""

    def _xv(x):
        return xpart.val(x) if xpart is not None else np.ones(x.shape[0])

    def _vv(om):
        return vpart.val(om) if vpart is not None else np.ones(om.shape[0])

    def eval_fn(x, om=None):
        out = _xv(x) if xpart is not None else None
        if vpart is not None:
            vv = vpart.val(om)
            out = vv if out is None else out * vv
        if out is None:
            out = np.ones(x.shape[0])
        return out

    def dx(x, om=None):
        g = xpart.grad(x)
        if vpart is not None:
            g = g * vpart.val(om)[:, None]
        return g

    def dom(x, om=None):
        if vpart is None:
            return np.zeros_like(om)
        g = vpart.grad(om)
        if xpart is not None:
            g = g * xpart.val(x)[:, None]
        return g

    def dxx(x, om=None):
        h = xpart.hess(x)
        if vpart is not None:
            h = h * vpart.val(om)[:, None, None]
        return h

    def domom(x, om=None):
        if vpart is None:
            return np.zeros(om.shape + (om.shape[-1],))
        h = vpart.hess(om)
        if xpart is not None:
            h = h * xpart.val(x)[:, None, None]
        return h

    def dxom(x, om=None):
        if vpart is None or xpart is None:
            n = x.shape[1] if xpart is not None else 0
            m = om.shape[1]
            return np.zeros((x.shape[0], n, m))
        return xpart.grad(x)[:, :, None] * vpart.grad(om)[:, None, :]

    return TestFunction(
        eval_fn=eval_fn,
        dx=dx if xpart is not None else (lambda x, om=None: np.zeros_like(x)),
        dom=dom, dxx=dxx if xpart is not None else (lambda x, om=None: np.zeros(x.shape + (x.shape[-1],))),
        domom=domom, dxom=dxom,
        x_only=vpart is None, support=support, name=name,
    )


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureScheme:
    """Tensor rule for the stationary measure.

    Position: Gauss-Legendre nodes on a truncated box with the density
    exp(-phi) folded into the weights (total mass within ``mass_tol`` of 1).
    Velocity: Gauss-Hermite tensor rule (Gaussian marginal) or a product
    sphere rule of declared polynomial ``exactness``; Monte-Carlo fallback
    above d = 4 carries ``mc_std_error`` per unit integrand.
    """

    model: str
    box: tuple
    x_nodes: np.ndarray
    x_weights: np.ndarray
    v_nodes: np.ndarray
    v_weights: np.ndarray
    exactness: int
    x_mass: float
    mass_tol: float
    mc_std_error: float = 0.0
    phase_x: np.ndarray = field(repr=False, default=None)
    phase_v: np.ndarray = field(repr=False, default=None)
    phase_w: np.ndarray = field(repr=False, default=None)


def gauss_legendre_box(box, nodes_per_axis):
    pts, wts = [], []
    for (lo, hi) in box:
        t, w = np.polynomial.legendre.leggauss(nodes_per_axis)
        pts.append(0.5 * (hi - lo) * t + 0.5 * (hi + lo))
        wts.append(0.5 * (hi - lo) * w)
    grids = np.meshgrid(*pts, indexing="ij")
    x = np.stack([g.ravel() for g in grids], axis=-1)
    w = np.ones(x.shape[0])
    for g in np.meshgrid(*wts, indexing="ij"):
        w *= g.ravel()
    return x, w


def gauss_hermite_rule(dim, beta, nodes_per_axis):
    t, w = np.polynomial.hermite.hermgauss(nodes_per_axis)
    t = t * math.sqrt(2.0 / beta)
    w = w / math.sqrt(math.pi)
    grids = np.meshgrid(*([t] * dim), indexing="ij")
    v = np.stack([g.ravel() for g in grids], axis=-1)
    wt = np.ones(v.shape[0])
    for g in np.meshgrid(*([w] * dim), indexing="ij"):
        wt *= g.ravel()
    return v, wt


def gauss_hermite_position_rule(coeffs, nodes_per_axis):
    """Per-axis Gauss rule with weight exp(-a_i x_i^2), normalized.

    Exact weight match for quadratic potentials; total mass is 1 to
    rounding and smooth localized integrands converge superexponentially.
    """
    a = np.asarray(coeffs, dtype=float)
    t, w = np.polynomial.hermite.hermgauss(nodes_per_axis)
    w = w / math.sqrt(math.pi)
    pts = [t / math.sqrt(ai) for ai in a]
    grids = np.meshgrid(*pts, indexing="ij")
    x = np.stack([g.ravel() for g in grids], axis=-1)
    wt = np.ones(x.shape[0])
    for g in np.meshgrid(*([w] * a.size), indexing="ij"):
        wt *= g.ravel()
    return x, wt


def sphere_rule(d, exactness=15):
    """Product quadrature on the unit sphere, exact for polynomials of the
    declared degree (d <= 4)."""
    if d == 2:
        m = 2 * exactness + 2
        th = 2.0 * math.pi * np.arange(m) / m
        nodes = np.stack([np.cos(th), np.sin(th)], axis=-1)
        return nodes, np.full(m, 1.0 / m)
    if d in (3, 4):
        nu = exactness // 2 + 2
        a = 0.5 * (d - 3)
        u, wu = roots_jacobi(nu, a, a)
        wu = wu / np.sum(wu)
        sub_nodes, sub_w = sphere_rule(d - 1, exactness)
        s = np.sqrt(np.maximum(1.0 - u ** 2, 0.0))
        nodes = np.concatenate([
            s[:, None, None] * sub_nodes[None, :, :],
            np.broadcast_to(u[:, None, None], (nu, len(sub_w), 1)),
        ], axis=-1).reshape(-1, d)
        w = (wu[:, None] * sub_w[None, :]).ravel()
        return nodes, w
    raise OperatorError("sphere-dim", "tabulated sphere rules cover d <= 4")


def sphere_rule_mc(d, n, seed=0):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, d))
    nodes = g / np.linalg.norm(g, axis=1, keepdims=True)
    return nodes, np.full(n, 1.0 / n)


def build_quadrature(params: ModelParams, potential: Potential,
                     x_nodes_per_axis=None, v_nodes_per_axis=48,
                     sphere_exactness=None, mc_nodes=4096, seed=0,
                     box=None, mass_tol=1e-6) -> QuadratureScheme:
    nx = params.position_dim
    if box is None:
        box = potential.default_box()
    if potential.kind == "quadratic":
        # weight-matched Gauss rule: mass exactly 1, spectral accuracy;
        # the effective box is the node span
        if x_nodes_per_axis is None:
            x_nodes_per_axis = {1: 80, 2: 48, 3: 24}.get(nx, 12)
        xn, xw = gauss_hermite_position_rule(potential.kernel_params[:-1],
                                             x_nodes_per_axis)
        box = tuple((float(xn[:, a].min()), float(xn[:, a].max()))
                    for a in range(nx))
    else:
        if x_nodes_per_axis is None:
            x_nodes_per_axis = {1: 120, 2: 64, 3: 28}.get(nx, 16)
        xn, xw = gauss_legendre_box(box, x_nodes_per_axis)
        dens = np.exp(-np.minimum(potential.eval_fn(xn), 700.0))
        xw = xw * dens
    mass = float(np.sum(xw))
    if not (1.0 - 1e-3 <= mass <= 1.0 + 1e-3):
        raise OperatorError("mass", f"x-rule mass {mass:.6f} far from 1; widen the box")

    mc_se = 0.0
    if params.model == "langevin":
        vn, vw = gauss_hermite_rule(params.velocity_dim, params.beta, v_nodes_per_axis)
        exact = 2 * v_nodes_per_axis - 1
    else:
        if sphere_exactness is None:
            sphere_exactness = 15 if params.d == 2 else 9
        if params.d <= 4:
            vn, vw = sphere_rule(params.d, sphere_exactness)
            exact = sphere_exactness
        else:
            vn, vw = sphere_rule_mc(params.d, mc_nodes, seed)
            exact = 0
            mc_se = 1.0 / math.sqrt(mc_nodes)

    qx, qv = xn.shape[0], vn.shape[0]
    px = np.repeat(xn, qv, axis=0)
    pv = np.tile(vn, (qx, 1))
    pw = (xw[:, None] * vw[None, :]).ravel()
    return QuadratureScheme(
        model=params.model, box=tuple(box), x_nodes=xn, x_weights=xw,
        v_nodes=vn, v_weights=vw, exactness=exact, x_mass=mass,
        mass_tol=mass_tol, mc_std_error=mc_se,
        phase_x=px, phase_v=pv, phase_w=pw,
    )


def _check_support(f: TestFunction, q: QuadratureScheme):
    if f.support is None:
        return
    for (slo, shi), (blo, bhi) in zip(f.support, q.box):
        if slo < blo - 1e-12 or shi > bhi + 1e-12:
            raise OperatorError("support",
                                f"support of {f.name!r} exceeds quadrature box")


def inner_product(f: TestFunction, g: TestFunction, q: QuadratureScheme) -> float:
    """(f, g) in L2 of the stationary measure, by the tensor rule."""
    _check_support(f, q)
    _check_support(g, q)
    fv = f(q.phase_x, q.phase_v)
    gv = g(q.phase_x, q.phase_v) if g is not f else fv
    return float(np.sum(q.phase_w * fv * gv))


def norm(f: TestFunction, q: QuadratureScheme) -> float:
    return math.sqrt(max(inner_product(f, f, q), 0.0))


def position_inner_product(f, g, q: QuadratureScheme) -> float:
    """Inner product on velocity-averaged functions (position rule only)."""
    fv = f(q.x_nodes, None)
    gv = g(q.x_nodes, None) if g is not f else fv
    return float(np.sum(q.x_weights * fv * gv))


def position_norm(f, q) -> float:
    return math.sqrt(max(position_inner_product(f, f, q), 0.0))


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def velocity_average(f: TestFunction, q: QuadratureScheme) -> TestFunction:
    """Average out the velocity against its marginal; idempotent up to
    quadrature tolerance.  Result is a position-space function."""

    vn, vw = q.v_nodes, q.v_weights

    def eval_fn(x, om=None):
        qb = x.shape[0]
        xx = np.repeat(x, vn.shape[0], axis=0)
        vv = np.tile(vn, (qb, 1))
        vals = f(xx, vv).reshape(qb, vn.shape[0])
        return vals @ vw

    return TestFunction(eval_fn=eval_fn, x_only=True, support=f.support,
                        name=f"avg[{f.name}]")


def apply_dissipative(f: TestFunction, params: ModelParams,
                      potential: Potential) -> TestFunction:
    """Symmetric velocity-dissipation part of the generator."""
    f.need("dom", "domom")

    if params.model == "langevin":
        al, be = params.alpha, params.beta

        def eval_fn(x, om=None):
            d2 = f.domom(x, om)
            tr = np.trace(d2, axis1=1, axis2=2)
            return (al / be) * tr - al * np.sum(om * f.dom(x, om), axis=-1)

        return TestFunction(eval_fn=eval_fn, support=f.support, name=f"S[{f.name}]")

    half_s2 = 0.5 * params.sigma ** 2
    d = params.d

    def eval_fn(x, om=None):
        g = f.dom(x, om)
        h = f.domom(x, om)
        tr = np.trace(h, axis1=1, axis2=2)
        rad1 = np.sum(om * g, axis=-1)
        rad2 = np.einsum("qa,qab,qb->q", om, h, om)
        return half_s2 * (tr - (d - 1) * rad1 - rad2)

    return TestFunction(eval_fn=eval_fn, support=f.support, name=f"S[{f.name}]")


def sphere_laplacian(f: TestFunction) -> TestFunction:
    """Intrinsic sphere Laplacian from ambient oracles, on |omega| = 1."""
    f.need("dom", "domom")

    def eval_fn(x, om=None):
        d = om.shape[-1]
        g = f.dom(x, om)
        h = f.domom(x, om)
        tr = np.trace(h, axis1=1, axis2=2)
        rad1 = np.sum(om * g, axis=-1)
        rad2 = np.einsum("qa,qab,qb->q", om, h, om)
        return tr - (d - 1) * rad1 - rad2

    return TestFunction(eval_fn=eval_fn, support=f.support, name=f"lapS[{f.name}]")


def apply_transport(f: TestFunction, params: ModelParams,
                    potential: Potential) -> TestFunction:
    """Antisymmetric transport part of the generator.

    For position-only inputs the result carries first-order oracles, which
    is what the nested compositions in :func:`check_identity` need.
    """
    f.need("dx", "dom")

    if params.model == "langevin":
        be = params.beta

        def eval_fn(x, om=None):
            gphi = potential.grad_fn(x)
            return (-np.sum(om * f.dx(x, om), axis=-1)
                    + np.sum(gphi * f.dom(x, om), axis=-1) / be)
    else:
        dm1 = params.d - 1

        def eval_fn(x, om=None):
            gphi = potential.grad_fn(x)
            v = (gphi - np.sum(om * gphi, axis=-1, keepdims=True) * om) / dm1
            return (-np.sum(om * f.dx(x, om), axis=-1)
                    + np.sum(v * f.dom(x, om), axis=-1))

    out = TestFunction(eval_fn=eval_fn, support=f.support, name=f"A[{f.name}]")

    if f.x_only and f.dxx is not None:
        # A f = -omega . grad_x f: exact oracles for one more nesting level
        def dom(x, om=None):
            return -f.dx(x, om)

        def domom(x, om=None):
            return np.zeros(om.shape + (om.shape[-1],))

        def dx(x, om=None):
            return -np.einsum("qa,qak->qk", om, f.dxx(x, om))

        def dxom(x, om=None):
            return -f.dxx(x, om)

        out.dom, out.domom, out.dx, out.dxom = dom, domom, dx, dxom
    return out


def apply_generator(f: TestFunction, params: ModelParams,
                    potential: Potential) -> TestFunction:
    """Full Kolmogorov generator: dissipative part minus transport part."""
    sf = apply_dissipative(f, params, potential)
    af = apply_transport(f, params, potential)

    def eval_fn(x, om=None):
        return sf(x, om) - af(x, om)

    return TestFunction(eval_fn=eval_fn, support=f.support, name=f"L[{f.name}]")


def apply_overdamped(f: TestFunction, params: ModelParams,
                     potential: Potential) -> TestFunction:
    """Velocity-averaged (macroscopic) generator on position functions:
    prefactor * (laplacian - grad phi . grad)."""
    f.need("dx", "dxx")
    pref = 1.0 / params.beta if params.model == "langevin" else 1.0 / params.d

    def eval_fn(x, om=None):
        h = f.dxx(x, om)
        tr = np.trace(h, axis1=1, axis2=2)
        return pref * (tr - np.sum(potential.grad_fn(x) * f.dx(x, om), axis=-1))

    return TestFunction(eval_fn=eval_fn, x_only=True, support=f.support,
                        name=f"G[{f.name}]")


# ---------------------------------------------------------------------------
# identity checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IdentityReport:
    identity: str
    model: str
    function_id: str
    residual: float
    tolerance: float
    passed: bool
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        d = {"identity": self.identity, "model": self.model,
             "function_id": self.function_id, "residual": self.residual,
             "tolerance": self.tolerance, "pass": self.passed}
        d.update(self.extra)
        return d


def check_identity(identity: str, f: TestFunction, params: ModelParams,
                   potential: Potential, q: QuadratureScheme,
                   g: Optional[TestFunction] = None,
                   tol: Optional[float] = None) -> IdentityReport:
    """Evaluate one algebraic identity of the generator on a test function.

    identities:
      "antisymmetry"          |(Af,g) + (f,Ag)| relative to norm products
      "symmetry"              |(Sf,g) - (f,Sg)| likewise
      "nonpositivity"         (Sf,f) <= 0 up to quadrature tolerance
      "invariance"            integral of Lf against the stationary measure
      "micro-gap"             -(Sf,f) >= micro_gap * ||f - avg f||^2
      "transport-dissipation" S acts on transported averages by -micro_gap
      "macro-reduction"       velocity-averaging L(A(avg f)) gives -G f
    Relative residuals throughout; ``g`` defaults to ``f`` for the pairwise
    checks.  Functions must equal their velocity average ("position only")
    for the last two identities.
    """
    name = f.name if g is None else f"{f.name},{g.name}"
    mdl = params.model
    tiny = 1e-30

    if identity == "antisymmetry":
        tol = 1e-8 if tol is None else tol
        g = f if g is None else g
        af = apply_transport(f, params, potential)
        ag = apply_transport(g, params, potential)
        num = abs(inner_product(af, g, q) + inner_product(f, ag, q))
        den = norm(af, q) * norm(g, q) + norm(f, q) * norm(ag, q) + tiny
        r = num / den
        return IdentityReport("antisymmetry", mdl, name, r, tol, r <= tol)

    if identity == "symmetry":
        tol = 1e-8 if tol is None else tol
        g = f if g is None else g
        sf = apply_dissipative(f, params, potential)
        sg = apply_dissipative(g, params, potential)
        num = abs(inner_product(sf, g, q) - inner_product(f, sg, q))
        den = norm(sf, q) * norm(g, q) + norm(f, q) * norm(sg, q) + tiny
        r = num / den
        return IdentityReport("symmetry", mdl, name, r, tol, r <= tol)

    if identity == "nonpositivity":
        tol = 1e-10 if tol is None else tol
        sf = apply_dissipative(f, params, potential)
        val = inner_product(sf, f, q)
        scale = inner_product(f, f, q) + tiny
        r = max(val, 0.0) / scale
        return IdentityReport("nonpositivity", mdl, name, r, tol, r <= tol,
                              extra={"value": val})

    if identity == "invariance":
        tol = 1e-6 if tol is None else tol
        lf = apply_generator(f, params, potential)
        num = abs(float(np.sum(q.phase_w * lf(q.phase_x, q.phase_v))))
        den = norm(lf, q) + tiny
        r = num / den
        return IdentityReport("invariance", mdl, name, r, tol, r <= tol)

    if identity == "micro-gap":
        tol = 1e-6 if tol is None else tol
        lam = micro_gap(params)
        sf = apply_dissipative(f, params, potential)
        lhs = -inner_product(sf, f, q)
        pf = velocity_average(f, q)
        # ||f - avg f||^2 on the phase rule; the phase nodes repeat each
        # position node over the velocity rule, so expand avg f by repeat
        fv = f(q.phase_x, q.phase_v)
        pf_on_x = pf(q.x_nodes, None)
        dev = fv - np.repeat(pf_on_x, q.v_nodes.shape[0])
        rhs = float(np.sum(q.phase_w * dev * dev))
        margin = lhs - lam * rhs
        scale = inner_product(f, f, q) + tiny
        r = max(-margin, 0.0) / scale
        return IdentityReport("micro-gap", mdl, name, r, tol, r <= tol,
                              extra={"margin": margin, "lhs": lhs, "rhs": lam * rhs})

    if identity == "transport-dissipation":
        tol = 1e-8 if tol is None else tol
        if not f.x_only:
            raise OperatorError("domain", "identity needs a position-only function")
        c3 = micro_gap(params)
        af = apply_transport(f, params, potential)
        saf = apply_dissipative(af, params, potential)

        def resid(x, om=None):
            return saf(x, om) + c3 * af(x, om)

        rtf = TestFunction(eval_fn=resid, support=f.support, name="resid")
        r = norm(rtf, q) / (norm(af, q) + tiny)
        return IdentityReport("transport-dissipation", mdl, name, r, tol, r <= tol)

    if identity == "macro-reduction":
        tol = 1e-6 if tol is None else tol
        if not f.x_only:
            raise OperatorError("domain", "identity needs a position-only function")
        af = apply_transport(f, params, potential)
        laf = apply_generator(af, params, potential)
        plaf = velocity_average(laf, q)
        gf = apply_overdamped(f, params, potential)

        def resid(x, om=None):
            return plaf(x, None) + gf(x, None)

        rtf = TestFunction(eval_fn=resid, x_only=True, support=f.support, name="resid")
        r = position_norm(rtf, q) / (position_norm(gf, q) + tiny)
        return IdentityReport("macro-reduction", mdl, name, r, tol, r <= tol)

    if identity == "sphere-eigenvalue":
        # coordinate functions are eigenfunctions of the sphere Laplacian
        # with eigenvalue -(d-1); pointwise sup over the velocity rule
        tol = 1e-8 if tol is None else tol
        if params.model != "fiber":
            raise OperatorError("model", "sphere identity needs the fiber model")
        d = params.d
        lap = sphere_laplacian(f)
        vn = q.v_nodes
        x0 = np.zeros((vn.shape[0], params.position_dim))
        resid = lap(x0, vn) + (d - 1.0) * f(x0, vn)
        r = float(np.max(np.abs(resid))) / (d - 1.0)
        return IdentityReport("sphere-eigenvalue", mdl, name, r, tol, r <= tol)

    if identity == "transport-norm-split":
        # ||omega . grad_x f||^2 in phase space equals (1/d) of the
        # position-space gradient norm, by symmetry of the sphere marginal
        tol = 1e-10 if tol is None else tol
        if params.model != "fiber" or not f.x_only:
            raise OperatorError("model", "needs fiber model and position-only f")
        af = apply_transport(f, params, potential)
        lhs = inner_product(af, af, q)

        def grad_sq(x, om=None):
            g = f.dx(x, None)
            return np.sum(g * g, axis=-1)

        gtf = TestFunction(eval_fn=grad_sq, x_only=True, support=f.support, name="g2")
        one = TestFunction(eval_fn=lambda x, om=None: np.ones(x.shape[0]), x_only=True)
        rhs = position_inner_product(gtf, one, q) / params.d
        r = abs(lhs - rhs) / (abs(lhs) + tiny)
        return IdentityReport("transport-norm-split", mdl, name, r, tol, r <= tol,
                              extra={"lhs": lhs, "rhs": rhs})

    raise OperatorError("identity", f"unknown identity tag {identity!r}")


# ---------------------------------------------------------------------------
# bundled test families
# ---------------------------------------------------------------------------

def _bump_axes(box, rng, degree, span=None):
    """Random bump: centers near the middle of the geometry box, scales a
    seventh of its halfwidth, capped so the value decays below 1e-10 at the
    declared support (8 scales out).  Returns (bump, support)."""
    factors = []
    support = []
    for ax, (lo, hi) in enumerate(box):
        width = hi - lo
        center = 0.5 * (lo + hi) + 0.08 * width * (rng.random() - 0.5)
        scale = width / 14.0 * (0.8 + 0.4 * rng.random())
        if span is not None:
            slo, shi = span[ax]
            room = min(center - slo, shi - center)
            scale = min(scale, room / 8.0)
        k = int(rng.integers(0, degree + 1))
        factors.append(Factor1D(_hermite_e_coeffs(k), center, scale))
        support.append((center - 8.0 * scale, center + 8.0 * scale))
    return ProductBump(factors), tuple(support)


def _hermite_e_coeffs(k):
    """Power-basis coefficients of the probabilists' Hermite polynomial."""
    from numpy.polynomial import hermite_e
    c = np.zeros(k + 1)
    c[k] = 1.0
    return hermite_e.herme2poly(c)


def position_family(potential: Potential, n_members=24, seed=7,
                    max_degree=2, box=None, span=None):
    """Position-only bump family (values below 1e-10 of peak at the
    declared support boundary)."""
    if box is None:
        box = potential.default_box()
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_members):
        bump, supp = _bump_axes(box, rng, max_degree, span)
        out.append(tensor_test_function(bump, None, support=supp,
                                        name=f"p{i}"))
    return out


def phase_family(params: ModelParams, potential: Potential, n_members=24,
                 seed=11, box=None, span=None):
    """Mixed family: position bumps times low-order velocity parts.

    Velocity parts are Gaussian-windowed Hermite factors for the kinetic
    model and low-degree ambient polynomials restricted to the sphere for
    the sphere-velocity model.
    """
    if box is None:
        box = potential.default_box()
    rng = np.random.default_rng(seed)
    out = []
    nv = params.velocity_dim
    for i in range(n_members):
        bump, supp = _bump_axes(box, rng, 2, span)
        if params.model == "langevin":
            sv = 1.0 / math.sqrt(params.beta)
            factors = []
            for _ in range(nv):
                k = int(rng.integers(0, 4))
                center = float(rng.choice([-0.5, 0.0, 0.5])) * sv
                factors.append(Factor1D(_hermite_e_coeffs(k), center,
                                        sv * (0.9 + 0.2 * rng.random())))
            vpart = ProductBump(factors)
        else:
            vpart = _random_sphere_poly(nv, rng)
        out.append(tensor_test_function(bump, vpart, support=supp,
                                        name=f"m{i}"))
    return out


def _random_sphere_poly(d, rng):
    kind = int(rng.integers(0, 3))
    if kind == 0:
        a = int(rng.integers(0, d))
        key = tuple(1 if i == a else 0 for i in range(d))
        return PolyPart({key: 1.0})
    if kind == 1:
        a, b = rng.choice(d, size=2, replace=False)
        key = tuple((1 if i in (a, b) else 0) for i in range(d))
        return PolyPart({key: 1.0})
    a = int(rng.integers(0, d))
    key2 = tuple(2 if i == a else 0 for i in range(d))
    zero = tuple(0 for _ in range(d))
    return PolyPart({key2: 1.0, zero: -1.0 / d})
