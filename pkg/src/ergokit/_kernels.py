"""Hot numeric kernels: counter-keyed noise and SDE step loops.

Two interchangeable backends:

* ``numba``  - scalar per-path loops compiled with ``@njit`` (default when
  numba imports cleanly);
* ``numpy``  - the same arithmetic vectorized over paths.

Selection: ``ERGOKIT_BACKEND`` environment variable (``auto`` | ``numba`` |
``numpy``), read at call time.  Every normal increment is a pure function
of (seed, path, step, draw), so trajectories are independent of scheduling,
chunking and thread count; see ``benchmarks/bench_backends.py`` for the
speed comparison.

Noise: a splitmix64-style keyed hash feeds a Box-Muller transform.  Draw
indices enumerate the normals a step consumes; a step redone as 2^k
substeps uses the disjoint index block starting at n_comp * (2^k - 1).
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        return wrap if not (args and callable(args[0])) else args[0]


def active_backend() -> str:
    mode = os.environ.get("ERGOKIT_BACKEND", "auto")
    if mode == "numpy":
        return "numpy"
    if mode in ("auto", "numba"):
        return "numba" if HAVE_NUMBA else "numpy"
    raise ValueError(f"unknown ERGOKIT_BACKEND={mode!r}")


# potential codes (mirrors core)
POT_QUADRATIC = 0
POT_LJ2_1D = 1
POT_FREE = 2

_U = np.uint64
_GOLD = _U(0x9E3779B97F4A7C15)
_M1 = _U(0xBF58476D1CE4E5B9)
_M2 = _U(0x94D049BB133111EB)
_CP = _U(0xD1342543DE82EF95)
_CS = _U(0xAF251AF3B0F025B5)
_CD = _U(0xB564EF22EC7AECE5)
_S30 = _U(30)
_S27 = _U(27)
_S31 = _U(31)
_S11 = _U(11)
_TWO53 = 1.0 / 9007199254740992.0  # 2**-53


@njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def _key(seed, pid, step, draw):
    h = _mix64(seed + _GOLD)
    h = _mix64(h ^ (pid * _CP + _GOLD))
    h = _mix64(h ^ (step * _CS + _GOLD))
    h = _mix64(h ^ (draw * _CD + _GOLD))
    return h


@njit(cache=True, inline="always")
def _normal(seed, pid, step, draw):
    two = _U(2)
    h1 = _key(seed, pid, step, two * draw)
    h2 = _key(seed, pid, step, two * draw + _U(1))
    u1 = (float(h1 >> _S11) + 1.0) * _TWO53
    u2 = float(h2 >> _S11) * _TWO53
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def keyed_normals(seed, pids, step, draws):
    """Vectorized twin of the scalar keyed normal (numpy backend).

    ``pids`` and ``draws`` broadcast against each other; returns float64.
    """
    seed = _U(seed)
    step = _U(step)
    pids = np.asarray(pids, dtype=np.uint64)
    draws = np.asarray(draws, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _np_mix(seed + _GOLD)
        h = _np_mix(h ^ (pids * _CP + _GOLD))
        h = _np_mix(h ^ (step * _CS + _GOLD))
        base = h
        d2 = draws * _U(2)
        h1 = _np_mix(base ^ (d2 * _CD + _GOLD))
        h2 = _np_mix(base ^ ((d2 + _U(1)) * _CD + _GOLD))
    u1 = ((h1 >> _S11).astype(np.float64) + 1.0) * _TWO53
    u2 = (h2 >> _S11).astype(np.float64) * _TWO53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def _np_mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


# ---------------------------------------------------------------------------
# potential and observable primitives (scalar, njit-able)
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _phi_val(code, par, x):
    if code == POT_QUADRATIC:
        s = par[x.shape[0]]
        for i in range(x.shape[0]):
            s += par[i] * x[i] * x[i]
        return s
    if code == POT_LJ2_1D:
        a, eps, sg, c0 = par[0], par[1], par[2], par[3]
        r = abs(x[0] - x[1])
        if r <= 0.0:
            return math.inf
        s6 = (sg / r) ** 6
        return a * (x[0] * x[0] + x[1] * x[1]) + 4.0 * eps * s6 * (s6 - 1.0) + c0
    return 0.0


@njit(cache=True, inline="always")
def _phi_grad(code, par, x, g):
    if code == POT_QUADRATIC:
        for i in range(x.shape[0]):
            g[i] = 2.0 * par[i] * x[i]
        return
    if code == POT_LJ2_1D:
        a, eps, sg = par[0], par[1], par[2]
        d = x[0] - x[1]
        r = abs(d)
        if r <= 0.0:
            g[0] = math.inf
            g[1] = -math.inf
            return
        s6 = (sg / r) ** 6
        dv = 4.0 * eps * s6 * (6.0 - 12.0 * s6) / r
        sn = 1.0 if d > 0.0 else -1.0
        g[0] = 2.0 * a * x[0] + dv * sn
        g[1] = 2.0 * a * x[1] - dv * sn
        return
    for i in range(x.shape[0]):
        g[i] = 0.0


@njit(cache=True, inline="always")
def _obs_val(block, idx, x, om):
    # block 0: position coordinate, 1: velocity coordinate
    if block == 0:
        return x[idx]
    return om[idx]


@njit(cache=True, inline="always")
def _grad_ok(g, cap):
    if cap <= 0.0:
        return True
    for i in range(g.shape[0]):
        if not (abs(g[i]) <= cap):
            return False
    return True


# ---------------------------------------------------------------------------
# kinetic (flat velocity) kernels
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def langevin_chunk(x, om, alive, dsum, dcomp, lsum, lcomp, nref,
                   step0, nsteps, dt, seed, path0,
                   pot_code, pot_par, alpha, beta,
                   obs_block, obs_idx, f_mean,
                   force_cap, max_refine, scheme):
    """Advance all paths by ``nsteps`` steps of size ``dt``.

    scheme 0: exact-velocity splitting (half kick, half drift, exact
    velocity refresh, half drift, half kick); scheme 1: Euler-Maruyama.
    Accumulates the trapezoid integrals of (f - f_mean) and of the
    generator image of f (for coordinate observables) with compensated
    summation.  Steps whose proposal leaves the admissible set or exceeds
    the force cap are redone as 2^k substeps; paths that exhaust the
    refinement budget are flagged dead.
    """
    npaths, nx = x.shape
    nom = om.shape[1]
    useed = _U(seed)
    xw = np.empty(nx)
    ow = np.empty(nom)
    g = np.empty(nx)

    for p in range(npaths):
        if not alive[p]:
            continue
        pid = _U(path0 + p)
        for s in range(nsteps):
            ustep = _U(step0 + s)
            committed = False
            for k in range(max_refine + 1):
                nsub = 1 << k
                h = dt / nsub
                base = nom * (nsub - 1)
                ch = math.exp(-alpha * h)
                sh = math.sqrt((1.0 - ch * ch) / beta)
                for i in range(nx):
                    xw[i] = x[p, i]
                for i in range(nom):
                    ow[i] = om[p, i]
                _phi_grad(pot_code, pot_par, xw, g)
                f_prev = _obs_val(obs_block, obs_idx, xw, ow) - f_mean
                if obs_block == 0:
                    l_prev = ow[obs_idx]
                else:
                    l_prev = -alpha * ow[obs_idx] - g[obs_idx] / beta
                acc_d = 0.0
                acc_l = 0.0
                ok = True
                for isub in range(nsub):
                    if scheme == 0:
                        for i in range(nom):
                            ow[i] -= 0.5 * h / beta * g[i]
                        for i in range(nx):
                            xw[i] += 0.5 * h * ow[i]
                        for i in range(nom):
                            z = _normal(useed, pid, ustep, _U(base + isub * nom + i))
                            ow[i] = ch * ow[i] + sh * z
                        for i in range(nx):
                            xw[i] += 0.5 * h * ow[i]
                        if not math.isfinite(_phi_val(pot_code, pot_par, xw)):
                            ok = False
                            break
                        _phi_grad(pot_code, pot_par, xw, g)
                        if not _grad_ok(g, force_cap):
                            ok = False
                            break
                        for i in range(nom):
                            ow[i] -= 0.5 * h / beta * g[i]
                    else:
                        sd = math.sqrt(2.0 * alpha / beta) * math.sqrt(h)
                        for i in range(nx):
                            xw[i] += h * ow[i]
                        for i in range(nom):
                            z = _normal(useed, pid, ustep, _U(base + isub * nom + i))
                            ow[i] += h * (-alpha * ow[i] - g[i] / beta) + sd * z
                        if not math.isfinite(_phi_val(pot_code, pot_par, xw)):
                            ok = False
                            break
                        _phi_grad(pot_code, pot_par, xw, g)
                        if not _grad_ok(g, force_cap):
                            ok = False
                            break
                    f_new = _obs_val(obs_block, obs_idx, xw, ow) - f_mean
                    if obs_block == 0:
                        l_new = ow[obs_idx]
                    else:
                        l_new = -alpha * ow[obs_idx] - g[obs_idx] / beta
                    acc_d += 0.5 * h * (f_prev + f_new)
                    acc_l += 0.5 * h * (l_prev + l_new)
                    f_prev = f_new
                    l_prev = l_new
                if ok:
                    for i in range(nx):
                        x[p, i] = xw[i]
                    for i in range(nom):
                        om[p, i] = ow[i]
                    y = acc_d - dcomp[p]
                    t = dsum[p] + y
                    dcomp[p] = (t - dsum[p]) - y
                    dsum[p] = t
                    y = acc_l - lcomp[p]
                    t = lsum[p] + y
                    lcomp[p] = (t - lsum[p]) - y
                    lsum[p] = t
                    if k > 0:
                        nref[p] += 1
                    committed = True
                    break
            if not committed:
                alive[p] = False
                break


@njit(cache=True, nogil=True)
def fiber_chunk(x, om, alive, dsum, dcomp, lsum, lcomp, nref,
                step0, nsteps, dt, seed, path0,
                pot_code, pot_par, sigma, dimd,
                obs_block, obs_idx, f_mean,
                force_cap, max_refine, scheme):
    """Sphere-velocity analogue of ``langevin_chunk``.

    scheme 0: tangent predictor-corrector (midpoint projections, matching
    the Stratonovich form) with exact renormalization; scheme 1: explicit
    curvature-drift Euler variant for cross-validation.  The velocity is
    renormalized after every substep, so |omega| = 1 holds to 1e-15.
    """
    npaths, nx = x.shape
    useed = _U(seed)
    d = dimd
    dm1 = float(d - 1)
    half_s2_dm1 = 0.5 * sigma * sigma * dm1
    xw = np.empty(nx)
    ow = np.empty(d)
    g = np.empty(nx)
    dw = np.empty(d)
    a0 = np.empty(d)
    a1 = np.empty(d)
    n0 = np.empty(d)
    n1 = np.empty(d)
    op = np.empty(d)
    xp = np.empty(nx)

    for p in range(npaths):
        if not alive[p]:
            continue
        pid = _U(path0 + p)
        for s in range(nsteps):
            ustep = _U(step0 + s)
            committed = False
            for k in range(max_refine + 1):
                nsub = 1 << k
                h = dt / nsub
                base = d * (nsub - 1)
                sq = math.sqrt(h)
                for i in range(nx):
                    xw[i] = x[p, i]
                for i in range(d):
                    ow[i] = om[p, i]
                _phi_grad(pot_code, pot_par, xw, g)
                f_prev = _obs_val(obs_block, obs_idx, xw, ow) - f_mean
                if obs_block == 0:
                    l_prev = ow[obs_idx]
                else:
                    dot = 0.0
                    for i in range(d):
                        dot += ow[i] * g[i]
                    l_prev = (-half_s2_dm1 * ow[obs_idx]
                              - (g[obs_idx] - dot * ow[obs_idx]) / dm1)
                acc_d = 0.0
                acc_l = 0.0
                ok = True
                for isub in range(nsub):
                    for i in range(d):
                        dw[i] = sq * _normal(useed, pid, ustep,
                                             _U(base + isub * d + i))
                    # tangential drift and noise at the entry state
                    gdot = 0.0
                    wdot = 0.0
                    for i in range(d):
                        gdot += ow[i] * g[i]
                        wdot += ow[i] * dw[i]
                    for i in range(d):
                        a0[i] = -(g[i] - gdot * ow[i]) / dm1
                        n0[i] = dw[i] - wdot * ow[i]
                    if scheme == 0:
                        for i in range(d):
                            op[i] = ow[i] + h * a0[i] + sigma * n0[i]
                        for i in range(nx):
                            xp[i] = xw[i] + h * ow[i]
                        _phi_grad(pot_code, pot_par, xp, g)
                        if not _grad_ok(g, force_cap):
                            ok = False
                            break
                        gdot = 0.0
                        wdot = 0.0
                        for i in range(d):
                            gdot += op[i] * g[i]
                            wdot += op[i] * dw[i]
                        for i in range(d):
                            a1[i] = -(g[i] - gdot * op[i]) / dm1
                            n1[i] = dw[i] - wdot * op[i]
                        nrm = 0.0
                        for i in range(d):
                            op[i] = (ow[i] + 0.5 * h * (a0[i] + a1[i])
                                     + 0.5 * sigma * (n0[i] + n1[i]))
                            nrm += op[i] * op[i]
                    else:
                        nrm = 0.0
                        for i in range(d):
                            op[i] = (ow[i] + h * (a0[i] - half_s2_dm1 * ow[i])
                                     + sigma * n0[i])
                            nrm += op[i] * op[i]
                    nrm = math.sqrt(nrm)
                    if not (nrm > 0.5):
                        ok = False
                        break
                    for i in range(nx):
                        xw[i] += 0.5 * h * ow[i]
                    for i in range(d):
                        ow[i] = op[i] / nrm
                    for i in range(nx):
                        xw[i] += 0.5 * h * ow[i]
                    if not math.isfinite(_phi_val(pot_code, pot_par, xw)):
                        ok = False
                        break
                    _phi_grad(pot_code, pot_par, xw, g)
                    if not _grad_ok(g, force_cap):
                        ok = False
                        break
                    f_new = _obs_val(obs_block, obs_idx, xw, ow) - f_mean
                    if obs_block == 0:
                        l_new = ow[obs_idx]
                    else:
                        dot = 0.0
                        for i in range(d):
                            dot += ow[i] * g[i]
                        l_new = (-half_s2_dm1 * ow[obs_idx]
                                 - (g[obs_idx] - dot * ow[obs_idx]) / dm1)
                    acc_d += 0.5 * h * (f_prev + f_new)
                    acc_l += 0.5 * h * (l_prev + l_new)
                    f_prev = f_new
                    l_prev = l_new
                if ok:
                    for i in range(nx):
                        x[p, i] = xw[i]
                    for i in range(d):
                        om[p, i] = ow[i]
                    y = acc_d - dcomp[p]
                    t = dsum[p] + y
                    dcomp[p] = (t - dsum[p]) - y
                    dsum[p] = t
                    y = acc_l - lcomp[p]
                    t = lsum[p] + y
                    lcomp[p] = (t - lsum[p]) - y
                    lsum[p] = t
                    if k > 0:
                        nref[p] += 1
                    committed = True
                    break
            if not committed:
                alive[p] = False
                break


# ---------------------------------------------------------------------------
# numpy fallback (vectorized over paths, per-path scalar redo on refinement)
# ---------------------------------------------------------------------------

def _np_phi_val(code, par, x):
    if code == POT_QUADRATIC:
        return np.sum(par[: x.shape[1]] * x * x, axis=1) + par[x.shape[1]]
    if code == POT_LJ2_1D:
        a, eps, sg, c0 = par[0], par[1], par[2], par[3]
        r = np.abs(x[:, 0] - x[:, 1])
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            s6 = (sg / r) ** 6
            v = 4.0 * eps * s6 * (s6 - 1.0)
        v = np.where(r > 0, v, np.inf)
        return a * (x[:, 0] ** 2 + x[:, 1] ** 2) + v + c0
    return np.zeros(x.shape[0])


def _np_phi_grad(code, par, x):
    if code == POT_QUADRATIC:
        return 2.0 * par[: x.shape[1]] * x
    if code == POT_LJ2_1D:
        a, eps, sg = par[0], par[1], par[2]
        dd = x[:, 0] - x[:, 1]
        r = np.abs(dd)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            s6 = (sg / r) ** 6
            dv = 4.0 * eps * s6 * (6.0 - 12.0 * s6) / r
        dv = np.where(r > 0, dv, np.inf)
        g = np.empty_like(x)
        sn = np.sign(dd)
        g[:, 0] = 2.0 * a * x[:, 0] + dv * sn
        g[:, 1] = 2.0 * a * x[:, 1] - dv * sn
        return g
    return np.zeros_like(x)


def _np_obs(block, idx, x, om):
    return x[:, idx] if block == 0 else om[:, idx]


def _np_lgen_langevin(block, idx, om, g, alpha, beta):
    if block == 0:
        return om[:, idx]
    return -alpha * om[:, idx] - g[:, idx] / beta


def _np_lgen_fiber(block, idx, om, g, sigma, d):
    if block == 0:
        return om[:, idx]
    dot = np.sum(om * g, axis=1)
    return (-0.5 * sigma * sigma * (d - 1) * om[:, idx]
            - (g[:, idx] - dot * om[:, idx]) / (d - 1))


def _kahan_add(s, c, contrib, idx=None):
    if idx is None:
        y = contrib - c
        t = s + y
        c[...] = (t - s) - y
        s[...] = t
    else:
        y = contrib - c[idx]
        t = s[idx] + y
        c[idx] = (t - s[idx]) - y
        s[idx] = t


def np_langevin_chunk(x, om, alive, dsum, dcomp, lsum, lcomp, nref,
                      step0, nsteps, dt, seed, path0,
                      pot_code, pot_par, alpha, beta,
                      obs_block, obs_idx, f_mean,
                      force_cap, max_refine, scheme):
    """Vectorized twin of :func:`langevin_chunk`."""
    npaths, nx = x.shape
    nom = om.shape[1]
    pids = np.uint64(path0) + np.arange(npaths, dtype=np.uint64)
    live = alive.astype(bool)
    draws = np.arange(nom, dtype=np.uint64)

    g = _np_phi_grad(pot_code, pot_par, x)
    for s in range(nsteps):
        step = step0 + s
        if not live.any():
            break
        xs = x[live]
        os_ = om[live]
        gs = g[live]
        li = np.nonzero(live)[0]
        f_prev = _np_obs(obs_block, obs_idx, xs, os_) - f_mean
        l_prev = _np_lgen_langevin(obs_block, obs_idx, os_, gs, alpha, beta)
        z = keyed_normals(seed, pids[li][:, None], step, draws[None, :])
        if scheme == 0:
            ch = math.exp(-alpha * dt)
            sh = math.sqrt((1.0 - ch * ch) / beta)
            o1 = os_ - 0.5 * dt / beta * gs
            x1 = xs + 0.5 * dt * o1
            o2 = ch * o1 + sh * z
            x2 = x1 + 0.5 * dt * o2
            val = _np_phi_val(pot_code, pot_par, x2)
            g2 = _np_phi_grad(pot_code, pot_par, x2)
            ok = np.isfinite(val)
            if force_cap > 0:
                ok &= np.all(np.abs(g2) <= force_cap, axis=1)
            o3 = o2 - 0.5 * dt / beta * np.where(ok[:, None], g2, 0.0)
            xn, on = x2, o3
        else:
            sd = math.sqrt(2.0 * alpha / beta * dt)
            xn = xs + dt * os_
            on = os_ + dt * (-alpha * os_ - gs / beta) + sd * z
            val = _np_phi_val(pot_code, pot_par, xn)
            g2 = _np_phi_grad(pot_code, pot_par, xn)
            ok = np.isfinite(val)
            if force_cap > 0:
                ok &= np.all(np.abs(g2) <= force_cap, axis=1)

        good = li[ok]
        x[good] = xn[ok]
        om[good] = on[ok]
        g[good] = g2[ok]
        f_new = _np_obs(obs_block, obs_idx, xn[ok], on[ok]) - f_mean
        l_new = _np_lgen_langevin(obs_block, obs_idx, on[ok], g2[ok], alpha, beta)
        _kahan_add(dsum, dcomp, 0.5 * dt * (f_prev[ok] + f_new), good)
        _kahan_add(lsum, lcomp, 0.5 * dt * (l_prev[ok] + l_new), good)

        # refinement fallback, one path at a time (rare)
        for j in li[~ok]:
            _scalar_redo_langevin(x, om, alive, dsum, dcomp, lsum, lcomp, nref,
                                  j, step, dt, seed, path0, pot_code, pot_par,
                                  alpha, beta, obs_block, obs_idx, f_mean,
                                  force_cap, max_refine, scheme)
            if alive[j]:
                g[j] = _np_phi_grad(pot_code, pot_par, x[j:j + 1])[0]
            live[j] = alive[j]


def _scalar_redo_langevin(x, om, alive, dsum, dcomp, lsum, lcomp, nref,
                          p, step, dt, seed, path0, pot_code, pot_par,
                          alpha, beta, obs_block, obs_idx, f_mean,
                          force_cap, max_refine, scheme):
    """Redo one step of one path with 2^k substeps (numpy backend)."""
    nom = om.shape[1]
    pid = np.uint64(int(path0) + int(p))
    for k in range(1, max_refine + 1):
        nsub = 1 << k
        h = dt / nsub
        base = nom * (nsub - 1)
        xw = x[p].copy()
        ow = om[p].copy()
        g = _np_phi_grad(pot_code, pot_par, xw[None, :])[0]
        f_prev = (xw[obs_idx] if obs_block == 0 else ow[obs_idx]) - f_mean
        l_prev = (ow[obs_idx] if obs_block == 0
                  else -alpha * ow[obs_idx] - g[obs_idx] / beta)
        acc_d = acc_l = 0.0
        ok = True
        ch = math.exp(-alpha * h)
        sh = math.sqrt((1.0 - ch * ch) / beta)
        for isub in range(nsub):
            z = keyed_normals(seed, pid, step,
                              np.uint64(base + isub * nom)
                              + np.arange(nom, dtype=np.uint64))
            if scheme == 0:
                ow = ow - 0.5 * h / beta * g
                xw = xw + 0.5 * h * ow
                ow = ch * ow + sh * z
                xw = xw + 0.5 * h * ow
                val = _np_phi_val(pot_code, pot_par, xw[None, :])[0]
                g = _np_phi_grad(pot_code, pot_par, xw[None, :])[0]
                if not np.isfinite(val) or (force_cap > 0 and np.any(np.abs(g) > force_cap)):
                    ok = False
                    break
                ow = ow - 0.5 * h / beta * g
            else:
                sd = math.sqrt(2.0 * alpha / beta * h)
                xw = xw + h * ow
                ow = ow + h * (-alpha * ow - g / beta) + sd * z
                val = _np_phi_val(pot_code, pot_par, xw[None, :])[0]
                g = _np_phi_grad(pot_code, pot_par, xw[None, :])[0]
                if not np.isfinite(val) or (force_cap > 0 and np.any(np.abs(g) > force_cap)):
                    ok = False
                    break
            f_new = (xw[obs_idx] if obs_block == 0 else ow[obs_idx]) - f_mean
            l_new = (ow[obs_idx] if obs_block == 0
                     else -alpha * ow[obs_idx] - g[obs_idx] / beta)
            acc_d += 0.5 * h * (f_prev + f_new)
            acc_l += 0.5 * h * (l_prev + l_new)
            f_prev, l_prev = f_new, l_new
        if ok:
            x[p] = xw
            om[p] = ow
            _kahan_add(dsum, dcomp, acc_d, p)
            _kahan_add(lsum, lcomp, acc_l, p)
            nref[p] += 1
            return
    alive[p] = False


def np_fiber_chunk(x, om, alive, dsum, dcomp, lsum, lcomp, nref,
                   step0, nsteps, dt, seed, path0,
                   pot_code, pot_par, sigma, dimd,
                   obs_block, obs_idx, f_mean,
                   force_cap, max_refine, scheme):
    """Vectorized twin of :func:`fiber_chunk` (no refinement fast path;
    paths needing substeps are redone scalar-style)."""
    npaths = x.shape[0]
    d = dimd
    dm1 = float(d - 1)
    half = 0.5 * sigma * sigma * dm1
    pids = np.uint64(path0) + np.arange(npaths, dtype=np.uint64)
    live = alive.astype(bool)
    draws = np.arange(d, dtype=np.uint64)
    sq = math.sqrt(dt)

    g = _np_phi_grad(pot_code, pot_par, x)
    for s in range(nsteps):
        step = step0 + s
        if not live.any():
            break
        li = np.nonzero(live)[0]
        xs, os_, gs = x[li], om[li], g[li]
        f_prev = _np_obs(obs_block, obs_idx, xs, os_) - f_mean
        l_prev = _np_lgen_fiber(obs_block, obs_idx, os_, gs, sigma, d)
        dw = sq * keyed_normals(seed, pids[li][:, None], step, draws[None, :])
        gdot = np.sum(os_ * gs, axis=1, keepdims=True)
        wdot = np.sum(os_ * dw, axis=1, keepdims=True)
        a0 = -(gs - gdot * os_) / dm1
        n0 = dw - wdot * os_
        ok = np.ones(li.shape[0], dtype=bool)
        if scheme == 0:
            opred = os_ + dt * a0 + sigma * n0
            xpred = xs + dt * os_
            g1 = _np_phi_grad(pot_code, pot_par, xpred)
            if force_cap > 0:
                ok &= np.all(np.abs(g1) <= force_cap, axis=1)
            gdot1 = np.sum(opred * g1, axis=1, keepdims=True)
            wdot1 = np.sum(opred * dw, axis=1, keepdims=True)
            a1 = -(g1 - gdot1 * opred) / dm1
            n1 = dw - wdot1 * opred
            onew = os_ + 0.5 * dt * (a0 + a1) + 0.5 * sigma * (n0 + n1)
        else:
            onew = os_ + dt * (a0 - half * os_) + sigma * n0
        nrm = np.linalg.norm(onew, axis=1)
        ok &= nrm > 0.5
        onew = onew / np.where(nrm > 0, nrm, 1.0)[:, None]
        xnew = xs + 0.5 * dt * os_
        xnew = xnew + 0.5 * dt * onew
        val = _np_phi_val(pot_code, pot_par, xnew)
        g2 = _np_phi_grad(pot_code, pot_par, xnew)
        ok &= np.isfinite(val)
        if force_cap > 0:
            ok &= np.all(np.abs(g2) <= force_cap, axis=1)

        good = li[ok]
        x[good] = xnew[ok]
        om[good] = onew[ok]
        g[good] = g2[ok]
        f_new = _np_obs(obs_block, obs_idx, xnew[ok], onew[ok]) - f_mean
        l_new = _np_lgen_fiber(obs_block, obs_idx, onew[ok], g2[ok], sigma, d)
        _kahan_add(dsum, dcomp, 0.5 * dt * (f_prev[ok] + f_new), good)
        _kahan_add(lsum, lcomp, 0.5 * dt * (l_prev[ok] + l_new), good)
        for j in li[~ok]:
            _scalar_redo_fiber(x, om, alive, dsum, dcomp, lsum, lcomp, nref,
                               j, step, dt, seed, path0, pot_code, pot_par,
                               sigma, d, obs_block, obs_idx, f_mean,
                               force_cap, max_refine, scheme)
            if alive[j]:
                g[j] = _np_phi_grad(pot_code, pot_par, x[j:j + 1])[0]
            live[j] = alive[j]


def _scalar_redo_fiber(x, om, alive, dsum, dcomp, lsum, lcomp, nref,
                       p, step, dt, seed, path0, pot_code, pot_par,
                       sigma, d, obs_block, obs_idx, f_mean,
                       force_cap, max_refine, scheme):
    """Redo one sphere-velocity step of one path with 2^k substeps."""
    dm1 = float(d - 1)
    half = 0.5 * sigma * sigma * dm1
    pid = np.uint64(int(path0) + int(p))

    def _lgen(ow, g):
        if obs_block == 0:
            return ow[obs_idx]
        dot = float(np.dot(ow, g))
        return -half * ow[obs_idx] - (g[obs_idx] - dot * ow[obs_idx]) / dm1

    for k in range(1, max_refine + 1):
        nsub = 1 << k
        h = dt / nsub
        base = d * (nsub - 1)
        sq = math.sqrt(h)
        xw = x[p].copy()
        ow = om[p].copy()
        g = _np_phi_grad(pot_code, pot_par, xw[None, :])[0]
        f_prev = (xw[obs_idx] if obs_block == 0 else ow[obs_idx]) - f_mean
        l_prev = _lgen(ow, g)
        acc_d = acc_l = 0.0
        ok = True
        for isub in range(nsub):
            dw = sq * keyed_normals(seed, pid, step,
                                    np.uint64(base + isub * d)
                                    + np.arange(d, dtype=np.uint64))
            gdot = float(np.dot(ow, g))
            wdot = float(np.dot(ow, dw))
            a0 = -(g - gdot * ow) / dm1
            n0 = dw - wdot * ow
            if scheme == 0:
                opred = ow + h * a0 + sigma * n0
                xpred = xw + h * ow
                g1 = _np_phi_grad(pot_code, pot_par, xpred[None, :])[0]
                if force_cap > 0 and np.any(np.abs(g1) > force_cap):
                    ok = False
                    break
                gdot1 = float(np.dot(opred, g1))
                wdot1 = float(np.dot(opred, dw))
                a1 = -(g1 - gdot1 * opred) / dm1
                n1 = dw - wdot1 * opred
                onew = ow + 0.5 * h * (a0 + a1) + 0.5 * sigma * (n0 + n1)
            else:
                onew = ow + h * (a0 - half * ow) + sigma * n0
            nrm = float(np.linalg.norm(onew))
            if not nrm > 0.5:
                ok = False
                break
            xw = xw + 0.5 * h * ow
            ow = onew / nrm
            xw = xw + 0.5 * h * ow
            val = _np_phi_val(pot_code, pot_par, xw[None, :])[0]
            g = _np_phi_grad(pot_code, pot_par, xw[None, :])[0]
            if not np.isfinite(val) or (force_cap > 0 and np.any(np.abs(g) > force_cap)):
                ok = False
                break
            f_new = (xw[obs_idx] if obs_block == 0 else ow[obs_idx]) - f_mean
            l_new = _lgen(ow, g)
            acc_d += 0.5 * h * (f_prev + f_new)
            acc_l += 0.5 * h * (l_prev + l_new)
            f_prev, l_prev = f_new, l_new
        if ok:
            x[p] = xw
            om[p] = ow
            _kahan_add(dsum, dcomp, acc_d, p)
            _kahan_add(lsum, lcomp, acc_l, p)
            nref[p] += 1
            return
    alive[p] = False
