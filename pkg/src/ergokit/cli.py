"""Batch entry point.

``ergokit <gap|constants|verify|identities> --config FILE [--seed N]
[--out DIR] [--paths P] [--dt X] [--threads K]``

Orchestrates the gap -> constants -> ensemble -> verification pipeline
from a TOML config.  CSV outputs carry a single timestamp header line;
everything below it is byte-deterministic for a fixed seed and thread
count.  Exit codes: 0 pass, 1 verification failure, 2 config error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime
import itertools
import json
import math
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .core import (GibbsMeasure, ModelParams, Observable, Potential,
                   ValidationError, micro_gap)
from .ergodicity import (EnsembleConfig, EnsembleError, SamplerSpec,
                         invariance_check, microscopic_bound_check, qv_check,
                         run_ensemble)
from .integrators import IntegratorConfig
from .operators import (OperatorError, PolyPart, TestFunction,
                        apply_dissipative, build_quadrature, check_identity,
                        inner_product, phase_family, position_family,
                        tensor_test_function)
from .rates import bound_coefficients, fiber_rates, langevin_rates
from .spectral import (EigenSolveError, GridSpec, analytic_kato_constants,
                       estimate_kato_constants, spectral_gap)

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(ValueError):
    pass


def _need(cfg: dict, block: str) -> dict:
    if block not in cfg:
        raise ConfigError(f"missing config block [{block}]")
    return cfg[block]


def _build_potential(cfg: dict) -> Potential:
    blk = _need(cfg, "potential")
    kind = blk.get("kind")
    if kind == "quadratic":
        return Potential.quadratic(blk["coeffs"])
    if kind == "pair-lj-harmonic":
        return Potential.lj_pair_harmonic(
            a=blk["a"], epsilon=blk["epsilon"], sigma=blk["sigma"])
    if kind == "free":
        return Potential.free(int(blk["dim"]))
    raise ConfigError(f"unknown potential kind {kind!r}")


def _build_params(cfg: dict) -> ModelParams:
    blk = _need(cfg, "model")
    return ModelParams(
        model=blk.get("kind", "langevin"),
        d=int(blk.get("d", 1)),
        n_particles=int(blk.get("particles", 1)),
        alpha=float(blk.get("alpha", 1.0)),
        beta=float(blk.get("beta", 1.0)),
        sigma=float(blk.get("sigma", 1.0)),
    )


def _build_grid(cfg: dict, phi: Potential) -> GridSpec:
    blk = _need(cfg, "grid")
    n = blk.get("nodes", 257)
    nodes = tuple(n) if isinstance(n, list) else (int(n),) * phi.dim
    ext = blk.get("extent")
    if ext is None:
        extents = tuple(phi.default_box())
    elif isinstance(ext, list) and ext and isinstance(ext[0], list):
        extents = tuple((float(a), float(b)) for a, b in ext)
    else:
        extents = ((-float(ext), float(ext)),) * phi.dim
    return GridSpec(extents=extents, nodes=nodes,
                    boundary=blk.get("boundary", "zero-flux"),
                    mask_cutoff=float(blk.get("mask_cutoff", 700.0)))


def _observable(name: str, measure: GibbsMeasure) -> Observable:
    if name.startswith("x"):
        return Observable.coordinate("x", int(name[1:] or 0), measure)
    if name.startswith("omega"):
        return Observable.coordinate("omega", int(name[5:] or 0), measure)
    raise ConfigError(f"unknown observable {name!r} (use x<i> or omega<i>)")


def _ensemble_config(cfg: dict, measure: GibbsMeasure, args) -> EnsembleConfig:
    blk = _need(cfg, "ensemble")
    obs = _observable(blk.get("observable", "x0"), measure)
    cap = blk.get("force_cap", 0.0)
    icfg = IntegratorConfig(
        scheme=blk.get("scheme",
                       "baoab" if measure.params.model == "langevin"
                       else "tangent-heun"),
        dt=float(args.dt or blk.get("dt", 1e-3)),
        seed=int(args.seed if args.seed is not None else blk.get("seed", 0)),
        max_refinements=int(blk.get("max_refinements", 20)),
        force_cap=None if not cap else float(cap),
    )
    sampler = SamplerSpec(
        kind=blk.get("sampler", "auto"),
        burn_in=int(blk.get("burn_in", 2000)),
        proposal_scale=float(blk.get("proposal_scale", 1.0)),
        thinning=int(blk.get("thinning", 10)),
    )
    return EnsembleConfig(
        paths=int(args.paths or blk.get("paths", 1000)),
        horizon=float(blk.get("horizon", 10.0)),
        checkpoints=tuple(float(t) for t in blk["checkpoints"]),
        observable=obs,
        integrator=icfg,
        sampler=sampler,
        invalid_budget=float(blk.get("invalid_budget", 1e-3)),
        velocity_scale=float(blk.get("velocity_scale", 1.0)),
        threads=int(args.threads or blk.get("threads", 1)),
    )


def _resolve_constants(cfg: dict, params: ModelParams, phi: Potential,
                       gap_override=None):
    """Gap and relative-boundedness constants per config, with provenance."""
    blk = cfg.get("constants", {})
    gap = gap_override if gap_override is not None else blk.get("gap")
    gap_src = "supplied"
    if gap is None:
        grid = _build_grid(cfg, phi)
        res = spectral_gap(phi, grid)
        gap = res.extrapolated
        gap_src = "computed"
    kato_cfg = blk.get("kato", "analytic" if phi.kind == "quadratic" else "estimate")
    if isinstance(kato_cfg, list):
        kato = tuple(float(v) for v in kato_cfg)
        status = "supplied"
    elif kato_cfg == "analytic":
        est = analytic_kato_constants(phi, params.model, d=params.d)
        kato = (est.langevin_tuple() if params.model == "langevin"
                else est.fiber_tuple())
        status = est.status
    else:
        est = estimate_kato_constants(phi, params.model, d=params.d)
        kato = (est.langevin_tuple() if params.model == "langevin"
                else est.fiber_tuple())
        status = est.status
    provenance = "analytic" if (gap_src != "computed" and status == "analytic") \
        else "estimated"
    if params.model == "langevin":
        rep = langevin_rates(params.alpha, params.beta, float(gap), kato,
                             provenance=provenance)
    else:
        rep = fiber_rates(params.sigma, params.d, float(gap), kato,
                          provenance=provenance)
    return rep, {"gap": float(gap), "gap_source": gap_src,
                 "kato": list(kato), "kato_status": status}


def _write_json(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return format(v, ".17g")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gap(cfg: dict, args) -> int:
    phi = _build_potential(cfg)
    grid = _build_grid(cfg, phi)
    res = spectral_gap(phi, grid,
                       refinements=int(cfg.get("grid", {}).get("refinements", 3)))
    out = Path(args.out or cfg.get("output", {}).get("dir", "out"))
    _write_json(out / "gap.json", res.as_dict())
    with open(out / "gap_refinements.csv", "w") as fh:
        fh.write("# ergokit gap refinements, generated "
                 + datetime.datetime.now().isoformat() + "\n")
        fh.write("nodes,gap\n")
        for n, gval in res.history:
            fh.write(f"{n},{_fmt(gval)}\n")
    print(f"gap = {res.gap:.10g} (extrapolated {res.extrapolated:.10g})")
    return EXIT_OK


def cmd_constants(cfg: dict, args) -> int:
    phi = _build_potential(cfg)
    params = _build_params(cfg)
    rep, meta = _resolve_constants(cfg, params, phi)
    payload = rep.as_dict()
    payload.update(meta)
    out = Path(args.out or cfg.get("output", {}).get("dir", "out"))
    _write_json(out / "constants.json", payload)
    print(f"k_t = {rep.rate.k_t:.10g}, k_sqrt = {rep.rate.k_sqrt:.10g} "
          f"({rep.rate.provenance})")
    return EXIT_OK


def _dissipation_form(obs: Observable, params: ModelParams, phi: Potential):
    """(Sf, f) for a coordinate observable, by quadrature."""
    if obs.code is None or obs.code[0] == "x":
        return 0.0
    q = build_quadrature(params, phi)
    nv = params.velocity_dim
    f = tensor_test_function(None, PolyPart.coordinate(nv, obs.code[1]),
                             name=obs.name)
    sf = apply_dissipative(f, params, phi)
    return inner_product(sf, f, q)


def cmd_verify(cfg: dict, args) -> int:
    phi = _build_potential(cfg)
    params = _build_params(cfg)
    measure = GibbsMeasure(potential=phi, params=params)
    ecfg = _ensemble_config(cfg, measure, args)
    vblk = cfg.get("verify", {})
    k2_scale = float(vblk.get("kappa2_scale", 1.0))
    use_bound = bool(vblk.get("use_bound", True))

    rep = meta = None
    if use_bound:
        rep, meta = _resolve_constants(cfg, params, phi)
    run = run_ensemble(ecfg, params, phi)
    c1 = c2 = math.nan
    if use_bound:
        c1, c2 = bound_coefficients(rep.rate, run.obs_centered_l2)
        c2 *= k2_scale

    obs = ecfg.observable
    sff = _dissipation_form(obs, params, phi)
    do_qv = bool(vblk.get("use_qv", True)) and sff < 0.0
    is_fluctuation = obs.code is not None and obs.code[0] == "omega"
    do_micro = bool(vblk.get("use_micro", True)) and is_fluctuation

    qv_rows = qv_check(run, sff) if do_qv else None
    micro_rows = None
    if do_micro:
        f_l2sq = run.obs_centered_l2 ** 2 + run.obs_mean ** 2
        micro_rows = microscopic_bound_check(run, micro_gap(params), f_l2sq)
    inv_rows = invariance_check(run, measure)

    m = len(run.t)
    bound_pass = []
    rows = []
    for k in range(1, m):
        t = run.t[k]
        bound = c1 / t + c2 / math.sqrt(t) if use_bound else math.nan
        if use_bound:
            bound_pass.append(bool(run.rms_error[k] <= bound + 3.0 * run.rms_se[k]))
        rows.append({
            "t": t, "rms_error": run.rms_error[k], "rms_error_se": run.rms_se[k],
            "bound": bound,
            "microscopic_bound": (micro_rows[k - 1]["bound"] if micro_rows else None),
            "qv_simulated": (qv_rows[k - 1]["simulated"] if qv_rows else None),
            "qv_target": (qv_rows[k - 1]["target"] if qv_rows else None),
            "invalid_paths": run.invalid_paths,
        })

    verdict = {
        "bound": all(bound_pass) if use_bound else None,
        "qv": all(r["pass"] for r in qv_rows) if qv_rows else None,
        "microscopic": all(r["pass"] for r in micro_rows) if micro_rows else None,
        "invariance": all(r["pass"] for r in inv_rows),
        "invalid_budget": run.invalid_paths <= ecfg.invalid_budget * ecfg.paths,
    }
    passed = all(v for v in verdict.values() if v is not None)

    out = Path(args.out or cfg.get("output", {}).get("dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "verify.csv", "w") as fh:
        fh.write("# ergokit verify, generated "
                 + datetime.datetime.now().isoformat() + "\n")
        fh.write("t,rms_error,rms_error_se,bound,microscopic_bound,"
                 "qv_simulated,qv_target,invalid_paths\n")
        for r in rows:
            fh.write(",".join([
                _fmt(r["t"]), _fmt(r["rms_error"]), _fmt(r["rms_error_se"]),
                _fmt(r["bound"]), _fmt(r["microscopic_bound"]),
                _fmt(r["qv_simulated"]), _fmt(r["qv_target"]),
                str(r["invalid_paths"]),
            ]) + "\n")
    constants_payload = {"C1": c1, "C2": c2, "kappa2_scale": k2_scale}
    if use_bound:
        constants_payload.update({"k_t": rep.rate.k_t,
                                  "k_sqrt": rep.rate.k_sqrt, **meta})
    _write_json(out / "verify.json", {
        "verdict": "pass" if passed else "fail",
        "criteria": verdict,
        "constants": constants_payload,
        "observable": obs.name,
        "observable_mean": run.obs_mean,
        "observable_centered_l2": run.obs_centered_l2,
        "mean_source": run.mean_source,
        "invalid_paths": run.invalid_paths,
        "refined_steps": run.refined_steps,
        "paths": ecfg.paths,
        "seed": ecfg.integrator.seed,
        "invariance": inv_rows,
        "qv": qv_rows,
        "microscopic": micro_rows,
    })
    nb = f"{sum(bound_pass)}/{len(bound_pass)}" if use_bound else "n/a"
    print(f"verdict: {'pass' if passed else 'fail'} "
          f"({nb} bound checkpoints, {run.invalid_paths} invalid paths)")
    return EXIT_OK if passed else EXIT_VERIFY_FAIL


def cmd_identities(cfg: dict, args) -> int:
    phi = _build_potential(cfg)
    params = _build_params(cfg)
    blk = cfg.get("identities", {})
    n_members = int(blk.get("members", 10))
    q = build_quadrature(
        params, phi,
        x_nodes_per_axis=blk.get("x_nodes"),
        sphere_exactness=blk.get("sphere_exactness"),
    )
    mixed = phase_family(params, phi, n_members=n_members, span=q.box)
    pos = position_family(phi, n_members=max(n_members // 2, 3), span=q.box)
    reports = []
    for f, g in itertools.combinations(mixed[:max(4, n_members // 2)], 2):
        reports.append(check_identity("antisymmetry", f, params, phi, q, g=g))
        reports.append(check_identity("symmetry", f, params, phi, q, g=g))
    for f in mixed:
        for tag in ("nonpositivity", "invariance", "micro-gap"):
            reports.append(check_identity(tag, f, params, phi, q))
    for f in pos:
        for tag in ("transport-dissipation", "macro-reduction"):
            reports.append(check_identity(tag, f, params, phi, q))
        if params.model == "fiber":
            reports.append(check_identity("transport-norm-split", f, params, phi, q))
    if params.model == "fiber":
        for i in range(params.d):
            wk = tensor_test_function(None, PolyPart.coordinate(params.d, i),
                                      name=f"omega{i}")
            reports.append(check_identity("sphere-eigenvalue", wk, params, phi, q))

    out = Path(args.out or cfg.get("output", {}).get("dir", "out"))
    _write_json(out / "identities.json",
                {"model": params.model,
                 "reports": [r.as_dict() for r in reports],
                 "pass": all(r.passed for r in reports)})
    worst = max(r.residual for r in reports)
    ok = all(r.passed for r in reports)
    print(f"{len(reports)} identity checks, worst residual {worst:.3e}: "
          f"{'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY_FAIL


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="ergokit")
    ap.add_argument("command", choices=["gap", "constants", "verify", "identities"])
    ap.add_argument("--config", required=True)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default=None)
    ap.add_argument("--paths", type=int, default=None)
    ap.add_argument("--dt", type=float, default=None)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args(argv)

    try:
        with open(args.config, "rb") as fh:
            cfg = tomllib.load(fh)
    except FileNotFoundError:
        print(f"config file not found: {args.config}", file=sys.stderr)
        return EXIT_CONFIG
    except tomllib.TOMLDecodeError as exc:
        print(f"config parse error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    handlers = {"gap": cmd_gap, "constants": cmd_constants,
                "verify": cmd_verify, "identities": cmd_identities}
    try:
        return handlers[args.command](cfg, args)
    except (ConfigError, ValidationError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EigenSolveError, EnsembleError, OperatorError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
