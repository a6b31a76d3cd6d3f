"""Command-line entry point: scenario files, run persistence, plot data.

Scenario files are YAML with a versioned schema; coefficients accept numbers
or numpy expressions in x (, y) (, t).  Every run writes into its own
directory under --out, named by a canonical content digest of the scenario,
so semantically identical files land on the same name regardless of key
order and reruns never mutate existing artifacts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import diagnostics, lab
from .assembly import (PhysicalParams, assemble_core, build_generator_u,
                       build_generator_z, export_triplets)
from .errors import (ConfigurationError, DiagnosticError, ExperimentFailed,
                     ExperimentPreconditionError, FieldSynthesisFailed,
                     FitError, IntegratorError, ParameterError)
from .evolution import (Scenario, check_compatibility, integrate,
                        make_initial_data)
from .geometry import (build_interval_mesh, build_rect_mesh, check_star_shaped,
                       partition_boundary, synthesize_multiplier_field,
                       verify_field)
from .spectral import spectrum

SCHEMA_VERSIONS = (1,)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
EXIT_EXPERIMENT = 4

_SAFE_FUNCS = {
    "pi": np.pi, "e": np.e, "sin": np.sin, "cos": np.cos, "tan": np.tan,
    "exp": np.exp, "log": np.log, "sqrt": np.sqrt, "abs": np.abs,
    "tanh": np.tanh, "cosh": np.cosh, "sinh": np.sinh, "where": np.where,
    "minimum": np.minimum, "maximum": np.maximum, "sign": np.sign,
}


class ScenarioError(ConfigurationError):
    """Scenario file failed to parse or validate."""


def _expr(expr, names):
    code = compile(str(expr), "<scenario>", "eval")
    for n in code.co_names:
        if n not in _SAFE_FUNCS and n not in names:
            raise ScenarioError(
                f"expression {expr!r} uses unknown name {n!r} "
                f"(allowed: {sorted(names)} and numpy functions)")
    return code


def coefficient_function(spec, dim):
    """Number or expression string -> callable over coordinates."""
    if isinstance(spec, (int, float)):
        return float(spec)
    names = ("x",) if dim == 1 else ("x", "y")
    code = _expr(spec, names)

    if dim == 1:
        def f(x):
            return eval(code, {"__builtins__": {}},
                        {**_SAFE_FUNCS, "x": x})
    else:
        def f(x, y):
            return eval(code, {"__builtins__": {}},
                        {**_SAFE_FUNCS, "x": x, "y": y})
    return f


def forcing_function(spec, dim):
    """Expression in x(,y),t -> callable f(points, t) over mesh nodes."""
    if spec in (None, "none", "null", 0, 0.0):
        return None
    names = ("x", "t") if dim == 1 else ("x", "y", "t")
    code = _expr(spec, names)

    def f(points, t):
        loc = {**_SAFE_FUNCS, "x": points[:, 0], "t": t}
        if dim == 2:
            loc["y"] = points[:, 1]
        return eval(code, {"__builtins__": {}}, loc)
    return f


def canonical_hash(doc):
    """Content digest invariant under key order."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _require(doc, key, where):
    if key not in doc:
        raise ScenarioError(f"missing required key {key!r} in {where}")
    return doc[key]


def load_scenario(path, seed_override=None):
    """Parse and validate a scenario file; returns (Scenario, dict, hash)."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}")
    except yaml.YAMLError as exc:
        raise ScenarioError(f"scenario file {path} is not valid YAML: {exc}")
    if not isinstance(doc, dict):
        raise ScenarioError(f"scenario file {path} must hold a mapping")
    ver = _require(doc, "schema_version", str(path))
    if ver not in SCHEMA_VERSIONS:
        raise ScenarioError(
            f"schema_version {ver} is not supported (known: {SCHEMA_VERSIONS})")

    geo = _require(doc, "geometry", str(path))
    kind = _require(geo, "kind", "geometry")
    if kind == "interval":
        mesh = build_interval_mesh(float(_require(geo, "length", "geometry")),
                                   int(_require(geo, "n_cells", "geometry")))
    elif kind == "rectangle":
        mesh = build_rect_mesh(float(_require(geo, "lx", "geometry")),
                               float(_require(geo, "ly", "geometry")),
                               int(_require(geo, "nx", "geometry")),
                               int(_require(geo, "ny", "geometry")))
    else:
        raise ScenarioError(f"geometry.kind must be interval|rectangle, got {kind!r}")
    gamma0 = str(geo.get("gamma0", ""))
    all_diss = bool(geo.get("all_dissipative", False))
    if all_diss and gamma0 in ("", "none"):
        gamma0 = ""
    partition = partition_boundary(mesh, gamma0, allow_empty_gamma0=all_diss)

    prm = doc.get("params", {})
    dim = mesh.dim
    alpha = prm.get("alpha", "critical")
    if isinstance(alpha, str) and not alpha.startswith("critical"):
        alpha = coefficient_function(alpha, dim)
    try:
        params = PhysicalParams.build(
            mesh, partition,
            tau=float(prm.get("tau", 1.0)), c=float(prm.get("c", 1.0)),
            delta=float(prm.get("delta", 1.0)), k=float(prm.get("k", 0.5)),
            lam=float(prm.get("lambda", 1.0)), alpha=alpha,
            kappa0=coefficient_function(prm.get("kappa0", 1.0), dim),
            kappa1=coefficient_function(prm.get("kappa1", 1.0), dim),
            forcing=forcing_function(prm.get("forcing"), dim),
            allow_undamped=bool(prm.get("allow_undamped", False)))
    except ParameterError as exc:
        raise ScenarioError(f"params: {exc}")

    ops = assemble_core(mesh, partition, params)
    ini = doc.get("initial", {"shape": "lowmode"})
    seed = int(ini.get("seed", 0)) if seed_override is None else int(seed_override)
    initial = make_initial_data(
        ops, params, shape=ini.get("shape", "lowmode"),
        mode=int(ini.get("mode", 1)), seed=seed,
        compatible=bool(ini.get("compatible", True)),
        h_size=ini.get("h_size"), h1_size=ini.get("h1_size"))

    tm = doc.get("time", {})
    out = doc.get("outputs", {})
    exp = doc.get("experiment", {}) or {}
    scenario = Scenario(
        mesh, partition, params, initial,
        T=float(tm.get("T", 1.0)), dt=float(tm.get("dt", 1e-3)),
        scheme=str(tm.get("scheme", "trapezoidal")),
        theta=tm.get("theta"),
        stride=int(out.get("stride", 1)),
        store_states=bool(out.get("store_states", False)),
        nonlinear=bool(doc.get("nonlinear", False)),
        label=str(doc.get("label", path.stem)),
        ops=ops,
        experiment=exp.get("name"),
        experiment_options=exp.get("options", {}) or {})
    scenario.x0 = geo.get("x0")
    return scenario, doc, canonical_hash(doc)


def _run_dir(out_root, label, digest):
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    base = out_root / f"{label}-{digest[:8]}"
    d = base
    k = 1
    while d.exists():
        k += 1
        d = Path(f"{base}-{k}")
    d.mkdir()
    return d


def _write_summary(run_dir, payload):
    payload = dict(payload)
    payload["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    text = json.dumps(payload, sort_keys=True, indent=2, default=str)
    (run_dir / "summary.json").write_text(text + "\n")


def _store_states(traj, path):
    n = len(traj.states)
    u = np.stack([s.u for s in traj.states])
    ut = np.stack([s.ut for s in traj.states])
    utt = np.stack([s.utt for s in traj.states])
    layout = {"arrays": ["times", "u", "ut", "utt"],
              "shapes": {"times": [n], "u": list(u.shape)},
              "order": "sample-major nodal coefficients"}
    np.savez_compressed(path, times=traj.times, u=u, ut=ut, utt=utt,
                        layout=json.dumps(layout))


def cmd_simulate(args):
    scenario, doc, digest = load_scenario(args.scenario, args.seed)
    run_dir = _run_dir(args.out, scenario.label, digest)
    shutil.copy(args.scenario, run_dir / "scenario.yaml")
    comp = check_compatibility(scenario.initial, scenario.ops, scenario.params)
    if not comp.compatible:
        print(f"warning: initial data violates boundary compatibility "
              f"(r0_rel={comp.r0_rel:.3e}, r1_rel={comp.r1_rel:.3e})",
              file=sys.stderr)
    traj = integrate(scenario)
    diagnostics.write_energy_csv(traj, run_dir / "energies.csv")
    if scenario.store_states:
        _store_states(traj, run_dir / "states.npz")
    if args.dump_matrices:
        ops = scenario.ops
        for name in ("M", "K", "B1"):
            export_triplets(getattr(ops, name), run_dir / f"{name}.txt", name)
    ts, e1 = traj.series("E1")
    summary = {
        "scenario_hash": digest,
        "label": scenario.label,
        "samples": len(traj.times),
        "stats": traj.stats,
        "flags": {"degenerate": traj.degenerate,
                  "compatible_initial": comp.compatible},
        "compatibility": {"r0_rel": comp.r0_rel, "r1_rel": comp.r1_rel},
        "E1_initial": float(e1[0]),
        "E1_final": float(e1[-1]),
    }
    try:
        fit = lab.fit_decay_rate(ts, traj.series("E")[1],
                                 lab.default_window(ts[-1]))
        summary["fits"] = {"omega_E": fit.omega, "r2": fit.r2}
    except (FitError, IndexError):
        summary["fits"] = None
    _write_summary(run_dir, summary)
    print(run_dir)
    return EXIT_OK


def cmd_spectrum(args):
    scenario, doc, digest = load_scenario(args.scenario, args.seed)
    run_dir = _run_dir(args.out, scenario.label + "-spectrum", digest)
    ops, params = scenario.ops, scenario.params
    if args.operator == "u":
        gen = build_generator_u(ops, params)
    elif args.operator == "z":
        gen, _, _ = build_generator_z(ops, params)
    elif args.operator == "dissipative":
        _, gen, _ = build_generator_z(ops, params)
    else:
        raise ScenarioError(f"unknown operator {args.operator!r}")
    mode = "dense" if args.dense else args.mode
    rep = spectrum(gen, mode=mode)
    with open(run_dir / "spectrum.csv", "w") as fh:
        fh.write("re,im,residual\n")
        for i, lam in enumerate(rep.eigenvalues):
            res = (f"{rep.rightmost_residuals[i]:.17g}"
                   if i < len(rep.rightmost_residuals) else "")
            fh.write(f"{lam.real:.17g},{lam.imag:.17g},{res}\n")
    _write_summary(run_dir, {
        "scenario_hash": digest, "operator": args.operator,
        "dim": rep.dim, "abscissa": rep.abscissa, "backend": rep.backend,
        "count": len(rep.eigenvalues),
    })
    print(run_dir)
    return EXIT_OK


def _write_dat(path, rows, header):
    with open(path, "w") as fh:
        fh.write(f"# {header}\n")
        for a, b in rows:
            fh.write(f"{a:.17g} {b:.17g}\n")


def cmd_experiment(args):
    scenario, doc, digest = load_scenario(args.scenario, args.seed)
    name = args.name or scenario.experiment
    if name is None:
        raise ScenarioError("no experiment name given (argument or scenario file)")
    run_dir = _run_dir(args.out, f"{scenario.label}-{name}", digest)
    shutil.copy(args.scenario, run_dir / "scenario.yaml")
    opts = dict(scenario.experiment_options)

    if name == "conservation":
        report = lab.experiment_conservation(scenario)
    elif name == "two_level":
        report = lab.experiment_two_level(scenario)
        traj = integrate(scenario)
        ts, E = traj.series("E")
        _, calE = traj.series("calE")
        _write_dat(run_dir / "energy_low.dat", zip(ts, E), "t  E")
        _write_dat(run_dir / "energy_high.dat", zip(ts, calE), "t  calE")
    elif name == "smallness_sweep":
        betas = opts.get("betas", [1e-3, 1e-2, 1e-1])
        scenario.nonlinear = True
        res = lab.experiment_smallness_sweep(scenario, betas)
        checks = lab.sweep_verdict(res)
        report = {"experiment": name, "metrics": res.to_dict(),
                  "checks": checks,
                  "verdict": "pass" if checks["all"] else "fail"}
        rows = [(b, f.omega) for b, f, g in
                zip(res.betas, res.fits, res.global_flags) if g and f]
        _write_dat(run_dir / "sweep_omega.dat", rows, "beta  omega")
    elif name == "geometry":
        specs = opts.get("gamma0_variants", ["left"])
        scenarios, x0s = [], []
        for g0 in specs:
            sub = dict(doc)
            sub["geometry"] = dict(doc["geometry"])
            sub["geometry"]["gamma0"] = g0
            sub["geometry"]["all_dissipative"] = g0 in ("", "none")
            tmp = run_dir / f"variant-{g0.replace(',', '+') or 'none'}.yaml"
            tmp.write_text(yaml.safe_dump(sub))
            sc, _, _ = load_scenario(tmp, args.seed)
            sc.label = g0 or "all-dissipative"
            scenarios.append(sc)
            x0s.append(sub["geometry"].get("x0"))
        report = lab.experiment_geometry(scenarios, x0s)
    else:
        raise ScenarioError(
            f"unknown experiment {name!r} "
            "(known: conservation, two_level, smallness_sweep, geometry)")

    report["scenario_hash"] = digest
    (run_dir / "report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2, default=str) + "\n")
    _write_summary(run_dir, report)
    print(run_dir)
    verdict = report.get("verdict", "exploratory")
    return EXIT_OK if verdict in ("pass", "exploratory") else EXIT_EXPERIMENT


def cmd_field(args):
    scenario, doc, digest = load_scenario(args.scenario, args.seed)
    mesh, partition = scenario.mesh, scenario.partition
    try:
        fld = synthesize_multiplier_field(mesh, partition,
                                          basis_degree=args.degree,
                                          delta_target=args.delta_target)
    except FieldSynthesisFailed as exc:
        print(f"field synthesis infeasible: {exc}")
        if exc.best_delta is not None:
            print(f"best achieved delta: {exc.best_delta:.6e}")
        return EXIT_EXPERIMENT
    print(f"field kind: {fld.kind} (degree {fld.degree})")
    print(f"certified delta_h:      {fld.delta_h:.12g}")
    print(f"certified |h.nu| max:   {fld.bd_residual:.3e}")
    rep = verify_field(fld, mesh, partition)
    print(f"dense re-verification:  {'pass' if rep.passed else 'FAIL'} "
          f"(lam_min={rep.lam_min:.12g}, bd_max={rep.bd_max:.3e})")
    if scenario.x0 is not None:
        star = check_star_shaped(partition, scenario.x0)
        print(f"star-shaped max dot:    {star.max_dot:.6g} "
              f"({'pass' if star.passed else 'FAIL'})")
    return EXIT_OK if rep.passed else EXIT_EXPERIMENT


def cmd_check(args):
    scenario, doc, digest = load_scenario(args.scenario, args.seed)
    print(f"scenario hash: {digest}")
    print(f"mesh: dim={scenario.mesh.dim} nodes={scenario.mesh.n_nodes} "
          f"cells={scenario.mesh.n_cells}")
    p = scenario.params
    print(f"params: b={p.b:.6g} gamma in [{p.gamma.min():.6g}, {p.gamma.max():.6g}]")
    comp = check_compatibility(scenario.initial, scenario.ops, p)
    print(f"compatibility residuals: r0_rel={comp.r0_rel:.3e} "
          f"r1_rel={comp.r1_rel:.3e} ({'ok' if comp.compatible else 'warned'})")
    if scenario.x0 is not None and len(scenario.partition.gamma0_facets):
        star = check_star_shaped(scenario.partition, scenario.x0)
        print(f"star-shaped: max (x-x0).nu = {star.max_dot:.6g} "
              f"({'pass' if star.passed else 'fail'})")
    return EXIT_OK


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="jmgtlab",
        description="Simulation and verification lab for boundary-stabilized "
                    "JMGT acoustics")
    ap.add_argument("--out", default="runs", help="output root directory")
    ap.add_argument("--seed", type=int, default=None,
                    help="override the scenario's initial-data seed")
    ap.add_argument("--threads", type=int, default=1,
                    help="parallel workers for experiment points")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="integrate a scenario and persist the run")
    s.add_argument("scenario")
    s.add_argument("--dump-matrices", action="store_true")
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("spectrum", help="eigenvalues of the discrete generator")
    s.add_argument("scenario")
    s.add_argument("--operator", default="u", choices=("u", "z", "dissipative"))
    s.add_argument("--mode", default="dense",
                   choices=("dense", "iterative-rightmost"))
    s.add_argument("--dense", action="store_true",
                   help="force dense mode (guarded at dimension 3000)")
    s.set_defaults(fn=cmd_spectrum)

    s = sub.add_parser("experiment", help="run a named experiment driver")
    s.add_argument("name", nargs="?", default=None)
    s.add_argument("scenario")
    s.set_defaults(fn=cmd_experiment)

    s = sub.add_parser("field", help="synthesize/verify the multiplier field")
    s.add_argument("scenario")
    s.add_argument("--degree", type=int, default=2)
    s.add_argument("--delta-target", type=float, default=0.5)
    s.add_argument("--verify-only", action="store_true",
                   help="only re-run the dense certification")
    s.set_defaults(fn=cmd_field)

    s = sub.add_parser("check", help="validate a scenario without running it")
    s.add_argument("scenario")
    s.set_defaults(fn=cmd_check)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ScenarioError, ConfigurationError, ParameterError,
            ExperimentPreconditionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ExperimentFailed, FieldSynthesisFailed) as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return EXIT_EXPERIMENT
    except (IntegratorError, DiagnosticError, FitError) as exc:
        extra = ""
        if isinstance(exc, IntegratorError) and exc.step is not None:
            extra = f" (step {exc.step}, t={exc.time:.6g})"
        print(f"runtime error: {exc}{extra}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
