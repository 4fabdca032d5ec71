"""Command line interface: validate, run, regret-sweep.

Configs are flat key = value files with [section] headers, validated against
the bundled JSON schema (config_schema.json) before anything is computed.
Exit codes: 0 clean, 1 runtime check or invariant failure, 2 config error.
"""

from __future__ import annotations

import argparse
import ast
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import oco_controller as oco
from . import vehicle
from .convexsets import HPolytope, Zonotope, zonotope_in_polytope
from .errors import ConfigError, InfeasibleError, OcoRobustError
from .matlin import numeric_rank, power_norm_certificate
from .plant import (
    ModelConfig,
    QuadraticCost,
    build_model,
    build_tightening,
    cost_curvature,
    membership_zu,
    steady_state_manifold,
)
from .simkit import (
    AlternatingTargetGenerator,
    DisturbancePolicy,
    PiecewiseSchedule,
    SimulationAborted,
    invariant_report,
    regret_scaling_experiment,
    replicate_map,
    run_closed_loop,
)


def _load_schema():
    with resources.files("ocorobust").joinpath("config_schema.json").open() as fh:
        return json.load(fh)


def parse_config_text(text):
    """Parse the raw file into {section: {key: (value_string, line_no)}}."""
    sections = {}
    current = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ConfigError("empty section header", line=ln)
            if name in sections:
                raise ConfigError(f"duplicate section [{name}]", line=ln)
            sections[name] = {}
            current = name
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=ln)
        if current is None:
            raise ConfigError("key outside any [section]", line=ln)
        key, _, value = line.partition("=")
        key = key.strip()
        if key in sections[current]:
            raise ConfigError(f"duplicate key '{key}'", line=ln, field=f"{current}.{key}")
        sections[current][key] = (value.strip(), ln)
    return sections


def _convert(spec, raw, line, field):
    kind = spec["type"]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError("expected true/false")
        if kind == "str":
            return raw
        if kind == "enum":
            if raw not in spec["choices"]:
                raise ValueError(f"expected one of {spec['choices']}")
            return raw
        if kind == "vector":
            val = ast.literal_eval(raw)
            arr = np.asarray(val, dtype=float)
            if arr.ndim != 1:
                raise ValueError("expected a flat list")
            return arr
        if kind == "matrix":
            val = ast.literal_eval(raw)
            arr = np.asarray(val, dtype=float)
            if arr.ndim != 2:
                raise ValueError("expected a list of rows")
            return arr
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"bad {kind} value ({exc})", line=line, field=field) from exc
    raise ConfigError(f"unknown type {kind} in schema", field=field)


def load_config(path, command="run"):
    """Read, schema-validate, and type the config file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}")
    raw = parse_config_text(text)
    schema = _load_schema()
    cfg = {}
    cost_pieces = []
    for name, entries in raw.items():
        if name.startswith("cost."):
            spec = schema["repeated_sections"]["cost"]["keys"]
            piece = {}
            for key, (val, ln) in entries.items():
                if key not in spec:
                    raise ConfigError("unknown key", line=ln, field=f"{name}.{key}")
                piece[key] = _convert(spec[key], val, ln, f"{name}.{key}")
            for key, kspec in spec.items():
                if kspec.get("required") and key not in piece:
                    raise ConfigError("missing required key", field=f"{name}.{key}")
            try:
                index = int(name.split(".", 1)[1])
            except ValueError:
                raise ConfigError(f"bad cost section name [{name}]", field=name)
            cost_pieces.append((index, piece))
            continue
        if name not in schema["sections"]:
            raise ConfigError(f"unknown section [{name}]", field=name)
        spec = schema["sections"][name]["keys"]
        out = {}
        for key, (val, ln) in entries.items():
            if key not in spec:
                raise ConfigError("unknown key", line=ln, field=f"{name}.{key}")
            out[key] = _convert(spec[key], val, ln, f"{name}.{key}")
        cfg[name] = out
    for name, sect in schema["sections"].items():
        out = cfg.setdefault(name, {})
        for key, kspec in sect["keys"].items():
            if key not in out and "default" in kspec:
                out[key] = kspec["default"]
    scenario = cfg["experiment"].get("scenario", "generic")
    demand = scenario if command != "regret-sweep" else "regret-sweep"
    for name, sect in schema["sections"].items():
        if demand in sect.get("required_for", []) or (
                command == "regret-sweep" and name in ("model", "controller")):
            for key, kspec in sect["keys"].items():
                if kspec.get("required") and key not in cfg.get(name, {}):
                    raise ConfigError("missing required key", field=f"{name}.{key}")
    cfg["costs"] = [p for _, p in sorted(cost_pieces)]
    if scenario == "generic" or command == "regret-sweep":
        if not cfg["costs"]:
            raise ConfigError("at least one [cost.N] section is required", field="cost.0")
        if cfg["costs"][0]["start"] != 0:
            raise ConfigError("first cost piece must start at 0", field="cost.0.start")
    return cfg


def _model_config(cfg):
    m = cfg["model"]
    c = cfg["controller"]
    return ModelConfig(
        a=m["a"], b=m["b"], k=m["k"], mu=c["mu"],
        x_set=HPolytope.box(m["x_lb"], m["x_ub"]),
        u_set=HPolytope.box(m["u_lb"], m["u_ub"]),
        w_set=Zonotope.box(m["w_halfwidth"]),
        v_set=Zonotope.box(m["v_halfwidth"]),
        rpi_epsilon=c.get("rpi_epsilon"),
        membership_tol=c["membership_tol"],
    )


def _schedule(cfg):
    pieces = tuple(
        (p["start"], QuadraticCost(p["q_x"], p["q_u"], p["ref_x"], p["ref_u"]))
        for p in cfg["costs"])
    return PiecewiseSchedule(pieces)


def _controller(cfg, model, schedule=None):
    c = cfg["controller"]
    builder = None
    if c["variant"] == "optimized" and schedule is not None:
        cost0 = schedule.cost_at(0)
        builder = oco.QuadraticRolloutBuilder(model, cost0.q_x, cost0.q_u)
    return oco.ControllerConfig(gamma=c["gamma"], variant=c["variant"],
                                c_g=c.get("c_g"), rollout_builder=builder)


def _vehicle_params(cfg):
    v = dict(cfg.get("vehicle", {}))
    k = v.pop("k", None)
    if k is not None:
        k = tuple(tuple(row) for row in np.asarray(k, float))
    return vehicle.VehicleParams(
        mu=cfg["controller"]["mu"],
        gamma=cfg["controller"]["gamma"],
        c_g=cfg["controller"].get("c_g") or 1000.0,
        shrink=cfg["controller"]["shrink"],
        k=k,
        **v,
    )


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


FLAG_COLUMNS = ("state_ok", "input_ok", "candidate_ok", "plan_ok", "zs_ok",
                "g_cap_ok", "tube_ok", "tube_marginal", "resid_ok")


def write_trace_csv(path, trace, ledger, n, m):
    cols = (["t"]
            + [f"x_true_{i}" for i in range(n)]
            + [f"x_meas_{i}" for i in range(n)]
            + [f"u_{i}" for i in range(m)]
            + [f"w_{i}" for i in range(n)]
            + [f"v_{i}" for i in range(n)]
            + ["beta", "g_norm", "cost", "benchmark_cost", "cum_regret"]
            + [f"flag_{name}" for name in FLAG_COLUMNS])
    cum = 0.0
    lines = [",".join(cols)]
    for rec, (cost, bench, _, _) in zip(trace, ledger.per_step):
        cum += cost - bench
        row = ([str(rec.t)]
               + [_fmt(x) for x in rec.x_true]
               + [_fmt(x) for x in rec.x_meas]
               + [_fmt(x) for x in rec.u]
               + [_fmt(x) for x in rec.w]
               + [_fmt(x) for x in rec.v]
               + [_fmt(rec.diagnostics.beta), _fmt(rec.diagnostics.g_norm),
                  _fmt(cost), _fmt(bench), _fmt(cum)]
               + [_fmt(bool(rec.invariant_flags.get(name, True)))
                  for name in FLAG_COLUMNS])
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_ledger_csv(path, ledger, n, m):
    cols = (["t", "cost", "benchmark_cost"]
            + [f"theta_{i}" for i in range(n)]
            + [f"eta_{i}" for i in range(m)])
    lines = [",".join(cols)]
    for t, (cost, bench, theta, eta) in enumerate(ledger.per_step):
        row = ([str(t), _fmt(cost), _fmt(bench)]
               + [_fmt(x) for x in theta] + [_fmt(x) for x in eta])
        lines.append(",".join(row))
    lines.append(f"# cum_regret = {_fmt(ledger.cum_regret)}")
    lines.append(f"# path_length = {_fmt(ledger.path_length)}")
    lines.append(f"# w_energy = {_fmt(ledger.w_energy)}")
    lines.append(f"# v_energy = {_fmt(ledger.v_energy)}")
    Path(path).write_text("\n".join(lines) + "\n")


def _generic_worker(model, tables, manifold, controller, schedule, policy,
                    horizon, zeta0, x0, abort):
    trace, ledger = run_closed_loop(model, tables, manifold, controller, schedule,
                                    policy, horizon, zeta0=zeta0, x0=x0,
                                    abort_on_violation=abort)
    return trace, ledger, None


def cmd_run(args):
    cfg = load_config(args.config, command="run")
    out_dir = Path(args.out or cfg["output"]["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    quiet = args.quiet or cfg["output"]["quiet"]
    scenario = cfg["experiment"]["scenario"]
    horizon = cfg["experiment"]["horizon"]
    n_seeds = cfg["experiment"]["seeds"]
    base_seed = args.seed if args.seed is not None else cfg["disturbance"]["seed"]
    if args.variant:
        cfg["controller"]["variant"] = args.variant

    if scenario == "vehicle":
        params = _vehicle_params(cfg)
        setup = vehicle.vehicle_setup(params)
        model = setup.model
        jobs = [(cfg["controller"]["variant"], base_seed + i, params, horizon)
                for i in range(n_seeds)]
        results = replicate_map(vehicle.scenario_worker, jobs)
        tables = setup.tables
    else:
        cfg_m = _model_config(cfg)
        model = build_model(cfg_m)
        tables = build_tightening(model)
        manifold = steady_state_manifold(model, model.p_rpi, shrink=cfg["controller"]["shrink"])
        schedule = _schedule(cfg)
        controller = _controller(cfg, model, schedule)
        u0 = cfg["controller"].get("zeta0_u")
        u0 = np.zeros(model.m) if u0 is None else np.asarray(u0, float)
        zeta0 = (model.g_k @ u0, u0)
        x0 = cfg["model"].get("x0")
        abort = cfg["experiment"]["abort_on_violation"]
        jobs = []
        for i in range(n_seeds):
            policy = DisturbancePolicy(kind=cfg["disturbance"]["kind"],
                                       seed=base_seed + i,
                                       scale=cfg["disturbance"]["scale"])
            jobs.append((model, tables, manifold, controller, schedule, policy,
                         horizon, zeta0, x0, abort))
        try:
            results = replicate_map(_generic_worker, jobs)
        except SimulationAborted as exc:
            write_trace_csv(out_dir / "trace_partial.csv", exc.trace, exc.ledger,
                            model.n, model.m)
            print(f"aborted: {exc}", file=sys.stderr)
            return 1

    total_violations = 0
    report_lines = []
    regrets = []
    for i, (trace, ledger, metrics) in enumerate(results):
        seed = base_seed + i
        write_trace_csv(out_dir / f"trace_{seed:04d}.csv", trace, ledger, model.n, model.m)
        write_ledger_csv(out_dir / f"ledger_{seed:04d}.csv", ledger, model.n, model.m)
        report = invariant_report(trace, model, tables)
        resid = metrics["resid_violations"] if metrics else 0
        total_violations += report.total_violations + resid
        regrets.append(ledger.cum_regret)
        report_lines.append(f"seed {seed}:")
        report_lines.extend("  " + line for line in report.lines())
        if metrics:
            report_lines.append(f"  model-mismatch violations: {resid}")
            if metrics.get("phase2_standoff_gap_m") is not None:
                report_lines.append(
                    f"  phase2 standoff gap [m]: {metrics['phase2_standoff_gap_m']:.3f}")
            report_lines.append(
                f"  phase3 settled speed [km/h]: {metrics['phase3_settled_speed_kmh']:.3f}")
    (out_dir / "invariants.txt").write_text("\n".join(report_lines) + "\n")
    summary = (f"run scenario={scenario} seeds={n_seeds} horizon={horizon} "
               f"violations={total_violations} mean_regret={np.mean(regrets):.6g}")
    if not quiet:
        print(summary)
    return 0 if total_violations == 0 else 1


def cmd_regret_sweep(args):
    cfg = load_config(args.config, command="regret-sweep")
    out_dir = Path(args.out or cfg["output"]["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    quiet = args.quiet or cfg["output"]["quiet"]
    sw = cfg["sweep"]
    model = build_model(_model_config(cfg))
    tables = build_tightening(model)
    manifold = steady_state_manifold(model, model.p_rpi, shrink=cfg["controller"]["shrink"])
    schedule = _schedule(cfg)
    controller = _controller(cfg, model, schedule)
    gen = AlternatingTargetGenerator(
        model=model, manifold=manifold, base_cost=schedule.cost_at(0),
        direction=tuple(sw["direction"]), levels=tuple(sw["path_levels"]),
        hop_size=sw["hop_size"], horizon=sw["horizon"])
    result = regret_scaling_experiment(
        model, tables, manifold, controller, gen,
        dist_levels=list(sw["noise_levels"]),
        seeds=list(range(sw["seeds_per_cell"])),
        horizon=sw["horizon"], base_seed=sw["base_seed"])

    cols = ["path_level", "noise_level", "seed", "path_length", "w_energy",
            "v_energy", "regret"]
    lines = [",".join(cols)]
    for row in result.rows:
        lines.append(",".join(_fmt(row[c]) if c != "seed" else str(row[c]) for c in cols))
    (out_dir / "sweep_rows.csv").write_text("\n".join(lines) + "\n")

    if result.coefficients is None:
        (out_dir / "sweep_fit.txt").write_text("fit skipped: degenerate design\n")
        if not quiet:
            print("regret-sweep: fit skipped (degenerate design)")
        return 0
    c0, cp, cn = result.coefficients
    fit_text = (f"regret ~ c0 + c_path * path_length + c_noise * (w_energy + v_energy)\n"
                f"c0 = {c0:.6g}\nc_path = {cp:.6g}\nc_noise = {cn:.6g}\n"
                f"r_squared = {result.r_squared:.6f}\n")
    (out_dir / "sweep_fit.txt").write_text(fit_text)
    if not quiet:
        print(f"regret-sweep: c0={c0:.4g} c_path={cp:.4g} c_noise={cn:.4g} "
              f"R2={result.r_squared:.4f}")
    if cp < -1e-9 or cn < -1e-9:
        print("regret-sweep: negative fit coefficient", file=sys.stderr)
        return 1
    return 0


def _validation_checks(cfg):
    """Stepwise assumption checks; returns a list of (name, status, detail)."""
    checks = []
    scenario = cfg["experiment"]["scenario"]

    def record(name, ok, detail=""):
        checks.append((name, "pass" if ok else "FAIL", detail))
        return ok

    if scenario == "vehicle":
        params = _vehicle_params(cfg)
        a, b = vehicle.reduced_dynamics()
        k = (vehicle.default_feedback(params.poles) if params.k is None
             else np.asarray(params.k, float))
        x_set = HPolytope.box(
            [vehicle.LANE_BOUNDS_M[0], vehicle.kmh_to_ms(vehicle.SPEED_BOUNDS_KMH[0]) - vehicle.DELTA_BAR],
            [vehicle.LANE_BOUNDS_M[1], vehicle.kmh_to_ms(vehicle.SPEED_BOUNDS_KMH[1]) - vehicle.DELTA_BAR])
        bound = np.array([vehicle.STEER_BOUND_RAD, vehicle.ACCEL_BOUND])
        u_set = HPolytope.box(-bound, bound)
        w_set = Zonotope.box([vehicle.W_HALFWIDTH, vehicle.W_HALFWIDTH])
        v_set = Zonotope.box([vehicle.POS_NOISE_M, vehicle.kmh_to_ms(vehicle.SPEED_NOISE_KMH)])
        mu = params.mu
        gamma, shrink = params.gamma, params.shrink
        c_g = params.c_g
        x0 = np.array([0.0, vehicle.kmh_to_ms(params.initial_speed_kmh) - vehicle.DELTA_BAR])
        zeta0_u = None
        cost0 = vehicle.phase_cost(1)
    else:
        m = cfg["model"]
        a, b, k = m["a"], m["b"], m["k"]
        x_set = HPolytope.box(m["x_lb"], m["x_ub"])
        u_set = HPolytope.box(m["u_lb"], m["u_ub"])
        w_set = Zonotope.box(m["w_halfwidth"])
        v_set = Zonotope.box(m["v_halfwidth"])
        mu = cfg["controller"]["mu"]
        gamma, shrink = cfg["controller"]["gamma"], cfg["controller"]["shrink"]
        c_g = cfg["controller"].get("c_g")
        x0 = m.get("x0")
        x0 = np.zeros(np.asarray(a).shape[0]) if x0 is None else np.asarray(x0, float)
        zeta0_u = cfg["controller"].get("zeta0_u")
        pieces = cfg["costs"]
        cost0 = QuadraticCost(pieces[0]["q_x"], pieces[0]["q_u"],
                              pieces[0]["ref_x"], pieces[0]["ref_u"])

    a = np.asarray(a, float)
    b = np.asarray(b, float)
    k = np.asarray(k, float)
    n = a.shape[0]

    from .plant import _zonotope_full_interior
    record("disturbance sets contain 0 (Assumption on W, V)",
           _zonotope_full_interior(w_set) and _zonotope_full_interior(v_set))
    ctrb = np.hstack([np.linalg.matrix_power(a, i) @ b for i in range(n)])
    record("(A, B) controllable", numeric_rank(ctrb) == n)
    record("X, U compact with 0 interior",
           x_set.is_compact() and u_set.is_compact()
           and x_set.contains_origin_interior() and u_set.contains_origin_interior())
    a_k = a + b @ k
    decay = power_norm_certificate(a_k)
    if not record("A + BK certified Schur", decay is not None,
                  "" if decay else "no decaying power found"):
        return checks, None
    try:
        model = build_model(ModelConfig(a=a, b=b, k=k, mu=mu, x_set=x_set, u_set=u_set,
                                        w_set=w_set, v_set=v_set))
    except OcoRobustError as exc:
        record("model assembly", False, str(exc))
        return checks, None
    record("horizon covers controllability index (mu >= mu*)", mu >= model.mu_star,
           f"mu*={model.mu_star}")
    record("S_c full row rank", numeric_rank(model.s_c) == n)
    record("RPI set P inside X", zonotope_in_polytope(model.p_rpi.p, x_set, tol=1e-9))
    try:
        tables = build_tightening(model)
        record("tightened stage sets nonempty", True)
    except InfeasibleError as exc:
        record("tightened stage sets nonempty", False, str(exc))
        return checks, model
    try:
        manifold = steady_state_manifold(model, model.p_rpi, shrink=shrink)
        record("steady-state manifold nonempty with 0 interior", True)
    except InfeasibleError as exc:
        record("steady-state manifold nonempty with 0 interior", False, str(exc))
        return checks, model
    eff_cg = c_g if c_g is not None else 1.01 * model.c_g_min
    record("c_g covers the explicit-solution norm", eff_cg >= model.c_g_min * (1 - 1e-9),
           f"required >= {model.c_g_min:.4g}")
    try:
        if scenario == "vehicle":
            zeta0 = vehicle.optimal_steady_state(manifold, cost0, model)
        else:
            u0 = np.zeros(model.m) if zeta0_u is None else np.asarray(zeta0_u, float)
            zeta0 = (model.g_k @ u0, u0)
        state = oco.initialize(model, tables, manifold, zeta0, x0)
        ok0, worst0 = membership_zu(tables, model, x0, state.u_pred)
        record("initial plan feasible (initialization assumption)", ok0,
               f"worst residual {worst0:.2e}")
    except OcoRobustError as exc:
        record("initial plan feasible (initialization assumption)", False, str(exc))
    record("x0 inside X", x_set.contains(x0, tol=1e-9))
    alpha_k, l_k = cost_curvature(cost0, model)
    bound = 2.0 / (alpha_k + l_k)
    if gamma > bound:
        checks.append(("gamma within contraction range",
                       "warn", f"gamma={gamma:.3g} exceeds 2/(alpha+l)={bound:.3g}; "
                       "regret bound guarantees need a smaller step"))
    else:
        checks.append(("gamma within contraction range", "pass", f"bound {bound:.3g}"))
    return checks, model


def cmd_validate(args):
    cfg = load_config(args.config, command="validate")
    checks, _ = _validation_checks(cfg)
    failed = [c for c in checks if c[1] == "FAIL"]
    for name, status, detail in checks:
        line = f"[{status:>4}] {name}"
        if detail:
            line += f"  ({detail})"
        print(line)
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ocorobust",
        description="Robust online convex optimization control toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("validate", cmd_validate), ("run", cmd_run),
                     ("regret-sweep", cmd_regret_sweep)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to config file")
        p.add_argument("--seed", type=int, default=None, help="override base seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--variant", choices=["explicit", "optimized"], default=None)
        p.add_argument("--quiet", action="store_true")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OcoRobustError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_entry():
    sys.exit(main())


if __name__ == "__main__":
    console_entry()
