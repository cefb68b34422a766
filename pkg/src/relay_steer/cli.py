"""Command-line front end: ``relay-steer <subcommand> ...``.

Exit codes: 0 success, 2 usage or invalid input, 3 hypothesis violation,
4 numerical failure. Data outputs are deterministic for a given
configuration; run metadata (timestamp, argv, worker count) goes to a
separate ``<prefix>.meta.json``.
"""

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import HypothesisError, InvalidInputError, NumericalError, RelaySteerError
from .scenario import _read_structured, scenario_from_dict

EXIT_OK, EXIT_USAGE, EXIT_HYPOTHESIS, EXIT_NUMERICAL = 0, 2, 3, 4
SUBCOMMANDS = ("simulate", "montecarlo", "bound", "linear-noise", "kalman-steer", "heat")


@dataclass
class RunConfig:
    subcommand: str
    scenario_path: str = None
    overrides: list = field(default_factory=list)
    output_prefix: str = None
    workers: int = None
    seed: int = 0
    args: argparse.Namespace = None
    scenario: object = None
    raw: dict = None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _region(text):
    vals = _floats(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError("region must be 'alpha,beta'")
    return tuple(vals)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed for the Brownian streams (default: scenario [ensemble] seed or 0)")
    common.add_argument("--workers", type=int, default=None, help="worker processes (default: $RELAY_STEER_WORKERS or 1)")
    common.add_argument("--output", default=None, help="output prefix for data files (default: ./<subcommand>)")
    common.add_argument("--dt", type=float, default=None, help="time step (overrides [solver] dt)")
    common.add_argument("--epsilon", default=None, help="sign smoothing width, or 'auto' for rho*dt")
    common.add_argument("--hit-tol", type=float, default=None, help="hitting tolerance on |X - y|")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a scenario key after parsing; VALUE is JSON (repeatable)")

    p = _Parser(prog="relay-steer", description="Relay steering of controlled SDEs with multiplicative noise.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="integrate one closed-loop trajectory")
    s.add_argument("scenario", help="scenario file (.toml or .json)")
    s.add_argument("--stream", type=int, default=0, help="Brownian stream index")
    s.add_argument("--dump-path", default=None, help="write the trajectory CSV (t, X_i, u_j, hit_flag) here")
    s.add_argument("--no-hold", action="store_true", help="keep the relay active after the hit")

    s = sub.add_parser("montecarlo", parents=[common], help="ensemble estimate of P(tau <= T) against the bound")
    s.add_argument("scenario")
    s.add_argument("--paths", type=int, default=None, help="trajectories (default: [ensemble] paths or 1000)")
    s.add_argument("--drift", choices=("norm", "log_norm"), default="norm", help="drift constant used in the bound")

    s = sub.add_parser("bound", parents=[common], help="evaluate the success-probability lower bound")
    s.add_argument("scenario")
    s.add_argument("--drift", choices=("norm", "log_norm"), default="norm")

    s = sub.add_parser("linear-noise", parents=[common], help="pathwise steering for linear multiplicative noise")
    s.add_argument("scenario")
    s.add_argument("--paths", type=int, default=None)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--target", type=_floats, default=None, help="deterministic terminal state X_T")
    g.add_argument("--gamma-terminal-of", type=_floats, default=None, help="X_T = Gamma(T) v for this v")
    s.add_argument("--rule", choices=("sufficient", "literal"), default="sufficient", help="steering gain convention")

    s = sub.add_parser("kalman-steer", parents=[common], help="null steering under the Kalman rank condition")
    s.add_argument("scenario", nargs="?", default=None)
    s.add_argument("--order-n", type=int, default=None, help="companion-form order (with --a-coeffs/--b-coeffs)")
    s.add_argument("--a-coeffs", type=_floats, default=None)
    s.add_argument("--b-coeffs", type=_floats, default=None)
    s.add_argument("--x", type=_floats, default=None, help="initial state (default: scenario x or e_1)")
    s.add_argument("--T", type=float, default=None, help="horizon (default: scenario T or 1)")
    s.add_argument("--paths", type=int, default=None)
    s.add_argument("--coordinates", choices=("state", "transformed"), default="state")

    s = sub.add_parser("heat", parents=[common], help="Galerkin heat-equation approximate controllability")
    s.add_argument("--modes", type=int, default=8, help="Galerkin modes N")
    s.add_argument("--noise-channels", type=int, default=2, help="noise channels d")
    s.add_argument("--region", type=_region, default=(0.3, 0.8), help="control region alpha,beta")
    s.add_argument("--eps", type=float, default=0.1, help="target radius and failure level")
    s.add_argument("--paths", type=int, default=1000)
    s.add_argument("--T", type=float, default=1.0)
    s.add_argument("--x-func", choices=("e1", "parabola"), default="e1",
                   help="initial profile: e_1 or xi(1 - xi)")
    s.add_argument("--no-hold", action="store_true")
    return p


def _apply_overrides(raw, overrides):
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise InvalidInputError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return raw


def parse_and_validate(argv=None):
    """Parse ``argv`` and load the scenario (validated) when one is given."""
    args = build_parser().parse_args(argv)
    cfg = RunConfig(subcommand=args.subcommand, overrides=list(args.overrides), workers=args.workers, args=args)
    cfg.output_prefix = args.output or args.subcommand.replace("-", "_")
    path = getattr(args, "scenario", None)
    if path is not None:
        cfg.scenario_path = path
        raw = _read_structured(path) if Path(path).exists() else None
        if raw is None:
            raise InvalidInputError(f"scenario file {path!r} not found")
        raw = _apply_overrides(raw, cfg.overrides)
        solver = raw.setdefault("solver", {})
        if args.dt is not None:
            solver["dt"] = args.dt
        if args.epsilon is not None:
            solver["epsilon"] = args.epsilon if args.epsilon == "auto" else float(args.epsilon)
        if args.hit_tol is not None:
            solver["hit_tol"] = args.hit_tol
        cfg.raw = raw
        # the Kalman branch has its own hypotheses and allows m < n
        cfg.scenario = scenario_from_dict(raw, validate=args.subcommand != "kalman-steer")
    ens = (cfg.raw or {}).get("ensemble", {})
    cfg.seed = args.seed if args.seed is not None else int(ens.get("seed", 0))
    return cfg


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def _write_json(path, data):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_jsonable(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_meta(cfg, argv, extra=None):
    from .monte_carlo import resolve_workers

    meta = {
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "argv": list(argv) if argv is not None else sys.argv[1:],
        "version": __version__,
        "workers": resolve_workers(cfg.workers),
    }
    meta.update(extra or {})
    _write_json(cfg.output_prefix + ".meta.json", meta)


def _paths(cfg, default=1000):
    n = cfg.args.paths
    if n is None:
        n = int((cfg.raw or {}).get("ensemble", {}).get("paths", default))
    if n < 1:
        raise InvalidInputError("--paths must be >= 1")
    return n


def _grid(cfg, default_dt=None):
    from .sde_sim import TimeGrid, default_grid

    sc = cfg.scenario
    if sc.solver.dt is None and default_dt is not None:
        return TimeGrid.from_dt(sc.T, default_dt)
    return default_grid(sc)


def _cmd_simulate(cfg):
    from .sde_sim import default_regularization, dump_trajectory_csv, integrate_closed_loop, sample_brownian

    sc = cfg.scenario
    grid = _grid(cfg)
    path = sample_brownian(grid, sc.d, cfg.seed, stream=cfg.args.stream)
    traj = integrate_closed_loop(sc, path, default_regularization(sc, grid), sc.solver.hit_tol,
                                 hold=not cfg.args.no_hold)
    if cfg.args.dump_path:
        dump_trajectory_csv(traj, cfg.args.dump_path)
    summary = {
        "schema": "relay-steer/1",
        "hit": traj.hit,
        "tau_hat": traj.tau_hat,
        "held": traj.held,
        "hold_infeasible": traj.hold_infeasible,
        "final_distance": float(np.linalg.norm(traj.states[-1] - sc.y)),
        "rho": sc.rho,
        "dt": grid.dt,
        "hit_tol": traj.hit_tol,
        "seed": cfg.seed,
        "stream": cfg.args.stream,
    }
    _write_json(cfg.output_prefix + ".summary.json", summary)
    tau = "none" if traj.tau_hat is None else f"{traj.tau_hat:.6g}"
    print(f"simulate: hit={traj.hit} tau_hat={tau} held={traj.held} final_distance={summary['final_distance']:.3e}")
    return EXIT_OK


def _cmd_montecarlo(cfg):
    from .monte_carlo import export_report, run_ensemble, supermartingale_check
    from .sde_sim import default_regularization

    sc = cfg.scenario
    grid = _grid(cfg)
    rep = run_ensemble(sc, _paths(cfg), cfg.seed, reg=default_regularization(sc, grid), hit_tol=sc.solver.hit_tol,
                       workers=cfg.workers, grid=grid, drift=cfg.args.drift)
    rep.extras["supermartingale_violations"] = len(supermartingale_check(rep))
    export_report(rep, cfg.output_prefix)
    lo, hi = rep.wilson_ci
    print(f"montecarlo: p_hat={rep.p_hat:.4f} ci=[{lo:.4f},{hi:.4f}] bound={rep.bound_rhs:.4f} verdict={rep.verdict}")
    return EXIT_OK


def _cmd_bound(cfg):
    from .relay_control import bound_constants, failure_probability_bound, success_probability_lower_bound

    sc = cfg.scenario
    consts = bound_constants(sc, drift=cfg.args.drift)
    fail = failure_probability_bound(consts, sc.x, sc.y, sc.T, sc.rho)
    succ = success_probability_lower_bound(consts, sc.x, sc.y, sc.T, sc.rho) if sc.rho > 0 else 0.0
    out = {"schema": "relay-steer/1", "C_star": consts.C_star, "C_offset": consts.C_offset, "gamma": consts.gamma,
           "eta": consts.eta, "rho": sc.rho, "T": sc.T, "failure_bound": fail, "success_bound": succ,
           "drift": cfg.args.drift}
    _write_json(cfg.output_prefix + ".summary.json", out)
    print(f"bound: P(tau<=T) >= {succ:.4f} (C*={consts.C_star:.4g}, gamma={consts.gamma:.4g}, rho={sc.rho:.4g})")
    return EXIT_OK


def _cmd_linear_noise(cfg):
    import warnings

    from .linear_noise import pathwise_steer_batch
    from .sde_sim import sample_brownian

    sc = cfg.scenario
    if sc.sigma.kind != "linear":
        raise InvalidInputError("linear-noise needs sigma.kind = 'linear'")
    if cfg.args.target is not None:
        target = {"X_T": cfg.args.target}
    elif cfg.args.gamma_terminal_of is not None:
        target = {"gamma_terminal_of": cfg.args.gamma_terminal_of}
    else:
        target = cfg.raw.get("target")
        if target is None:
            raise InvalidInputError("give --target, --gamma-terminal-of or a [target] table in the scenario")
    grid = _grid(cfg, default_dt=1e-4)
    n_paths = _paths(cfg, default=100)
    paths = [sample_brownian(grid, sc.d, cfg.seed, stream=i) for i in range(n_paths)]
    B = sc.B(0.0) if sc.B.is_constant else sc.B
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = pathwise_steer_batch(sc.A, B, list(sc.sigma.matrices), sc.x, target, paths, rule=cfg.args.rule)
    rows = [(i, r.success, r.terminal_error, r.rho_used, r.constants.C1_star_inv, r.constants.C2_star,
             r.sufficiency_ok) for i, r in enumerate(res)]
    successes = sum(r.success for r in res)
    summary = {"schema": "relay-steer/1", "paths": n_paths, "successes": successes, "rule": cfg.args.rule,
               "dt": grid.dt, "seed": cfg.seed, "max_terminal_error": max(r.terminal_error for r in res),
               "sufficiency_failures": sum(not r.sufficiency_ok for r in res)}
    _write_json(cfg.output_prefix + ".summary.json", summary)
    with open(cfg.output_prefix + ".paths.csv", "w") as fh:
        fh.write("stream,success,terminal_error,rho_tilde,C1_star_inv,C2_star,sufficiency_ok\n")
        for i, ok, err, rho, c1, c2, suf in rows:
            fh.write(f"{i},{int(ok)},{err!r},{rho!r},{c1!r},{c2!r},{int(suf)}\n")
    print(f"linear-noise: successes={successes}/{n_paths} max_error={summary['max_terminal_error']:.3e} rule={cfg.args.rule}")
    return EXIT_OK


def _cmd_kalman(cfg):
    from .kalman_null import check_hypotheses, companion_system, min_energy_control, simulate_composite_batch
    from .sde_sim import TimeGrid, sample_increments

    a = cfg.args
    if a.a_coeffs is not None or a.b_coeffs is not None or a.order_n is not None:
        if a.a_coeffs is None or a.b_coeffs is None:
            raise InvalidInputError("--a-coeffs and --b-coeffs are both required")
        if a.order_n is not None and a.order_n != len(a.a_coeffs):
            raise InvalidInputError("--order-n does not match the coefficient count")
        A, B, S = companion_system(a.a_coeffs, a.b_coeffs)
        x0, T0, dt0 = None, 1.0, 1e-4
    elif cfg.scenario is not None:
        sc = cfg.scenario
        if not (sc.A.is_constant and sc.B.is_constant) or sc.sigma.kind != "linear":
            raise InvalidInputError("kalman-steer needs constant A, B and linear sigma")
        A, B = sc.A(0.0), sc.B(0.0)
        S = list(sc.sigma.matrices)
        x0, T0, dt0 = sc.x, sc.T, sc.solver.dt or 1e-4
    else:
        raise InvalidInputError("give a scenario file or --a-coeffs/--b-coeffs")
    rep = check_hypotheses(A, B, S)
    S = S[0] if isinstance(S, list) else S
    if not rep.all_ok:
        failed = [name for name, ok in (("rank", rep.rank_ok), ("sigma^2 = a sigma", rep.sigma_power_ok),
                                        ("range(sigma) in range(B)", rep.range_ok)) if not ok]
        raise HypothesisError("Kalman-branch hypotheses fail: " + ", ".join(failed), hypothesis="kalman")
    n = A.shape[0]
    x = np.asarray(a.x if a.x is not None else (x0 if x0 is not None else np.eye(n)[0]), dtype=float)
    T = a.T if a.T is not None else T0
    dt = a.dt if a.dt is not None else dt0
    grid = TimeGrid.from_dt(T, dt)
    plan = min_energy_control(A, B, x, grid)
    n_paths = _paths(cfg, default=100)
    dW = sample_increments(grid, 1, cfg.seed, range(n_paths))
    X = simulate_composite_batch(plan, S, rep.a, x, dW, coordinates=a.coordinates)
    term = np.linalg.norm(X[:, -1], axis=1)
    tol = 1e-2 * (1 + np.linalg.norm(x))
    summary = {"schema": "relay-steer/1", "a": rep.a, "rank": rep.rank, "plan_terminal_error": plan.terminal_error,
               "plan_energy": plan.energy(), "paths": n_paths, "dt": dt, "T": T, "seed": cfg.seed,
               "max_terminal_norm": float(term.max()), "median_terminal_norm": float(np.median(term)),
               "within_tolerance": int(np.sum(term <= tol)), "tolerance": tol, "coordinates": a.coordinates}
    _write_json(cfg.output_prefix + ".summary.json", summary)
    with open(cfg.output_prefix + ".terminal.csv", "w") as fh:
        fh.write("stream,terminal_norm\n")
        for i, v in enumerate(term):
            fh.write(f"{i},{float(v)!r}\n")
    print(f"kalman-steer: plan_error={plan.terminal_error:.2e} max|X(T)|={term.max():.3e} "
          f"within_tol={summary['within_tolerance']}/{n_paths}")
    return EXIT_OK


def _cmd_heat(cfg):
    from .heat_galerkin import GalerkinModel, approximate_controllability_experiment, project_function

    a = cfg.args
    model = GalerkinModel.build(a.modes, a.noise_channels, a.region)
    if a.x_func == "e1":
        x_func = lambda xi: np.sqrt(2.0) * np.sin(np.pi * xi)  # noqa: E731
    else:
        x_func = lambda xi: xi * (1 - xi)  # noqa: E731
    x = project_function(x_func, model.N)
    x[np.abs(x) < 1e-14] = 0.0
    rep = approximate_controllability_experiment(x, model, a.eps, a.paths, cfg.seed, T=a.T, dt=a.dt or 1e-4,
                                                 x_func=x_func, workers=cfg.workers, hold=not a.no_hold)
    summary = {"schema": "relay-steer/1", "seed": cfg.seed, **rep.summary()}
    _write_json(cfg.output_prefix + ".summary.json", summary)
    if rep.ensemble is not None:
        from .monte_carlo import export_report

        export_report(rep.ensemble, cfg.output_prefix + ".ensemble")
    if not rep.feasible:
        print(f"heat: infeasible ({rep.extras['diagnosis']})")
        return EXIT_NUMERICAL
    lo, hi = rep.wilson_ci
    print(f"heat: p_hat={rep.p_hat:.4f} ci=[{lo:.4f},{hi:.4f}] target={rep.target:.2f} verdict={rep.verdict}")
    return EXIT_OK


_DISPATCH = {
    "simulate": _cmd_simulate,
    "montecarlo": _cmd_montecarlo,
    "bound": _cmd_bound,
    "linear-noise": _cmd_linear_noise,
    "kalman-steer": _cmd_kalman,
    "heat": _cmd_heat,
}


def dispatch(cfg, argv=None):
    """Run the configured subcommand; returns the exit code."""
    code = _DISPATCH[cfg.subcommand](cfg)
    _write_meta(cfg, argv)
    return code


def main(argv=None):
    try:
        cfg = parse_and_validate(argv)
        return dispatch(cfg, argv)
    except HypothesisError as exc:
        print(f"relay-steer: {exc}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    except NumericalError as exc:
        print(f"relay-steer: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InvalidInputError, RelaySteerError, OSError) as exc:
        print(f"relay-steer: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
