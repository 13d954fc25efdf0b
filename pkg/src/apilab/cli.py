"""``apilab`` command line: generate | run | sweep | analyze | verify.

Exit codes: 0 ok, 1 usage or configuration error, 2 I/O failure,
3 numerical invariant violation, 4 partial sweep failure, 5 bound violation.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .algorithms import ALGORITHMS, run_algorithm
from .bounds import consistency_check, same_distribution, verify_trace
from .concentrability import compute_report, load_report, save_report
from .errors import ApiLabError, ConfigurationError, NumericalInvariantError
from .garnet import GarnetParams, garnet_document, generate_garnet
from .greedy import BASES, NOISE_MODES, GreedyConfig
from .mdp import (
    as_distribution,
    discounted_occupancy,
    load_mdp,
    optimal_solve,
    save_mdp,
    uniform,
)
from .sweep import SweepSpec, default_jobs, sweep
from .trace import read_trace, sidecar_path, trace_csv, write_trace

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL, EXIT_PARTIAL, EXIT_BOUND = 0, 1, 2, 3, 4, 5


class UsageError(ConfigurationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _distribution(spec: str, n_states: int, *, mdp=None, mu=None, name="distribution"):
    """``uniform``, ``delta:i``, ``occupancy`` (the optimal occupancy of ``mu``) or a JSON file."""
    if spec == "uniform":
        return uniform(n_states)
    if spec.startswith("delta:"):
        i = int(spec.split(":", 1)[1])
        if not 0 <= i < n_states:
            raise UsageError(f"{name}: state {i} out of range")
        out = np.zeros(n_states)
        out[i] = 1.0
        return out
    if spec == "occupancy":
        if mdp is None or mu is None:
            raise UsageError(f"{name}=occupancy is only available for nu")
        return discounted_occupancy(mdp, optimal_solve(mdp).pi_star, mu)
    try:
        values = json.loads(Path(spec).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"{name}: expected uniform, delta:i, occupancy or a JSON file, got {spec!r}") from exc
    return as_distribution(values, n_states, name)


def _load_problem(args):
    """Return ``(mdp, features, source)`` from ``--mdp`` or ``--garnet``."""
    if bool(args.mdp) == bool(args.garnet):
        raise UsageError("give exactly one of --mdp or --garnet")
    if args.mdp:
        mdp, doc = load_mdp(args.mdp)
        if args.gamma is not None:
            mdp = mdp.with_gamma(args.gamma)
        features = np.asarray(doc["features"]) if "features" in doc else None
        source = {"path": str(args.mdp), "gamma": mdp.gamma}
        if "garnet" in doc:
            source["seed"] = doc["garnet"]["seed"]
        return mdp, features, source
    params = GarnetParams.parse(args.garnet, args.seed)
    gamma = 0.99 if args.gamma is None else args.gamma
    mdp, features = generate_garnet(params, gamma=gamma)
    return mdp, features, {"garnet": params.label(), "seed": params.seed, "gamma": gamma}


def _rebuild_problem(source: dict, base: Path):
    if "garnet" in source:
        params = GarnetParams.parse(source["garnet"], int(source["seed"]))
        return generate_garnet(params, gamma=float(source["gamma"]))[0]
    path = Path(source["path"])
    if not path.is_absolute() and not path.exists():
        path = base / path
    mdp, _ = load_mdp(path)
    return mdp.with_gamma(float(source["gamma"]))


def _n_coeffs(text):
    if text is None or text == "full":
        return None
    try:
        return int(text)
    except ValueError as exc:
        raise UsageError(f"--n-coeffs expects an integer or 'full', got {text!r}") from exc


# --------------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    params = GarnetParams.parse(args.params, args.seed)
    mdp, features = generate_garnet(params, gamma=args.gamma)
    save_mdp(mdp, args.out, garnet_document(mdp, features, params))
    print(f"seed {params.seed}: {params.label()} gamma={mdp.gamma} "
          f"fingerprint={mdp.fingerprint()} -> {args.out}")
    return EXIT_OK


RUN_DEFAULTS = {
    "alg": None, "iters": 30, "basis": "fourier", "n_coeffs": "full", "noise": 0.0,
    "noise_mode": "relative", "rho": None, "alpha": 0.1, "advantage": "exact", "max_iters": None,
    "run_seed": 0, "mu": "uniform", "nu": "uniform", "pi0": "zeros", "timing": False,
    "mdp": None, "garnet": None, "seed": 0, "gamma": None, "out": None,
}


def _apply_config(args) -> None:
    """Fill unset run flags from ``--config`` and then from the built-in defaults."""
    config = {}
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: not valid JSON ({exc})") from exc
        unknown = set(config) - set(RUN_DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
    for key, default in RUN_DEFAULTS.items():
        if getattr(args, key) is None:
            setattr(args, key, config.get(key, default))


def cmd_run(args) -> int:
    _apply_config(args)
    if args.alg not in ALGORITHMS:
        raise UsageError(f"--alg must be one of {', '.join(ALGORITHMS)}")
    mdp, features, source = _load_problem(args)
    mu = _distribution(args.mu, mdp.n_states, name="mu")
    nu = _distribution(args.nu, mdp.n_states, mdp=mdp, mu=mu, name="nu")
    solution = optimal_solve(mdp)
    if args.pi0 == "zeros":
        pi0 = None
    elif args.pi0 == "optimal":
        pi0 = solution.pi_star
    else:
        raise UsageError("--pi0 must be 'zeros' or 'optimal'")
    greedy = GreedyConfig(basis=args.basis, n_coeffs=_n_coeffs(args.n_coeffs), noise=float(args.noise),
                          noise_mode=args.noise_mode, seed=int(args.run_seed),
                          features=features if args.basis == "random_features" else None)
    trace = run_algorithm(
        args.alg, mdp, nu, mu, greedy, iters=int(args.iters), pi0=pi0, rho=args.rho,
        alpha=float(args.alpha), advantage_mode=args.advantage, max_iters=args.max_iters,
        v_star=solution.v_star, timing=bool(args.timing),
    )
    trace.mdp_seed = source.get("seed")
    trace.run_seed = int(args.run_seed)
    trace.source = source
    if args.out:
        write_trace(trace, args.out)
    else:
        sys.stdout.write(trace_csv([trace]))
    stop = "" if trace.stop_iteration is None else f" (stopped at k*={trace.stop_iteration})"
    print(f"final loss {trace.final_loss!r} after {trace.records[-1].k} iterations{stop}",
          file=sys.stdout if args.out else sys.stderr)
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = SweepSpec.load(args.spec) if args.spec else SweepSpec()
    if args.full_scale:
        spec = spec.full_scale()
    out = args.out or spec.out
    if not out:
        raise UsageError("no output directory: pass --out or set 'out' in the sweep file")
    jobs = args.jobs if args.jobs is not None else default_jobs()
    ylim = tuple(args.ylim) if args.ylim else None
    result = sweep(spec, out, jobs=jobs, plots=not args.no_plots, ylim=ylim)
    n = len(result.tasks)
    print(f"{n - len(result.failures)}/{n} tasks completed -> {out}")
    return EXIT_PARTIAL if result.failures else EXIT_OK


def cmd_analyze(args) -> int:
    mdp, _ = load_mdp(args.mdp)
    if args.gamma is not None:
        mdp = mdp.with_gamma(args.gamma)
    mu = _distribution(args.mu, mdp.n_states, name="mu")
    nu = _distribution(args.nu, mdp.n_states, mdp=mdp, mu=mu, name="nu")
    report = compute_report(mdp, mu, nu, args.horizon, tol=args.tol)
    if args.out:
        save_report(report, args.out)
    else:
        json.dump(report.to_json(), sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")
    log = sys.stdout if args.out else sys.stderr
    print(f"H={report.horizon} C1={report.C1.upper:.6g} C2={report.C2.upper:.6g} "
          f"C1_pistar={report.C1_pistar.upper:.6g} C_pistar={report.C_pistar:.6g}", file=log)
    for row in report.to_json()["ordering"]:
        print(f"  {'pass' if row['passed'] else 'FAIL'}  {row['name']}", file=log)
    return EXIT_OK


def cmd_verify(args) -> int:
    trace_path = Path(args.trace)
    if not trace_path.exists():
        raise FileNotFoundError(f"no such trace: {trace_path}")
    if not sidecar_path(trace_path).exists():
        raise UsageError(f"{trace_path}: the metadata sidecar {sidecar_path(trace_path).name} is missing")
    trace = read_trace(trace_path)
    report = load_report(args.report)
    if trace.fingerprint != report.fingerprint:
        raise UsageError(f"MDP fingerprints differ: trace {trace.fingerprint}, report {report.fingerprint}")
    for name in ("mu", "nu"):
        if not same_distribution(trace.config.get(name, []), getattr(report, name)):
            raise UsageError(f"trace and report were computed with different {name}")
    bounds = verify_trace(trace, report)
    if args.mdp:
        mdp, _ = load_mdp(args.mdp)
        mdp = mdp.with_gamma(trace.gamma)
    elif trace.source:
        mdp = _rebuild_problem(trace.source, trace_path.parent)
    else:
        mdp = None
    if mdp is not None:
        if mdp.fingerprint() != trace.fingerprint:
            raise UsageError("the MDP behind the trace does not match its fingerprint")
        bounds.extend(consistency_check(trace, mdp, np.asarray(report.mu)))
    else:
        print("warning: no MDP source recorded; recorded losses were not recomputed", file=sys.stderr)
    if args.out:
        bounds.write(args.out, args.summary)
    elif args.summary:
        Path(args.summary).write_text(json.dumps(bounds.summary(), indent=1, sort_keys=True) + "\n")
    counts = " ".join(f"{k}={v}" for k, v in bounds.counts().items())
    print(f"{trace.algorithm}: {counts}")
    for row in bounds.failures()[:10]:
        print(f"  FAIL {row.bound_id} k={row.k} lhs={row.lhs!r} rhs={row.rhs!r}")
    return EXIT_OK if bounds.ok else EXIT_BOUND


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="apilab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a seeded Garnet MDP as JSON")
    p.add_argument("params", help='Garnet parameters "G(ns,na,b,p)"')
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="run one algorithm and write its trace")
    src = p.add_argument_group("problem")
    src.add_argument("--mdp", help="MDP JSON file")
    src.add_argument("--garnet", help='generate "G(ns,na,b,p)" on the fly')
    src.add_argument("--seed", type=int, help="Garnet seed (with --garnet)")
    src.add_argument("--gamma", type=float, help="override the discount factor")
    p.add_argument("--alg", choices=ALGORITHMS)
    p.add_argument("--iters", type=int, help="iterations (cpi-plus: at most)")
    p.add_argument("--basis", choices=BASES)
    p.add_argument("--n-coeffs", dest="n_coeffs", help="basis size or 'full'")
    p.add_argument("--noise", type=float, help="noise amplitude")
    p.add_argument("--noise-mode", dest="noise_mode", choices=NOISE_MODES)
    p.add_argument("--rho", type=float, help="CPI accuracy parameter")
    p.add_argument("--alpha", type=float, help="cpi-alpha step")
    p.add_argument("--advantage", choices=("exact", "noisy"))
    p.add_argument("--max-iters", dest="max_iters", type=int, help="cpi safety cap")
    p.add_argument("--run-seed", dest="run_seed", type=int)
    p.add_argument("--mu", help="uniform | delta:i | file.json")
    p.add_argument("--nu", help="uniform | delta:i | occupancy | file.json")
    p.add_argument("--pi0", choices=("zeros", "optimal"))
    p.add_argument("--timing", action="store_const", const=True, help="record wallclock_ms")
    p.add_argument("--config", help="JSON file with flag values; explicit flags win")
    p.add_argument("--out", help="trace CSV (a .meta.json sidecar is written next to it)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a Garnet grid and aggregate statistics")
    p.add_argument("spec", nargs="?", help="sweep JSON (defaults to the desk-scale grid)")
    p.add_argument("--out", help="output directory (overrides the sweep file)")
    p.add_argument("--jobs", type=int, help="worker processes (default $APILAB_JOBS or 1)")
    p.add_argument("--full-scale", action="store_true", help="n_s in {100, 200}, 30 MDPs x 30 runs")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--ylim", type=float, nargs=2, metavar=("LOW", "HIGH"), help="pin plot y range")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="compute concentrability coefficients")
    p.add_argument("--mdp", required=True)
    p.add_argument("--gamma", type=float, help="override the discount factor")
    p.add_argument("--mu", default="uniform")
    p.add_argument("--nu", default="uniform")
    p.add_argument("--horizon", type=int, help="truncation horizon (default: automatic)")
    p.add_argument("--tol", type=float, default=1e-6, help="target interval width")
    p.add_argument("--out", help="report JSON (default: stdout)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("verify", help="check a trace against its performance bounds")
    p.add_argument("--trace", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--mdp", help="MDP file, if the trace's recorded source is unavailable")
    p.add_argument("--out", help="bound rows CSV")
    p.add_argument("--summary", help="summary JSON")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalInvariantError as exc:
        print(f"apilab: numerical invariant violated: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ApiLabError, ValueError, KeyError) as exc:
        print(f"apilab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"apilab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
