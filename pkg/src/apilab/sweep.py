"""Grid sweeps over Garnet parameters with per-run traces and summary statistics.

A sweep is described by a JSON document::

    {"grid": {"n_states": [50], "n_actions": [2, 5], "branching": [1, "n/50"],
              "n_features": ["n/10"]},
     "n_mdps": 10, "n_runs": 10, "gamma": 0.99, "iters": 30, "seed": 0,
     "greedy": {"basis": "fourier", "n_coeffs": "p", "noise": 0.05},
     "algorithms": {"dpi": {}, "cpi-plus": {"rho": 0.01}, "cpi-alpha": {"alpha": 0.1},
                    "nsdpi": {}}}

Grid entries are integers or expressions of the state count (``"n/50"`` is
``max(1, n_states // 50)``); ``n_coeffs`` may also be ``"p"`` (the feature
count) or ``"full"``. Duplicate cells are dropped.

Every (cell, MDP index) pair is an independent task with seeds derived from
the base seed and the cell parameters, so the outputs do not depend on the
number of workers or on completion order.
"""
from __future__ import annotations

import csv
import io
import json
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .algorithms import ALGORITHMS, run_algorithm
from .errors import ApiLabError, ConfigurationError
from .garnet import GarnetParams, default_distributions, generate_garnet
from .greedy import GreedyConfig
from .mdp import optimal_solve
from .seeding import derive_seed
from .trace import write_trace

_EXPR_RE = re.compile(r"^\s*(n|p)\s*(?:/\s*(\d+)\s*)?$")

DESK_GRID = {"n_states": [50, 100], "n_actions": [2, 5], "branching": [1, "n/50"],
             "n_features": ["n/10"]}
FULL_GRID = {"n_states": [100, 200], "n_actions": [2, 5], "branching": [1, "n/50"],
              "n_features": ["n/10"]}
DEFAULT_ALGORITHMS = {"dpi": {}, "cpi-plus": {"rho": 0.01}, "cpi-alpha": {"alpha": 0.1}, "nsdpi": {}}
DEFAULT_GREEDY = {"basis": "fourier", "n_coeffs": "p", "noise": 0.05, "noise_mode": "relative"}


def evaluate(value, n_states: int, n_features: int | None = None) -> int:
    """Resolve a grid entry: an integer, ``"n"``, ``"n/d"``, ``"p"`` or ``"p/d"``."""
    if isinstance(value, bool):
        raise ConfigurationError(f"bad grid value {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    m = _EXPR_RE.match(str(value))
    if m is None:
        raise ConfigurationError(f"cannot interpret grid value {value!r}")
    if m.group(1) == "p" and n_features is None:
        raise ConfigurationError("'p' is only meaningful for n_coeffs")
    base = n_states if m.group(1) == "n" else n_features
    div = int(m.group(2) or 1)
    if div < 1:
        raise ConfigurationError(f"bad divisor in {value!r}")
    return max(1, base // div)


@dataclass(frozen=True)
class Cell:
    n_states: int
    n_actions: int
    branching: int
    n_features: int

    @property
    def label(self) -> str:
        return f"G{self.n_states}-{self.n_actions}-{self.branching}-{self.n_features}"

    def key(self) -> tuple:
        return (self.n_states, self.n_actions, self.branching, self.n_features)


@dataclass(frozen=True)
class SweepSpec:
    grid: dict = field(default_factory=lambda: dict(DESK_GRID))
    n_mdps: int = 10
    n_runs: int = 10
    gamma: float = 0.99
    iters: int = 30
    seed: int = 0
    greedy: dict = field(default_factory=lambda: dict(DEFAULT_GREEDY))
    algorithms: dict = field(default_factory=lambda: dict(DEFAULT_ALGORITHMS))
    out: str | None = None

    def __post_init__(self):
        if self.n_mdps < 1 or self.n_runs < 1 or self.iters < 1:
            raise ConfigurationError("n_mdps, n_runs and iters must be at least 1")
        for key in ("n_states", "n_actions", "branching", "n_features"):
            if not self.grid.get(key):
                raise ConfigurationError(f"grid entry {key!r} must be a non-empty list")
        if not self.algorithms:
            raise ConfigurationError("at least one algorithm is required")
        for name in self.algorithms:
            if name not in ALGORITHMS:
                raise ConfigurationError(f"unknown algorithm {name!r}")
        if "cpi" in self.algorithms or "cpi-plus" in self.algorithms:
            for name in ("cpi", "cpi-plus"):
                if name in self.algorithms and "rho" not in self.algorithms[name]:
                    raise ConfigurationError(f"{name} needs a rho entry")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")
        self.cells()

    @classmethod
    def from_dict(cls, doc: dict) -> "SweepSpec":
        known = {"grid", "n_mdps", "n_runs", "gamma", "iters", "seed", "greedy", "algorithms", "out"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown sweep keys {sorted(unknown)}")
        kwargs = dict(doc)
        if "grid" in kwargs:
            kwargs["grid"] = {**DESK_GRID, **kwargs["grid"]}
        if "greedy" in kwargs:
            kwargs["greedy"] = {**DEFAULT_GREEDY, **kwargs["greedy"]}
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "SweepSpec":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{path}: expected a JSON object")
        return cls.from_dict(doc)

    def full_scale(self) -> "SweepSpec":
        return replace(self, grid=dict(FULL_GRID), n_mdps=30, n_runs=30)

    def to_dict(self) -> dict:
        return {"grid": self.grid, "n_mdps": self.n_mdps, "n_runs": self.n_runs, "gamma": self.gamma,
                "iters": self.iters, "seed": self.seed, "greedy": self.greedy,
                "algorithms": self.algorithms, "out": self.out}

    def cells(self) -> list[Cell]:
        found = set()
        for ns in self.grid["n_states"]:
            ns = evaluate(ns, 0)
            for na in self.grid["n_actions"]:
                for b in self.grid["branching"]:
                    for p in self.grid["n_features"]:
                        cell = Cell(ns, evaluate(na, ns), evaluate(b, ns), evaluate(p, ns))
                        GarnetParams(*cell.key())  # validates ranges
                        found.add(cell)
        return sorted(found, key=Cell.key)

    def greedy_config(self, cell: Cell, seed: int, features) -> GreedyConfig:
        g = self.greedy
        n_coeffs = g.get("n_coeffs", "p")
        f = None if n_coeffs in (None, "full") else evaluate(n_coeffs, cell.n_states, cell.n_features)
        return GreedyConfig(basis=g.get("basis", "fourier"), n_coeffs=f, noise=float(g.get("noise", 0.0)),
                            noise_mode=g.get("noise_mode", "relative"), seed=seed,
                            features=features if g.get("basis") == "random_features" else None)


def mdp_seed(spec: SweepSpec, cell: Cell, m: int) -> int:
    return derive_seed(spec.seed, "sweep/mdp", *cell.key(), m)


def run_seed(spec: SweepSpec, cell: Cell, m: int, r: int) -> int:
    return derive_seed(spec.seed, "sweep/run", *cell.key(), m, r)


def trace_name(cell: Cell, m: int, algorithm: str, r: int) -> str:
    return f"runs/{cell.label}/mdp{m:03d}_{algorithm}_run{r:03d}.csv"


def padded_losses(losses, length: int) -> list[float]:
    """Extend an early-stopped loss curve with its final value: the returned policy stays put."""
    losses = list(losses)
    return losses + [losses[-1]] * (length - len(losses))


def run_mdp_task(spec: SweepSpec, cell: Cell, m: int, out_dir: str | None) -> dict:
    """All algorithms and runs on one MDP. Never raises; errors are returned."""
    try:
        seed = mdp_seed(spec, cell, m)
        params = GarnetParams(*cell.key(), seed=seed)
        mdp, features = generate_garnet(params, gamma=spec.gamma)
        mu, nu = default_distributions(mdp)
        v_star = optimal_solve(mdp).v_star
        results = []
        for algorithm in sorted(spec.algorithms):
            opts = spec.algorithms[algorithm]
            for r in range(spec.n_runs):
                rs = run_seed(spec, cell, m, r)
                trace = run_algorithm(
                    algorithm, mdp, nu, mu, spec.greedy_config(cell, rs, features), iters=spec.iters,
                    rho=opts.get("rho"), alpha=opts.get("alpha", 0.1),
                    advantage_mode=opts.get("advantage_mode", "exact"), v_star=v_star,
                )
                trace.mdp_seed, trace.run_seed = seed, rs
                trace.source = {"garnet": params.label(), "seed": seed, "gamma": spec.gamma}
                name = trace_name(cell, m, algorithm, r)
                if out_dir is not None:
                    path = Path(out_dir) / name
                    path.parent.mkdir(parents=True, exist_ok=True)
                    write_trace(trace, path)
                results.append({
                    "algorithm": algorithm, "run": r, "run_seed": rs, "losses": trace.losses,
                    "stop_iteration": trace.stop_iteration, "trace": name,
                })
        return {"cell": cell, "mdp": m, "mdp_seed": seed, "results": results, "error": None}
    except (ApiLabError, ArithmeticError, ValueError, np.linalg.LinAlgError, OSError) as exc:
        return {"cell": cell, "mdp": m, "mdp_seed": None, "results": [], "error": f"{type(exc).__name__}: {exc}"}


def default_jobs() -> int:
    raw = os.environ.get("APILAB_JOBS", "1")
    try:
        jobs = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"APILAB_JOBS must be an integer, got {raw!r}") from exc
    if jobs < 1:
        raise ConfigurationError("APILAB_JOBS must be at least 1")
    return jobs


@dataclass
class SweepResult:
    spec: SweepSpec
    tasks: list

    @property
    def failures(self) -> list:
        return [t for t in self.tasks if t["error"] is not None]

    def curves(self, cell: Cell, algorithm: str) -> dict:
        """``{mdp index: (n_runs, iters + 1) array}`` of padded losses."""
        out = {}
        length = self.spec.iters + 1
        for t in self.tasks:
            if t["cell"] != cell or t["error"] is not None:
                continue
            rows = [padded_losses(r["losses"], length) for r in t["results"] if r["algorithm"] == algorithm]
            out[t["mdp"]] = np.array(rows)
        return dict(sorted(out.items()))


def run_sweep(spec: SweepSpec, out_dir=None, jobs: int = 1, progress=None) -> SweepResult:
    """Execute every (cell, MDP) task, with up to ``jobs`` worker processes."""
    if jobs < 1:
        raise ConfigurationError("jobs must be at least 1")
    keys = [(cell, m) for cell in spec.cells() for m in range(spec.n_mdps)]
    out = None if out_dir is None else str(out_dir)
    tasks = []
    if jobs == 1:
        for cell, m in keys:
            tasks.append(run_mdp_task(spec, cell, m, out))
            _report(progress, tasks[-1])
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_mdp_task, spec, cell, m, out) for cell, m in keys]
            for fut in futures:
                tasks.append(fut.result())
                _report(progress, tasks[-1])
    tasks.sort(key=lambda t: (t["cell"].key(), t["mdp"]))
    return SweepResult(spec, tasks)


def _report(progress, task) -> None:
    if progress is None:
        return
    status = "ok" if task["error"] is None else f"FAILED ({task['error']})"
    print(f"{task['cell'].label} mdp {task['mdp']}: {status}", file=progress, flush=True)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _table(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def runs_table(result: SweepResult) -> str:
    rows = []
    for t in result.tasks:
        if t["error"] is not None:
            rows.append([t["cell"].label, t["mdp"], "", "", "", "", "", "", "", "error: " + t["error"], ""])
            continue
        for r in t["results"]:
            n = len(r["losses"])
            rows.append([t["cell"].label, t["mdp"], t["mdp_seed"], r["run"], r["run_seed"], r["algorithm"],
                         n - 1, r["stop_iteration"], r["losses"][-1], "ok", r["trace"]])
    header = ("cell", "mdp", "mdp_seed", "run", "run_seed", "algorithm", "last_iter", "stop_iteration",
              "final_loss", "status", "trace")
    return _table(header, rows)


def mdp_stats_table(result: SweepResult) -> str:
    rows = []
    for cell in result.spec.cells():
        for algorithm in sorted(result.spec.algorithms):
            for m, losses in result.curves(cell, algorithm).items():
                mean, std = losses.mean(axis=0), losses.std(axis=0)
                for k in range(losses.shape[1]):
                    rows.append([cell.label, m, algorithm, k, losses.shape[0], mean[k], std[k]])
    return _table(("cell", "mdp", "algorithm", "iter", "n_runs", "mean", "std"), rows)


def summary_table(result: SweepResult) -> str:
    """Per (cell, algorithm, iter): pooled mean/std over all runs and the
    across-MDP distribution of the per-MDP means and stds."""
    rows = []
    for cell in result.spec.cells():
        for algorithm in sorted(result.spec.algorithms):
            curves = result.curves(cell, algorithm)
            if not curves:
                continue
            pooled = np.concatenate(list(curves.values()), axis=0)
            means = np.array([c.mean(axis=0) for c in curves.values()])
            stds = np.array([c.std(axis=0) for c in curves.values()])
            for k in range(pooled.shape[1]):
                rows.append([
                    cell.label, algorithm, k, len(curves), pooled.shape[0],
                    pooled[:, k].mean(), pooled[:, k].std(),
                    means[:, k].mean(), means[:, k].std(), np.median(means[:, k]),
                    stds[:, k].mean(), stds[:, k].std(), np.median(stds[:, k]),
                ])
    header = ("cell", "algorithm", "iter", "n_mdps", "n_runs", "mean", "std", "mdp_mean_mean",
              "mdp_mean_std", "mdp_mean_median", "mdp_std_mean", "mdp_std_std", "mdp_std_median")
    return _table(header, rows)


def plot_cell(result: SweepResult, cell: Cell, out_dir, ylim=None) -> list[Path]:
    """Two SVGs per cell: the across-MDP statistics of per-MDP mean loss and
    of per-MDP loss std, one line per algorithm with a +-1 std band."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    with matplotlib.rc_context({"svg.hashsalt": "apilab", "svg.fonttype": "none"}):
        for stat in ("mean", "std"):
            fig, ax = plt.subplots(figsize=(6.0, 4.0))
            for algorithm in sorted(result.spec.algorithms):
                curves = result.curves(cell, algorithm)
                if not curves:
                    continue
                per_mdp = np.array([c.mean(axis=0) if stat == "mean" else c.std(axis=0)
                                    for c in curves.values()])
                centre, spread = per_mdp.mean(axis=0), per_mdp.std(axis=0)
                ks = np.arange(per_mdp.shape[1])
                ax.plot(ks, centre, label=algorithm)
                ax.fill_between(ks, centre - spread, centre + spread, alpha=0.2)
            ax.set_xlabel("iteration")
            ax.set_ylabel("loss" if stat == "mean" else "loss std across runs")
            ax.set_title(f"{cell.label}: {stat}")
            if ylim is not None:
                ax.set_ylim(*ylim)
            ax.legend()
            path = Path(out_dir) / f"{cell.label}_{stat}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            paths.append(path)
    return paths


def write_outputs(result: SweepResult, out_dir, plots: bool = True, ylim=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(result.spec.to_dict(), indent=1, sort_keys=True) + "\n")
    (out / "runs.csv").write_text(runs_table(result))
    (out / "mdp_stats.csv").write_text(mdp_stats_table(result))
    (out / "summary.csv").write_text(summary_table(result))
    if plots:
        plot_dir = out / "plots"
        plot_dir.mkdir(exist_ok=True)
        for cell in result.spec.cells():
            plot_cell(result, cell, plot_dir, ylim)


def sweep(spec: SweepSpec, out_dir, jobs: int = 1, plots: bool = True, ylim=None,
          progress=sys.stderr) -> SweepResult:
    """Run the grid and write all outputs under ``out_dir``."""
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    result = run_sweep(spec, out_dir, jobs, progress)
    write_outputs(result, out_dir, plots, ylim)
    return result
