"""Per-iteration run records and their CSV / sidecar serialization.

Row ``k`` of a trace describes iteration ``k`` of the algorithm's loop:
``loss``, ``loss_conservative`` and ``eta`` belong to the current policy
(``pi_k`` or ``sigma_k``), while ``epsilon``, ``alpha`` and the advantages
come from the greedy call made during that iteration, the one that produces
the next policy. The last row of a fixed-length run therefore has empty
call columns, and the row at which CPI stops carries the stopping call's
error and advantage but no step.

Run-level metadata (configuration, seeds, MDP fingerprint, stop data and the
initial/final policies) lives in a JSON sidecar next to the CSV.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .mdp import policy_from_json, policy_to_json

COLUMNS = (
    "algorithm", "mdp_seed", "run_seed", "iter", "loss", "loss_conservative", "epsilon",
    "alpha", "eta", "advantage_hat", "advantage_true", "wallclock_ms",
)
_FLOAT_FIELDS = (
    "loss", "loss_conservative", "epsilon", "alpha", "eta", "advantage_hat", "advantage_true",
    "wallclock_ms",
)


@dataclass
class IterationRecord:
    k: int
    loss: float
    epsilon: float | None = None
    alpha: float | None = None
    eta: float | None = None
    advantage_hat: float | None = None
    advantage_true: float | None = None
    loss_conservative: float | None = None
    wallclock_ms: float | None = None


@dataclass
class RunTrace:
    algorithm: str
    records: list = field(default_factory=list)
    stop_iteration: int | None = None
    k_dagger: int | None = None
    final_policy: object = None
    initial_policy: object = None
    mdp_seed: int | None = None
    run_seed: int | None = None
    config: dict = field(default_factory=dict)
    fingerprint: str | None = None
    gamma: float | None = None
    v_max: float | None = None
    source: dict | None = None

    @property
    def losses(self):
        return [r.loss for r in self.records]

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss

    def metadata(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "stop_iteration": self.stop_iteration,
            "k_dagger": self.k_dagger,
            "mdp_seed": self.mdp_seed,
            "run_seed": self.run_seed,
            "config": self.config,
            "fingerprint": self.fingerprint,
            "gamma": self.gamma,
            "v_max": self.v_max,
            "source": self.source,
            "n_records": len(self.records),
            "initial_policy": None if self.initial_policy is None else policy_to_json(self.initial_policy),
            "final_policy": None if self.final_policy is None else policy_to_json(self.final_policy),
        }


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def trace_rows(trace: RunTrace):
    for r in trace.records:
        yield [
            trace.algorithm, _fmt(trace.mdp_seed), _fmt(trace.run_seed), str(r.k),
            _fmt(r.loss), _fmt(r.loss_conservative), _fmt(r.epsilon), _fmt(r.alpha), _fmt(r.eta),
            _fmt(r.advantage_hat), _fmt(r.advantage_true), _fmt(r.wallclock_ms),
        ]


def trace_csv(traces) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for t in traces:
        writer.writerows(trace_rows(t))
    return buf.getvalue()


def sidecar_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".meta.json")


def write_trace(trace: RunTrace, path) -> None:
    Path(path).write_text(trace_csv([trace]))
    sidecar_path(path).write_text(json.dumps(trace.metadata(), indent=1, sort_keys=True) + "\n")


def _parse(value: str):
    return None if value == "" else float(value)


def read_trace(path) -> RunTrace:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigurationError(f"{path}: trace has no rows")
    missing = set(COLUMNS) - set(rows[0])
    if missing:
        raise ConfigurationError(f"{path}: missing columns {sorted(missing)}")
    records = []
    for row in rows:
        rec = IterationRecord(k=int(row["iter"]), loss=float(row["loss"]))
        for name in _FLOAT_FIELDS[1:]:
            setattr(rec, name, _parse(row[name]))
        records.append(rec)
    trace = RunTrace(algorithm=rows[0]["algorithm"], records=records)
    meta_file = sidecar_path(path)
    if meta_file.exists():
        meta = json.loads(meta_file.read_text())
        for key in ("stop_iteration", "k_dagger", "mdp_seed", "run_seed", "config", "fingerprint",
                    "gamma", "v_max", "source"):
            setattr(trace, key, meta.get(key))
        if meta.get("initial_policy"):
            trace.initial_policy = policy_from_json(meta["initial_policy"])
        if meta.get("final_policy"):
            trace.final_policy = policy_from_json(meta["final_policy"])
    return trace
