"""Check recorded losses against the performance guarantees of each algorithm.

Every check produces a :class:`BoundRow` ``(bound_id, k, lhs, rhs, slack,
status)``. Per-iteration bounds are evaluated at every iteration and the
single-iteration predictions only at the iteration they name. Coefficients
are taken from the upper end of their certified intervals, so a pass is a
real certificate.

Trace row ``j`` carries the error of the greedy call that produced policy
``j + 1``, so the errors ``eps_1..eps_k`` behind policy ``k`` sit in rows
``0..k-1`` (likewise for the steps ``alpha_i``).

Status values: ``pass``, ``fail``, ``marginal`` (a failure by less than
``MARGINAL`` that is flagged for triage), ``vacuous`` (an infinite
right-hand side), ``inconclusive`` (the trace cannot reach the iteration a
prediction names) and ``info`` (reported, not asserted).
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .concentrability import ConcentrabilityReport
from .errors import ConfigurationError
from .mdp import (
    Mdp,
    NonStationaryPolicy,
    as_distribution,
    expected_loss,
    nonstationary_value,
    optimal_solve,
    policy_value,
)
from .trace import RunTrace

TOLERANCE = 1e-9
MARGINAL = 1e-6
HARD_FAILURES = ("fail",)
CSV_COLUMNS = ("bound_id", "k", "lhs", "rhs", "slack", "status")


@dataclass(frozen=True)
class BoundRow:
    bound_id: str
    k: int
    lhs: float
    rhs: float
    status: str

    @property
    def slack(self) -> float:
        if math.isinf(self.rhs) or math.isnan(self.rhs) or math.isnan(self.lhs):
            return math.nan if math.isnan(self.rhs) or math.isnan(self.lhs) else math.inf
        return self.rhs - self.lhs


def judge(lhs: float, rhs: float) -> str:
    if math.isinf(rhs):
        return "vacuous"
    if lhs <= rhs + TOLERANCE:
        return "pass"
    if abs(rhs - lhs) < MARGINAL:
        return "marginal"
    return "fail"


def check(bound_id: str, k: int, lhs: float, rhs: float) -> BoundRow:
    return BoundRow(bound_id, k, float(lhs), float(rhs), judge(lhs, rhs))


def scaled(coefficient: float, error: float) -> float:
    """``coefficient * error`` with ``inf * 0 = 0``: no error needs no coefficient."""
    if error == 0.0:
        return 0.0
    return coefficient * error


@dataclass
class BoundReport:
    algorithm: str
    rows: list = field(default_factory=list)
    coefficients: dict = field(default_factory=dict)

    def counts(self) -> dict:
        return dict(sorted(Counter(r.status for r in self.rows).items()))

    @property
    def ok(self) -> bool:
        """True when no row is a hard failure."""
        return not any(r.status in HARD_FAILURES for r in self.rows)

    def failures(self) -> list:
        return [r for r in self.rows if r.status in HARD_FAILURES]

    def by_id(self, bound_id: str) -> list:
        return [r for r in self.rows if r.bound_id == bound_id]

    def extend(self, other: "BoundReport") -> None:
        self.rows.extend(other.rows)
        self.coefficients.update(other.coefficients)

    def summary(self) -> dict:
        per_bound: dict = {}
        for r in self.rows:
            per_bound.setdefault(r.bound_id, Counter())[r.status] += 1
        return {
            "algorithm": self.algorithm,
            "ok": self.ok,
            "counts": self.counts(),
            "bounds": {b: dict(sorted(c.items())) for b, c in sorted(per_bound.items())},
            "coefficients": dict(sorted(self.coefficients.items())),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([r.bound_id, r.k, _fmt(r.lhs), _fmt(r.rhs), _fmt(r.slack), r.status])
        return buf.getvalue()

    def write(self, csv_path, summary_path=None) -> None:
        Path(csv_path).write_text(self.to_csv())
        if summary_path is not None:
            Path(summary_path).write_text(json.dumps(self.summary(), indent=1, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def _errors(trace: RunTrace) -> list[float]:
    """``eps_1, eps_2, ...`` in call order (rows with a recorded call)."""
    out = []
    for rec in trace.records:
        if rec.epsilon is None:
            break
        out.append(rec.epsilon)
    return out


def _steps(trace: RunTrace) -> list[float]:
    out = []
    for rec in trace.records:
        if rec.alpha is None:
            break
        out.append(rec.alpha)
    return out


def _params(trace: RunTrace, gamma, v_max):
    gamma = trace.gamma if gamma is None else gamma
    v_max = trace.v_max if v_max is None else v_max
    if gamma is None or v_max is None:
        raise ConfigurationError("gamma and v_max are needed (trace sidecar missing?)")
    return float(gamma), float(v_max)


def _prediction_iterations(errors, gamma: float, log_numerator: float, rate: float):
    """Return ``(first k >= threshold, first k == ceil(threshold))`` where the
    threshold ``log(log_numerator / eps) / rate`` uses ``eps = max_{i<=k} eps_i``.
    Either entry is ``None`` when no recorded iteration qualifies."""
    at_least, exact = None, None
    eps = 0.0
    for k in range(1, len(errors) + 1):
        eps = max(eps, errors[k - 1])
        if eps <= 0.0:
            continue
        threshold = math.log(log_numerator / eps) / rate
        if at_least is None and k >= threshold:
            at_least = (k, eps)
        if exact is None and k == math.ceil(threshold):
            exact = (k, eps)
    return at_least, exact


def verify_dpi(trace: RunTrace, report: ConcentrabilityReport, gamma=None, v_max=None) -> BoundReport:
    gamma, v_max = _params(trace, gamma, v_max)
    c1, c2 = report.C1.upper, report.C2.upper
    g = 1.0 - gamma
    out = BoundReport(trace.algorithm, coefficients={"C1": "upper", "C2": "upper"})
    errors = _errors(trace)
    for rec in trace.records:
        k = rec.k
        prior = errors[:k]
        tail = gamma**k * v_max
        out.rows.append(check("dpi_c2", k, rec.loss, scaled(c2 / g**2, max(prior, default=0.0)) + tail))
        out.rows.append(check("dpi_c1", k, rec.loss, scaled(c1 / g, math.fsum(prior)) + tail))
    at_least, exact = _prediction_iterations(errors, gamma, v_max, g)
    losses = {rec.k: rec.loss for rec in trace.records}
    if at_least is not None and at_least[0] in losses:
        k, eps = at_least
        out.rows.append(check("dpi_predict_c2", k, losses[k], (c2 / g**2 + 1.0) * eps))
    else:
        out.rows.append(BoundRow("dpi_predict_c2", -1, math.nan, math.nan, "inconclusive"))
    if exact is not None and exact[0] in losses:
        k, eps = exact
        out.rows.append(check("dpi_predict_c1", k, losses[k], (k * c1 / g + 1.0) * eps))
    else:
        out.rows.append(BoundRow("dpi_predict_c1", -1, math.nan, math.nan, "inconclusive"))
    return out


def _envelope_rows(out, trace, bound_id, c1, gamma, v_max, k_limit=None):
    """``loss_k <= C1/(1-gamma)^2 sum alpha_i eps_i + exp(-(1-gamma) sum alpha_i) V_max``."""
    g = 1.0 - gamma
    errors, steps = _errors(trace), _steps(trace)
    for rec in trace.records:
        k = rec.k
        if k_limit is not None and k >= k_limit:
            break
        if k > len(steps):
            break
        weighted = math.fsum(a * e for a, e in zip(steps[:k], errors[:k]))
        total = math.fsum(steps[:k])
        rhs = scaled(c1 / g**2, weighted) + math.exp(-g * total) * v_max
        out.rows.append(check(bound_id, k, rec.loss, rhs))


def verify_cpi(trace: RunTrace, report: ConcentrabilityReport, rho=None, gamma=None,
               v_max=None) -> BoundReport:
    """Monotone improvement, stopping time, returned-policy bound and the
    step-weighted envelope, plus the two single-iteration predictions."""
    gamma, v_max = _params(trace, gamma, v_max)
    rho = trace.config.get("rho") if rho is None else rho
    if rho is None:
        raise ConfigurationError("CPI verification needs rho")
    g = 1.0 - gamma
    c1, cp = report.C1.upper, report.C_pistar
    out = BoundReport(trace.algorithm, coefficients={"C1": "upper", "C_pistar": "exact"})
    noisy = trace.config.get("advantage_mode", "exact") != "exact"
    records = trace.records
    k_star = trace.stop_iteration

    # improvement of nu v per completed step
    threshold = rho**2 / (72.0 * gamma * v_max)
    for prev, nxt in zip(records, records[1:]):
        if prev.alpha is None or prev.eta is None or nxt.eta is None:
            break
        row = check("cpi_monotone", prev.k, threshold, nxt.eta - prev.eta)
        if noisy:
            row = BoundRow(row.bound_id, row.k, row.lhs, row.rhs, "info")
        out.rows.append(row)

    limit = 72.0 * gamma * v_max**2 / rho**2
    if k_star is not None:
        out.rows.append(check("cpi_stop", k_star, k_star, limit))
    else:
        last = records[-1].k
        status = "fail" if last > limit else "inconclusive"
        out.rows.append(BoundRow("cpi_stop", last, float(last), limit, status))

    if k_star is not None:
        stop = records[k_star]
        eps_stop = stop.epsilon if stop.epsilon is not None else 0.0
        eps_prev = records[k_star - 1].epsilon if k_star >= 1 else 0.0
        eps = max(eps_stop, eps_prev)
        out.rows.append(check("cpi_final", k_star, stop.loss, scaled(cp / g**2, eps + rho)))
        eps_all = max(_errors(trace)[: k_star + 1], default=0.0)
        out.rows.append(check("cpi_final_rho", k_star, stop.loss, scaled(2.0 * cp / g**2, max(rho, eps_all))))

    _envelope_rows(out, trace, "cpi_sum_c1", c1, gamma, v_max, k_limit=k_star)

    if trace.k_dagger is not None and trace.k_dagger < len(records):
        kd = trace.k_dagger
        steps, errors = _steps(trace)[:kd], _errors(trace)[:kd]
        eps = max(errors)
        out.rows.append(check("cpi_predict_c1", kd, records[kd].loss, (c1 * math.fsum(steps) / g**2 + 1.0) * eps))
    else:
        out.rows.append(BoundRow("cpi_predict_c1", -1, math.nan, math.nan, "inconclusive"))
    return out


def verify_cpi_alpha(trace: RunTrace, report: ConcentrabilityReport, alpha=None, gamma=None,
                     v_max=None) -> BoundReport:
    gamma, v_max = _params(trace, gamma, v_max)
    alpha = trace.config.get("alpha") if alpha is None else alpha
    if alpha is None:
        raise ConfigurationError("CPI(alpha) verification needs alpha")
    g = 1.0 - gamma
    c1 = report.C1.upper
    out = BoundReport(trace.algorithm, coefficients={"C1": "upper"})
    _envelope_rows(out, trace, "cpi_alpha", c1, gamma, v_max)
    errors = _errors(trace)
    _, exact = _prediction_iterations(errors, gamma, v_max, alpha * g)
    losses = {rec.k: rec.loss for rec in trace.records}
    if exact is not None and exact[0] in losses:
        k, eps = exact
        out.rows.append(check("cpi_alpha_predict", k, losses[k], scaled(alpha * (k + 1) * c1 / g**2, eps)))
    else:
        out.rows.append(BoundRow("cpi_alpha_predict", -1, math.nan, math.nan, "inconclusive"))
    if alpha == 1.0:
        # unit steps mirror DPI with the occupancy distribution; nothing is asserted
        out.rows.append(BoundRow("cpi_alpha_unit_step", trace.records[-1].k, trace.final_loss,
                                 math.nan, "info"))
    return out


def verify_nsdpi(trace: RunTrace, report: ConcentrabilityReport, gamma=None, v_max=None) -> BoundReport:
    """Bounds on ``loss_conservative``, which covers every continuation of ``sigma_k``."""
    gamma, v_max = _params(trace, gamma, v_max)
    c1p, cp = report.C1_pistar.upper, report.C_pistar
    g = 1.0 - gamma
    out = BoundReport(trace.algorithm, coefficients={"C1_pistar": "upper", "C_pistar": "exact"})
    errors = _errors(trace)
    lhs = {}
    for rec in trace.records:
        k = rec.k
        if rec.loss_conservative is None:
            raise ConfigurationError("NSDPI trace lacks the loss_conservative column")
        lhs[k] = rec.loss_conservative
        prior = errors[:k]
        tail = 2.0 * gamma**k * v_max
        out.rows.append(check("nsdpi_c1pistar", k, lhs[k], scaled(c1p / g, max(prior, default=0.0)) + tail))
        out.rows.append(check("nsdpi_cpistar", k, lhs[k], scaled(cp / g, math.fsum(prior)) + tail))
    at_least, exact = _prediction_iterations(errors, gamma, 2.0 * v_max, g)
    if at_least is not None and at_least[0] in lhs:
        k, eps = at_least
        out.rows.append(check("nsdpi_predict_c1pistar", k, lhs[k], (c1p / g + 1.0) * eps))
    else:
        out.rows.append(BoundRow("nsdpi_predict_c1pistar", -1, math.nan, math.nan, "inconclusive"))
    if exact is not None and exact[0] in lhs:
        k, eps = exact
        out.rows.append(check("nsdpi_predict_cpistar", k, lhs[k], (k * cp / g + 1.0) * eps))
    else:
        out.rows.append(BoundRow("nsdpi_predict_cpistar", -1, math.nan, math.nan, "inconclusive"))
    return out


def verify_trace(trace: RunTrace, report: ConcentrabilityReport) -> BoundReport:
    """Dispatch on the trace's algorithm tag."""
    if trace.algorithm == "dpi":
        return verify_dpi(trace, report)
    if trace.algorithm in ("cpi", "cpi-plus"):
        return verify_cpi(trace, report)
    if trace.algorithm == "cpi-alpha":
        return verify_cpi_alpha(trace, report)
    if trace.algorithm == "nsdpi":
        return verify_nsdpi(trace, report)
    raise ConfigurationError(f"no bounds known for algorithm {trace.algorithm!r}")


def _recorded_row(trace: RunTrace, policy_end: str):
    if policy_end == "initial":
        return trace.records[0]
    if trace.stop_iteration is not None:
        return trace.records[trace.stop_iteration]
    return trace.records[-1]


def consistency_check(trace: RunTrace, mdp: Mdp, mu, v_star=None) -> BoundReport:
    """Recompute the exact losses of the first and last policy of a trace.

    Rows ``trace_initial``/``trace_final`` compare recorded and recomputed
    losses in both directions (``lhs = |recorded - exact|``, ``rhs = 1e-9``
    scaled by the loss size); NSDPI traces also check the conservative offset.
    """
    mu = as_distribution(mu, mdp.n_states, "mu")
    if v_star is None:
        v_star = optimal_solve(mdp).v_star
    out = BoundReport(trace.algorithm)
    for end in ("initial", "final"):
        policy = trace.initial_policy if end == "initial" else trace.final_policy
        rec = _recorded_row(trace, end)
        if policy is None:
            out.rows.append(BoundRow(f"trace_{end}", rec.k, math.nan, math.nan, "inconclusive"))
            continue
        if isinstance(policy, NonStationaryPolicy):
            value = nonstationary_value(mdp, policy)
        else:
            value = policy_value(mdp, policy)
        exact = expected_loss(mu, v_star, value)
        tol = TOLERANCE * max(1.0, abs(exact))
        out.rows.append(BoundRow(f"trace_{end}", rec.k, abs(rec.loss - exact), tol,
                                 "pass" if abs(rec.loss - exact) <= tol else "fail"))
    if trace.algorithm == "nsdpi":
        worst = 0.0
        for rec in trace.records:
            offset = mdp.gamma**rec.k * mdp.v_max
            worst = max(worst, abs(rec.loss_conservative - rec.loss - offset))
        out.rows.append(BoundRow("trace_conservative_offset", trace.records[-1].k, worst, TOLERANCE,
                                 "pass" if worst <= TOLERANCE else "fail"))
    return out


def same_distribution(a, b) -> bool:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return a.shape == b.shape and bool(np.all(a == b))
