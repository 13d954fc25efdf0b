"""Concentrability coefficients with certified truncation intervals.

``c(i)`` bounds how much mass any length-``i`` sequence of policies can push
from ``mu`` onto a state, relative to ``nu``; ``c_pistar(i)`` does the same
for powers of the optimal kernel only. The series constants ``C1``, ``C2``
and ``C1_pistar`` are infinite sums, so they are reported as intervals: the
lower end is the truncated sum up to the horizon, the upper end adds a tail
in which every coefficient is replaced by a cap that provably dominates it.

Infinite values are ``math.inf`` in memory and the string ``"inf"`` on disk.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ConfigurationError
from .mdp import (
    DeterministicPolicy,
    Mdp,
    as_distribution,
    discounted_occupancy,
    optimal_solve,
    policy_kernel,
)

DEFAULT_TOLERANCE = 1e-6
MAX_HORIZON = 2000
DOMINANCE_TOL = 1e-12
ORDERING_TOL = 1e-9


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ConfigurationError(f"interval lower {self.lower!r} exceeds upper {self.upper!r}")

    @property
    def width(self) -> float:
        if math.isinf(self.upper):
            return math.inf
        return self.upper - self.lower

    @property
    def infinite(self) -> bool:
        return math.isinf(self.upper)

    def to_json(self) -> dict:
        return {"lower": encode_number(self.lower), "upper": encode_number(self.upper)}

    @classmethod
    def from_json(cls, doc) -> "Interval":
        return cls(decode_number(doc["lower"]), decode_number(doc["upper"]))


def encode_number(x: float):
    return "inf" if math.isinf(x) else float(x)


def decode_number(x) -> float:
    if x == "inf":
        return math.inf
    return float(x)


def ratio_coefficient(mass, nu) -> float:
    """``max(1, max_s mass(s) / nu(s))``; ``nu(s) = 0`` with positive mass is infinite, 0/0 is skipped."""
    mass = np.asarray(mass, dtype=float)
    nu = np.asarray(nu, dtype=float)
    zero = nu == 0.0
    if np.any(mass[zero] > 0.0):
        return math.inf
    if np.all(zero):
        return 1.0
    return max(1.0, float(np.max(mass[~zero] / nu[~zero])))


def iter_reach(mdp: Mdp, horizon: int):
    """Yield ``h_t`` for ``t = 0..horizon``, where ``h_t[s, target]`` is the
    largest probability of sitting on ``target`` after ``t`` steps from ``s``
    over all length-``t`` policy sequences.

    Backward induction: ``h_0 = I`` and ``h_{t+1} = max_a P_a h_t`` column by
    column. Maximizing per state is enough because a time-varying
    deterministic policy may pick a different action at every (state, step).
    """
    if horizon < 0:
        raise ConfigurationError("horizon must be nonnegative")
    h = np.eye(mdp.n_states)
    yield h
    for _ in range(horizon):
        h = _kernels.reach_step(mdp.succ, mdp.prob, h)
        yield h


def max_reach(mdp: Mdp, mu, i: int, target: int) -> float:
    """Largest ``(mu P_{pi_1} ... P_{pi_i})(target)`` over all policy sequences."""
    mu = as_distribution(mu, mdp.n_states, "mu")
    if i < 0:
        raise ConfigurationError("i must be nonnegative")
    if not 0 <= target < mdp.n_states:
        raise ConfigurationError(f"target {target} out of range")
    h = np.zeros((mdp.n_states, 1))
    h[target, 0] = 1.0
    for _ in range(i):
        h = _kernels.reach_step(mdp.succ, mdp.prob, h)
    return float(mu @ h[:, 0])


def c_coefficients(mdp: Mdp, mu, nu, H: int) -> list[float]:
    """``c(0..H)``."""
    mu = as_distribution(mu, mdp.n_states, "mu")
    nu = as_distribution(nu, mdp.n_states, "nu")
    return [ratio_coefficient(mu @ h, nu) for h in iter_reach(mdp, H)]


def c1_tail_width(gamma: float, H: int, cap: float) -> float:
    """``(1-gamma) sum_{i>H} gamma^i cap``."""
    if math.isinf(cap):
        return math.inf
    return gamma ** (H + 1) * cap


def c2_tail_width(gamma: float, H: int, cap: float) -> float:
    """``(1-gamma)^2 sum_{i>H} (i+1) gamma^i cap``."""
    if math.isinf(cap):
        return math.inf
    return gamma ** (H + 1) * ((H + 2) * (1.0 - gamma) + gamma) * cap


def default_horizon(gamma: float, nu_min: float, tol: float = DEFAULT_TOLERANCE,
                    cap: int = MAX_HORIZON) -> int:
    """Smallest ``H`` whose ``1/nu_min`` tails for both series are within ``tol``, at most ``cap``."""
    if nu_min <= 0.0:
        return cap
    bound = 1.0 / nu_min
    for H in range(cap + 1):
        if c1_tail_width(gamma, H, bound) <= tol and c2_tail_width(gamma, H, bound) <= tol:
            return H
    return cap


def _series(c_list, gamma: float, weight) -> float:
    if any(math.isinf(c) for c in c_list):
        return math.inf
    return sum(weight(i) * c for i, c in enumerate(c_list))


def big_constants(c_list, gamma: float, H: int, nu_min: float,
                  tail_cap: float | None = None) -> tuple[Interval, Interval]:
    """``(C1, C2)`` intervals from ``c(0..H)``.

    ``tail_cap`` must dominate ``c(i)`` for every ``i > H``; it defaults to
    ``1/nu_min`` (a mass is at most 1). An infinite ``c(i)`` makes both
    constants infinite.
    """
    if len(c_list) != H + 1:
        raise ConfigurationError(f"need c(0..{H}), got {len(c_list)} values")
    cap = _default_cap(nu_min) if tail_cap is None else tail_cap
    g = 1.0 - gamma
    c1 = _series(c_list, gamma, lambda i: g * gamma**i)
    c2 = _series(c_list, gamma, lambda i: g * g * (i + 1) * gamma**i)
    return (
        Interval(c1, c1 + c1_tail_width(gamma, H, cap)),
        Interval(c2, c2 + c2_tail_width(gamma, H, cap)),
    )


def _default_cap(nu_min: float) -> float:
    return math.inf if nu_min <= 0.0 else max(1.0, 1.0 / nu_min)


def c_pistar_constants(mdp: Mdp, pi_star: DeterministicPolicy, mu, nu, H: int,
                       tail_cap: float | None = None) -> tuple[list[float], Interval, float]:
    """``(c_pistar(0..H), C1_pistar interval, C_pistar)``.

    ``C_pistar`` is exact: the ratio of the optimal discounted occupancy of
    ``mu`` to ``nu``, with no truncation.
    """
    mu = as_distribution(mu, mdp.n_states, "mu")
    nu = as_distribution(nu, mdp.n_states, "nu")
    kernel = policy_kernel(mdp, pi_star)
    mass = mu.copy()
    c_list = []
    for i in range(H + 1):
        if i:
            mass = mass @ kernel
        c_list.append(ratio_coefficient(mass, nu))
    cap = _default_cap(float(nu.min())) if tail_cap is None else tail_cap
    c1, _ = big_constants(c_list, mdp.gamma, H, float(nu.min()), cap)
    exact = ratio_coefficient(discounted_occupancy(mdp, pi_star, mu), nu)
    return c_list, c1, exact


@dataclass(frozen=True)
class OrderingResult:
    name: str
    lhs: float
    rhs: float
    passed: bool

    @property
    def slack(self) -> float:
        if math.isinf(self.rhs):
            return math.inf
        return self.rhs - self.lhs

    def to_json(self) -> dict:
        return {"name": self.name, "lhs": encode_number(self.lhs), "rhs": encode_number(self.rhs),
                "slack": encode_number(self.slack), "passed": self.passed}


@dataclass(frozen=True)
class ConcentrabilityReport:
    c: list
    c_pistar: list
    C1: Interval
    C2: Interval
    C1_pistar: Interval
    C_pistar: float
    horizon: int
    tail_bound: float
    gamma: float
    mu: list = field(default_factory=list)
    nu: list = field(default_factory=list)
    fingerprint: str | None = None
    tolerance: float = DEFAULT_TOLERANCE

    @property
    def truncation_ok(self) -> bool:
        """False when the horizon cap left an interval wider than ``tolerance``."""
        widths = (self.C1.width, self.C2.width, self.C1_pistar.width)
        return all(w <= self.tolerance for w in widths if not math.isinf(w))

    def to_json(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "gamma": self.gamma,
            "horizon": self.horizon,
            "tolerance": self.tolerance,
            "tail_bound": encode_number(self.tail_bound),
            "truncation_ok": self.truncation_ok,
            "mu": list(self.mu),
            "nu": list(self.nu),
            "c": [encode_number(x) for x in self.c],
            "c_pistar": [encode_number(x) for x in self.c_pistar],
            "C1": self.C1.to_json(),
            "C2": self.C2.to_json(),
            "C1_pistar": self.C1_pistar.to_json(),
            "C_pistar": encode_number(self.C_pistar),
            "ordering": [r.to_json() for r in ordering_check(self)],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ConcentrabilityReport":
        try:
            return cls(
                c=[decode_number(x) for x in doc["c"]],
                c_pistar=[decode_number(x) for x in doc["c_pistar"]],
                C1=Interval.from_json(doc["C1"]),
                C2=Interval.from_json(doc["C2"]),
                C1_pistar=Interval.from_json(doc["C1_pistar"]),
                C_pistar=decode_number(doc["C_pistar"]),
                horizon=int(doc["horizon"]),
                tail_bound=decode_number(doc["tail_bound"]),
                gamma=float(doc["gamma"]),
                mu=list(doc.get("mu", [])),
                nu=list(doc.get("nu", [])),
                fingerprint=doc.get("fingerprint"),
                tolerance=float(doc.get("tolerance", DEFAULT_TOLERANCE)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"malformed concentrability report: {exc}") from exc


def save_report(report: ConcentrabilityReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")


def load_report(path) -> ConcentrabilityReport:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc
    return ConcentrabilityReport.from_json(doc)


def _leq(name, lhs, rhs, tol=ORDERING_TOL) -> OrderingResult:
    if math.isinf(rhs):
        passed = True
    elif math.isinf(lhs):
        passed = False
    else:
        passed = lhs <= rhs + tol * max(1.0, abs(rhs))
    return OrderingResult(name, lhs, rhs, passed)


def ordering_check(report: ConcentrabilityReport) -> list[OrderingResult]:
    """The chain ``C_pistar <= C1_pistar <= C1 <= C2 / (1-gamma)`` and ``c_pistar(i) <= c(i)``.

    Every comparison is interval-conservative: the smaller side uses its
    lower end and the larger side its upper end.
    """
    g = 1.0 - report.gamma
    results = [
        _leq("C_pistar <= C1_pistar", report.C_pistar, report.C1_pistar.upper),
        _leq("C1_pistar <= C1", report.C1_pistar.lower, report.C1.upper),
        _leq("C1 <= C2/(1-gamma)", report.C1.lower, report.C2.upper / g),
    ]
    worst = None
    for i, (a, b) in enumerate(zip(report.c_pistar, report.c)):
        r = _leq(f"c_pistar({i}) <= c({i})", a, b, DOMINANCE_TOL)
        if not r.passed:
            worst = r
            break
        if worst is None or (not math.isinf(r.slack) and r.slack < worst.slack):
            worst = r
    if worst is not None:
        results.append(OrderingResult("c_pistar(i) <= c(i)", worst.lhs, worst.rhs, worst.passed))
    return results


def reachable_states(mdp: Mdp, mu, kernel=None) -> np.ndarray:
    """Mask of states reachable from the support of ``mu``, under any action or under ``kernel``."""
    mask = np.asarray(mu) > 0.0
    while True:
        if kernel is None:
            nxt = np.zeros_like(mask)
            nxt[mdp.succ[mask][mdp.prob[mask] > 0.0]] = True
        else:
            nxt = kernel[mask].max(axis=0) > 0.0 if mask.any() else np.zeros_like(mask)
        grown = mask | nxt
        if np.array_equal(grown, mask):
            return mask
        mask = grown


def compute_report(mdp: Mdp, mu, nu, H: int | None = None, *, pi_star=None,
                   tol: float = DEFAULT_TOLERANCE) -> ConcentrabilityReport:
    """All coefficients for ``(mdp, mu, nu)``.

    The tail cap is ``min(1/nu_min, max_{s in R, t} reach_H(s, t)/nu(t))``
    with ``R`` the states reachable from the support of ``mu``: after ``H``
    steps the mass on ``t`` is at most the best ``H``-step reach from any
    state the earlier steps could have visited. The optimal-policy tail also
    uses ``P_pistar^H`` restricted to the states that policy can reach.
    """
    mu = as_distribution(mu, mdp.n_states, "mu")
    nu = as_distribution(nu, mdp.n_states, "nu")
    nu_min = float(nu.min())
    if H is None:
        H = default_horizon(mdp.gamma, nu_min, tol)
    if pi_star is None:
        pi_star = optimal_solve(mdp).pi_star
    c_list = []
    for h in iter_reach(mdp, H):
        c_list.append(ratio_coefficient(mu @ h, nu))
    cap = min(_default_cap(nu_min), ratio_coefficient(h[reachable_states(mdp, mu)].max(axis=0), nu))
    C1, C2 = big_constants(c_list, mdp.gamma, H, nu_min, cap)
    kernel = policy_kernel(mdp, pi_star)
    power = np.linalg.matrix_power(kernel, H)
    cap_pistar = min(cap, ratio_coefficient(power[reachable_states(mdp, mu, kernel)].max(axis=0), nu))
    cp_list, C1p, Cp = c_pistar_constants(mdp, pi_star, mu, nu, H, cap_pistar)
    return ConcentrabilityReport(
        c=c_list, c_pistar=cp_list, C1=C1, C2=C2, C1_pistar=C1p, C_pistar=Cp, horizon=H,
        tail_bound=cap, gamma=mdp.gamma, mu=mu.tolist(), nu=nu.tolist(),
        fingerprint=mdp.fingerprint(), tolerance=tol,
    )
