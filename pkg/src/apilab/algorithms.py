"""Policy-search loops: DPI, CPI (adaptive, line search, fixed step) and NSDPI.

Every run evaluates its policies exactly and emits a :class:`RunTrace`; see
:mod:`apilab.trace` for how rows line up with loop iterations.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericalInvariantError
from .greedy import GreedyConfig, approx_greedy
from .mdp import (
    DeterministicPolicy,
    Mdp,
    NonStationaryPolicy,
    _Solver,
    as_distribution,
    bellman_apply,
    expected_loss,
    mix_policies,
    optimal_solve,
)
from .seeding import stream
from .trace import IterationRecord, RunTrace

ALGORITHMS = ("dpi", "cpi", "cpi-plus", "cpi-alpha", "nsdpi")
ADVANTAGE_MODES = ("exact", "noisy")
STEP_MODES = ("adaptive", "fixed", "line_search")


@dataclass(frozen=True)
class CpiConfig:
    rho: float
    advantage_mode: str = "exact"
    max_iters: int | None = None
    step_mode: str = "adaptive"
    alpha: float | None = None

    def __post_init__(self):
        if not self.rho > 0.0:
            raise ConfigurationError("rho must be positive")
        if self.advantage_mode not in ADVANTAGE_MODES:
            raise ConfigurationError(f"advantage mode must be one of {ADVANTAGE_MODES}")
        if self.step_mode not in STEP_MODES:
            raise ConfigurationError(f"step mode must be one of {STEP_MODES}")
        if self.step_mode == "fixed" and not (self.alpha is not None and 0.0 < self.alpha <= 1.0):
            raise ConfigurationError("fixed step needs alpha in (0, 1]")
        if self.max_iters is not None and self.max_iters < 0:
            raise ConfigurationError("max_iters must be nonnegative")


def stop_bound(rho: float, gamma: float, v_max: float) -> float:
    """Upper bound on the stopping iteration: ``72 gamma V_max^2 / rho^2``."""
    return 72.0 * gamma * v_max**2 / rho**2


def default_max_iters(rho: float, gamma: float, v_max: float) -> int:
    return 10 * math.ceil(stop_bound(rho, gamma, v_max))


def cpi_step_size(advantage_hat: float, rho: float, gamma: float, v_max: float) -> float:
    """``(1 - gamma)(A_hat - rho/3) / (4 gamma V_max)``, clamped to at most 1."""
    alpha = (1.0 - gamma) * (advantage_hat - rho / 3.0) / (4.0 * gamma * v_max)
    if not alpha > 0.0:
        raise NumericalInvariantError(
            f"non-positive CPI step {alpha!r} (advantage {advantage_hat!r}, rho {rho!r})"
        )
    return min(alpha, 1.0)


def _advantage(mdp: Mdp, v, d, pi_prime) -> float:
    return float(d @ (bellman_apply(mdp, pi_prime, v) - v))


def _noisy(advantage: float, rho: float, seed: int, call_id: int) -> float:
    return advantage + stream(seed, "cpi/advantage", call_id).uniform(-rho / 3.0, rho / 3.0)


def estimate_advantage(mdp: Mdp, pi_k, pi_prime, nu, mode: str = "exact", rho: float | None = None,
                       seed: int = 0, call_id: int = 0) -> tuple[float, float]:
    """Return ``(A_hat, A)`` with ``A = d_{pi_k,nu} (T_{pi'} v_{pi_k} - v_{pi_k})``.

    Noisy mode adds uniform noise of half-width ``rho / 3``.
    """
    if mode not in ADVANTAGE_MODES:
        raise ConfigurationError(f"advantage mode must be one of {ADVANTAGE_MODES}")
    solver = _Solver(mdp, pi_k)
    v = solver.value()
    true = _advantage(mdp, v, solver.occupancy(nu), pi_prime)
    if mode == "exact":
        return true, true
    if rho is None:
        raise ConfigurationError("noisy advantage needs rho")
    return _noisy(true, rho, seed, call_id), true


def _prepare(mdp, nu, mu, v_star):
    nu = as_distribution(nu, mdp.n_states, "nu")
    mu = as_distribution(mu, mdp.n_states, "mu")
    if v_star is None:
        v_star = optimal_solve(mdp).v_star
    return nu, mu, np.asarray(v_star, dtype=float)


def _default_pi0(mdp: Mdp, pi0):
    if pi0 is None:
        return DeterministicPolicy(np.zeros(mdp.n_states, dtype=np.int64))
    return pi0


def _new_trace(algorithm, mdp, greedy_cfg, extra, initial_policy, mu, nu):
    config = {"mu": mu.tolist(), "nu": nu.tolist(), "greedy": {
        "basis": greedy_cfg.basis,
        "n_coeffs": greedy_cfg.n_coeffs,
        "noise": greedy_cfg.noise,
        "noise_mode": greedy_cfg.noise_mode,
        "seed": greedy_cfg.seed,
    }}
    config.update(extra)
    return RunTrace(algorithm=algorithm, config=config, fingerprint=mdp.fingerprint(),
                    gamma=mdp.gamma, v_max=mdp.v_max, initial_policy=initial_policy)


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.t0 = time.perf_counter()

    def lap(self):
        if not self.enabled:
            return None
        now = time.perf_counter()
        ms, self.t0 = 1000.0 * (now - self.t0), now
        return ms


def run_dpi(mdp: Mdp, nu, mu, pi0, K: int, greedy_cfg: GreedyConfig, *, v_star=None,
            timing: bool = False) -> RunTrace:
    """``pi_{k+1} = G(nu, v_{pi_k})`` for exactly ``K`` iterations."""
    if K < 1:
        raise ConfigurationError("K must be at least 1")
    nu, mu, v_star = _prepare(mdp, nu, mu, v_star)
    pi = _default_pi0(mdp, pi0)
    trace = _new_trace("dpi", mdp, greedy_cfg, {"iters": K}, pi, mu, nu)
    clock = _Clock(timing)
    v = _Solver(mdp, pi).value()
    for k in range(K + 1):
        rec = IterationRecord(k, expected_loss(mu, v_star, v))
        if k < K:
            pi, meas = approx_greedy(mdp, nu, v, greedy_cfg, call_id=k)
            rec.epsilon, rec.alpha = meas.epsilon, 1.0
            v = _Solver(mdp, pi).value()
        rec.wallclock_ms = clock.lap()
        trace.records.append(rec)
    trace.final_policy = pi
    return trace


def _line_search(mdp, nu, pi, pi_prime, base):
    candidates = []
    step = base
    while step <= 1.0:
        candidates.append(step)
        step *= 2.0
    if candidates[-1] != 1.0:
        candidates.append(1.0)
    best_alpha, best_eta = None, -math.inf
    for alpha in candidates:
        eta = float(nu @ _Solver(mdp, mix_policies(pi, pi_prime, alpha, mdp.n_actions)).value())
        if eta > best_eta:
            best_alpha, best_eta = alpha, eta
    return best_alpha


def _run_conservative(algorithm, mdp, nu, mu, pi0, greedy_cfg, *, rho, step_mode, alpha,
                      advantage_mode, max_iters, stop_test, v_star, timing, extra):
    nu, mu, v_star = _prepare(mdp, nu, mu, v_star)
    pi = _default_pi0(mdp, pi0)
    trace = _new_trace(algorithm, mdp, greedy_cfg, extra, pi, mu, nu)
    clock = _Clock(timing)
    solver = _Solver(mdp, pi)
    v = solver.value()
    for k in range(max_iters + 1):
        rec = IterationRecord(k, expected_loss(mu, v_star, v), eta=float(nu @ v))
        trace.records.append(rec)
        if k == max_iters and not stop_test:
            rec.wallclock_ms = clock.lap()
            break
        d = solver.occupancy(nu)
        pi_prime, meas = approx_greedy(mdp, d, v, greedy_cfg, call_id=k)
        rec.epsilon = meas.epsilon
        if stop_test:
            true = _advantage(mdp, v, d, pi_prime)
            hat = true if advantage_mode == "exact" else _noisy(true, rho, greedy_cfg.seed, k)
            rec.advantage_hat, rec.advantage_true = hat, true
            if hat <= 2.0 * rho / 3.0:
                trace.stop_iteration = k
                rec.wallclock_ms = clock.lap()
                break
            if k == max_iters:
                rec.wallclock_ms = clock.lap()
                break
        if step_mode == "fixed":
            step = alpha
        elif step_mode == "adaptive":
            step = cpi_step_size(rec.advantage_hat, rho, mdp.gamma, mdp.v_max)
        else:
            base = cpi_step_size(rec.advantage_hat, rho, mdp.gamma, mdp.v_max)
            step = _line_search(mdp, nu, pi, pi_prime, base)
        rec.alpha = step
        pi = mix_policies(pi, pi_prime, step, mdp.n_actions)
        solver = _Solver(mdp, pi)
        v = solver.value()
        rec.wallclock_ms = clock.lap()
    trace.final_policy = pi
    trace.k_dagger = k_dagger(trace.records, mdp.gamma, mdp.v_max)
    return trace


def k_dagger(records, gamma: float, v_max: float) -> int | None:
    """Smallest ``j`` with ``sum_{i<=j} alpha_i >= log(V_max/eps)/(1-gamma)``,
    where ``eps`` is the largest error measured up to ``j``."""
    total, eps = 0.0, 0.0
    for j, rec in enumerate(records, start=1):
        if rec.alpha is None:
            break
        total += rec.alpha
        eps = max(eps, rec.epsilon)
        if eps > 0.0 and total >= math.log(v_max / eps) / (1.0 - gamma):
            return j
    return None


def run_cpi(mdp: Mdp, nu, mu, pi0, cfg: CpiConfig, greedy_cfg: GreedyConfig, *, v_star=None,
            timing: bool = False) -> RunTrace:
    """Conservative policy iteration; stops once ``A_hat <= 2 rho / 3``."""
    max_iters = cfg.max_iters
    if max_iters is None:
        max_iters = default_max_iters(cfg.rho, mdp.gamma, mdp.v_max)
    algorithm = {"adaptive": "cpi", "line_search": "cpi-plus", "fixed": "cpi-alpha"}[cfg.step_mode]
    extra = {"rho": cfg.rho, "advantage_mode": cfg.advantage_mode, "max_iters": max_iters,
             "step_mode": cfg.step_mode, "alpha": cfg.alpha}
    return _run_conservative(
        algorithm, mdp, nu, mu, pi0, greedy_cfg, rho=cfg.rho, step_mode=cfg.step_mode,
        alpha=cfg.alpha, advantage_mode=cfg.advantage_mode, max_iters=max_iters, stop_test=True,
        v_star=v_star, timing=timing, extra=extra,
    )


def run_cpi_plus(mdp: Mdp, nu, mu, pi0, rho: float, K: int, greedy_cfg: GreedyConfig, *,
                 advantage_mode: str = "exact", v_star=None, timing: bool = False) -> RunTrace:
    """CPI with a doubling line search on the step, at most ``K`` iterations."""
    cfg = CpiConfig(rho=rho, advantage_mode=advantage_mode, max_iters=K, step_mode="line_search")
    return run_cpi(mdp, nu, mu, pi0, cfg, greedy_cfg, v_star=v_star, timing=timing)


def run_cpi_alpha(mdp: Mdp, nu, mu, pi0, alpha: float, K: int, greedy_cfg: GreedyConfig, *,
                  v_star=None, timing: bool = False) -> RunTrace:
    """CPI with a fixed step and no stopping test."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1], got {alpha}")
    if K < 1:
        raise ConfigurationError("K must be at least 1")
    return _run_conservative(
        "cpi-alpha", mdp, nu, mu, pi0, greedy_cfg, rho=None, step_mode="fixed", alpha=alpha,
        advantage_mode="exact", max_iters=K, stop_test=False, v_star=v_star, timing=timing,
        extra={"alpha": alpha, "iters": K},
    )


def run_nsdpi(mdp: Mdp, nu, mu, K: int, greedy_cfg: GreedyConfig, *, v_star=None,
              timing: bool = False) -> RunTrace:
    """Grow ``sigma_{k+1} = pi_{k+1} sigma_k`` from the empty policy.

    ``loss`` is ``mu (v* - v_sigma_k)``; ``loss_conservative`` adds
    ``gamma^k V_max``, covering every infinite continuation of ``sigma_k``.
    """
    if K < 1:
        raise ConfigurationError("K must be at least 1")
    nu, mu, v_star = _prepare(mdp, nu, mu, v_star)
    trace = _new_trace("nsdpi", mdp, greedy_cfg, {"iters": K}, NonStationaryPolicy(), mu, nu)
    clock = _Clock(timing)
    sigma = NonStationaryPolicy()
    v = np.array(mdp.rewards)
    for k in range(K + 1):
        loss = expected_loss(mu, v_star, v)
        rec = IterationRecord(k, loss, loss_conservative=loss + mdp.gamma**k * mdp.v_max)
        if k < K:
            pi, meas = approx_greedy(mdp, nu, v, greedy_cfg, call_id=k)
            rec.epsilon, rec.alpha = meas.epsilon, 1.0
            sigma = sigma.prepend(pi)
            v = bellman_apply(mdp, pi, v)
        rec.wallclock_ms = clock.lap()
        trace.records.append(rec)
    trace.final_policy = sigma
    return trace


def run_algorithm(name: str, mdp: Mdp, nu, mu, greedy_cfg: GreedyConfig, *, iters: int,
                  pi0=None, rho: float | None = None, alpha: float = 0.1,
                  advantage_mode: str = "exact", max_iters: int | None = None, v_star=None,
                  timing: bool = False) -> RunTrace:
    """Dispatch by CLI algorithm name."""
    if name == "dpi":
        return run_dpi(mdp, nu, mu, pi0, iters, greedy_cfg, v_star=v_star, timing=timing)
    if name == "nsdpi":
        return run_nsdpi(mdp, nu, mu, iters, greedy_cfg, v_star=v_star, timing=timing)
    if name == "cpi-alpha":
        return run_cpi_alpha(mdp, nu, mu, pi0, alpha, iters, greedy_cfg, v_star=v_star, timing=timing)
    if name in ("cpi", "cpi-plus"):
        if rho is None:
            raise ConfigurationError(f"{name} needs rho")
        if name == "cpi-plus":
            return run_cpi_plus(mdp, nu, mu, pi0, rho, iters, greedy_cfg,
                                advantage_mode=advantage_mode, v_star=v_star, timing=timing)
        cfg = CpiConfig(rho=rho, advantage_mode=advantage_mode, max_iters=max_iters)
        return run_cpi(mdp, nu, mu, pi0, cfg, greedy_cfg, v_star=v_star, timing=timing)
    raise ConfigurationError(f"unknown algorithm {name!r}; expected one of {ALGORITHMS}")
