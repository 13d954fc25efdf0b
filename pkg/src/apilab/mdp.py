"""Exact finite-MDP machinery.

State rewards ``r``, a sparse transition table and a discount factor.
Distributions and value functions are plain 1-D float arrays; policies are
small frozen wrappers so that deterministic, stochastic and non-stationary
policies can be told apart.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from scipy import linalg

from . import _kernels
from .errors import ConfigurationError, NumericalInvariantError

ROW_SUM_TOL = 1e-12
RESIDUAL_TOL = 1e-10
CLAMP_TOL = 1e-12


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mdp:
    """Finite MDP with state-dependent rewards.

    ``succ``/``prob`` are ``(n_states, n_actions, width)`` arrays; rows shorter
    than ``width`` are padded with probability-zero entries and ``row_len``
    keeps the listed length of each row for serialization.
    """

    succ: np.ndarray
    prob: np.ndarray
    rewards: np.ndarray
    gamma: float
    r_max: float = 1.0
    row_len: np.ndarray = None

    def __post_init__(self):
        succ = _frozen(self.succ, np.int64)
        prob = _frozen(self.prob, np.float64)
        rewards = _frozen(self.rewards, np.float64)
        if succ.ndim != 3 or succ.shape != prob.shape:
            raise ConfigurationError("succ and prob must share a (n_states, n_actions, width) shape")
        n_states, n_actions, width = succ.shape
        if n_states < 1 or n_actions < 1 or width < 1:
            raise ConfigurationError("an MDP needs at least one state, action and successor slot")
        if rewards.shape != (n_states,):
            raise ConfigurationError(f"rewards must have shape ({n_states},), got {rewards.shape}")
        row_len = self.row_len
        if row_len is None:
            row_len = np.full((n_states, n_actions), width)
        row_len = _frozen(row_len, np.int64)
        object.__setattr__(self, "succ", succ)
        object.__setattr__(self, "prob", prob)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "row_len", row_len)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", float(self.r_max))

        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.r_max > 0.0:
            raise ConfigurationError("r_max must be positive")
        if succ.min() < 0 or succ.max() >= n_states:
            raise ConfigurationError("successor index out of range")
        if np.any(prob < 0.0) or np.any(prob > 1.0):
            raise ConfigurationError("transition probabilities must lie in [0, 1]")
        sums = prob.sum(axis=2)
        if np.max(np.abs(sums - 1.0)) > ROW_SUM_TOL:
            s, a = np.unravel_index(np.argmax(np.abs(sums - 1.0)), sums.shape)
            raise ConfigurationError(f"transition row ({s}, {a}) sums to {sums[s, a]!r}")
        if np.any(np.abs(rewards) > self.r_max):
            raise ConfigurationError("|reward| exceeds r_max")

    @property
    def n_states(self) -> int:
        return self.succ.shape[0]

    @property
    def n_actions(self) -> int:
        return self.succ.shape[1]

    @property
    def v_max(self) -> float:
        return self.r_max / (1.0 - self.gamma)

    @classmethod
    def from_rows(cls, rows, rewards, gamma, n_actions, r_max=1.0) -> "Mdp":
        """Build from sparse rows: ``rows[s * n_actions + a] = [(s', p), ...]``."""
        rewards = np.asarray(rewards, dtype=float)
        n_states = rewards.shape[0]
        if len(rows) != n_states * n_actions:
            raise ConfigurationError(
                f"expected {n_states * n_actions} transition rows, got {len(rows)}"
            )
        lengths = [len(row) for row in rows]
        if min(lengths) < 1:
            raise ConfigurationError("every transition row needs at least one successor")
        width = max(lengths)
        succ = np.zeros((n_states, n_actions, width), dtype=np.int64)
        prob = np.zeros((n_states, n_actions, width))
        for idx, row in enumerate(rows):
            s, a = divmod(idx, n_actions)
            for j, (nxt, p) in enumerate(row):
                succ[s, a, j] = int(nxt)
                prob[s, a, j] = float(p)
        return cls(succ, prob, rewards, gamma, r_max, np.array(lengths).reshape(n_states, n_actions))

    def dense_transitions(self) -> np.ndarray:
        """``P[a, s, s']`` as a dense array (small MDPs only)."""
        out = np.zeros((self.n_actions, self.n_states, self.n_states))
        for a in range(self.n_actions):
            onehot = np.zeros((self.n_states, self.n_actions))
            onehot[:, a] = 1.0
            out[a] = _kernels.dense_kernel(self.succ, self.prob, onehot, self.n_states)
        return out

    def with_gamma(self, gamma: float) -> "Mdp":
        return Mdp(self.succ, self.prob, self.rewards, gamma, self.r_max, self.row_len)

    def to_dict(self) -> dict:
        rows = []
        for s in range(self.n_states):
            for a in range(self.n_actions):
                n = int(self.row_len[s, a])
                rows.append([[int(self.succ[s, a, j]), float(self.prob[s, a, j])] for j in range(n)])
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "r_max": self.r_max,
            "rewards": [float(x) for x in self.rewards],
            "transitions": rows,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mdp":
        try:
            mdp = cls.from_rows(
                data["transitions"], data["rewards"], data["gamma"], int(data["n_actions"]), data["r_max"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"malformed MDP document: {exc}") from exc
        if mdp.n_states != int(data["n_states"]):
            raise ConfigurationError("n_states does not match the rewards vector")
        return mdp

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_mdp(mdp: Mdp, path, extra: dict | None = None) -> None:
    doc = mdp.to_dict()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc) + "\n")


def load_mdp(path) -> tuple[Mdp, dict]:
    """Return the MDP and the raw document (which may carry sidecar keys)."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc
    return Mdp.from_dict(doc), doc


@dataclass(frozen=True, eq=False)
class DeterministicPolicy:
    actions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "actions", _frozen(self.actions, np.int64))

    def action_probs(self, n_actions: int) -> np.ndarray:
        out = np.zeros((self.actions.shape[0], n_actions))
        out[np.arange(self.actions.shape[0]), self.actions] = 1.0
        return out

    def __eq__(self, other):
        if not isinstance(other, DeterministicPolicy):
            return NotImplemented
        return np.array_equal(self.actions, other.actions)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class StochasticPolicy:
    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs, np.float64)
        if probs.ndim != 2:
            raise ConfigurationError("action probabilities must be (n_states, n_actions)")
        if np.any(probs < 0.0) or np.max(np.abs(probs.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise ConfigurationError("each state's action distribution must be a probability vector")
        object.__setattr__(self, "probs", probs)

    def action_probs(self, n_actions: int) -> np.ndarray:
        return np.array(self.probs)


@dataclass(frozen=True)
class NonStationaryPolicy:
    """``stages[0]`` acts first; the empty tuple is the empty policy."""

    stages: tuple = field(default_factory=tuple)

    def prepend(self, pi: DeterministicPolicy) -> "NonStationaryPolicy":
        return NonStationaryPolicy((pi,) + tuple(self.stages))

    def __len__(self):
        return len(self.stages)


Policy = Union[DeterministicPolicy, StochasticPolicy]


@dataclass(frozen=True, eq=False)
class OptimalSolution:
    v_star: np.ndarray
    pi_star: DeterministicPolicy
    iterations: int


def _check_policy(mdp: Mdp, policy) -> None:
    if isinstance(policy, DeterministicPolicy):
        if policy.actions.shape != (mdp.n_states,):
            raise ConfigurationError("policy has the wrong number of states")
        if policy.actions.min() < 0 or policy.actions.max() >= mdp.n_actions:
            raise ConfigurationError("policy action out of range")
    elif isinstance(policy, StochasticPolicy):
        if policy.probs.shape != (mdp.n_states, mdp.n_actions):
            raise ConfigurationError("stochastic policy shape does not match the MDP")
    else:
        raise ConfigurationError(f"not a policy: {type(policy).__name__}")


def _check_vector(mdp: Mdp, v, name="value function") -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (mdp.n_states,):
        raise ConfigurationError(f"{name} must have shape ({mdp.n_states},), got {v.shape}")
    return v


def as_distribution(x, n_states: int | None = None, name: str = "distribution") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or (n_states is not None and x.shape[0] != n_states):
        raise ConfigurationError(f"{name} must be a vector over {n_states} states")
    if np.any(x < 0.0) or abs(x.sum() - 1.0) > ROW_SUM_TOL:
        raise ConfigurationError(f"{name} must be nonnegative and sum to 1")
    return x


def policy_kernel(mdp: Mdp, policy: Policy) -> np.ndarray:
    """State-to-state kernel ``P_pi`` as a dense matrix."""
    _check_policy(mdp, policy)
    weights = policy.action_probs(mdp.n_actions)
    return _kernels.dense_kernel(mdp.succ, mdp.prob, weights, mdp.n_states)


def q_values(mdp: Mdp, v) -> np.ndarray:
    """``Q[s, a] = r(s) + gamma * sum_s' P(s'|s,a) v(s')``."""
    v = _check_vector(mdp, v)
    return mdp.rewards[:, None] + mdp.gamma * _kernels.expected_next(mdp.succ, mdp.prob, v)


def bellman_apply(mdp: Mdp, policy: Policy, v) -> np.ndarray:
    """``T_pi v = r + gamma P_pi v``."""
    _check_policy(mdp, policy)
    nxt = _kernels.expected_next(mdp.succ, mdp.prob, _check_vector(mdp, v))
    if isinstance(policy, DeterministicPolicy):
        follow = nxt[np.arange(mdp.n_states), policy.actions]
    else:
        follow = (policy.probs * nxt).sum(axis=1)
    return mdp.rewards + mdp.gamma * follow


def exact_greedy(mdp: Mdp, v) -> tuple[DeterministicPolicy, np.ndarray]:
    """Greedy policy (lowest action index on ties) and ``T v``."""
    q = q_values(mdp, v)
    actions = np.argmax(q, axis=1)
    return DeterministicPolicy(actions), q[np.arange(mdp.n_states), actions]


class _Solver:
    """LU factorization of ``I - gamma P_pi`` shared by value and occupancy solves."""

    def __init__(self, mdp: Mdp, policy: Policy):
        self.mdp = mdp
        self.kernel = policy_kernel(mdp, policy)
        self.system = np.eye(mdp.n_states) - mdp.gamma * self.kernel
        self.lu = linalg.lu_factor(self.system, check_finite=False)

    def _solve(self, rhs, trans):
        mat = self.system.T if trans else self.system
        x = linalg.lu_solve(self.lu, rhs, trans=trans, check_finite=False)
        resid = mat @ x - rhs
        if np.max(np.abs(resid)) > RESIDUAL_TOL:
            x = x - linalg.lu_solve(self.lu, resid, trans=trans, check_finite=False)
            resid = mat @ x - rhs
            if np.max(np.abs(resid)) > RESIDUAL_TOL:
                raise NumericalInvariantError(
                    f"linear solve residual {np.max(np.abs(resid)):.3e} exceeds {RESIDUAL_TOL}"
                )
        return x

    def value(self) -> np.ndarray:
        return self._solve(self.mdp.rewards, trans=0)

    def occupancy(self, nu) -> np.ndarray:
        nu = as_distribution(nu, self.mdp.n_states, "nu")
        d = (1.0 - self.mdp.gamma) * self._solve(nu, trans=1)
        if d.min() < -CLAMP_TOL:
            raise NumericalInvariantError(f"occupancy entry {d.min():.3e} is negative")
        d = np.maximum(d, 0.0)
        if abs(d.sum() - 1.0) > RESIDUAL_TOL:
            raise NumericalInvariantError(f"occupancy sums to {d.sum()!r}")
        # the solve leaves O(cond * eps) mass error; renormalize so d is a distribution
        return d / d.sum()


def policy_value(mdp: Mdp, policy: Policy) -> np.ndarray:
    """Solve ``(I - gamma P_pi) v = r``."""
    return _Solver(mdp, policy).value()


def discounted_occupancy(mdp: Mdp, policy: Policy, nu) -> np.ndarray:
    """``d = (1 - gamma) nu (I - gamma P_pi)^-1`` via a transposed solve."""
    return _Solver(mdp, policy).occupancy(nu)


def nonstationary_value(mdp: Mdp, sigma: NonStationaryPolicy) -> np.ndarray:
    """``v_sigma = T_pi1 T_pi2 ... T_pik r``; the empty policy has value ``r``."""
    v = np.array(mdp.rewards)
    for pi in reversed(sigma.stages):
        v = bellman_apply(mdp, pi, v)
    return v


def optimal_solve(mdp: Mdp) -> OptimalSolution:
    """Exact policy iteration from the all-zero policy."""
    pi = DeterministicPolicy(np.zeros(mdp.n_states, dtype=np.int64))
    cap = mdp.n_states * mdp.n_actions + 10
    for it in range(1, cap + 1):
        v = policy_value(mdp, pi)
        new_pi, tv = exact_greedy(mdp, v)
        if new_pi == pi or np.max(np.abs(tv - v)) <= RESIDUAL_TOL:
            return OptimalSolution(v, pi, it)
        pi = new_pi
    raise NumericalInvariantError(f"policy iteration did not terminate within {cap} iterations")


def expected_loss(mu, v_star, v) -> float:
    """``mu (v* - v)``."""
    mu = np.asarray(mu, dtype=float)
    return float(mu @ (np.asarray(v_star, dtype=float) - np.asarray(v, dtype=float)))


def mix_policies(a: Policy, b: Policy, alpha: float, n_actions: int | None = None) -> StochasticPolicy:
    """``(1 - alpha) a + alpha b`` as a per-state action distribution.

    ``n_actions`` is only needed when both inputs are deterministic and the
    highest action index is never used by either.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"mixture weight must lie in [0, 1], got {alpha}")
    if n_actions is None:
        n_actions = _n_actions_of(a, b)
    pa = a.action_probs(n_actions)
    pb = b.action_probs(n_actions)
    if pa.shape != pb.shape:
        raise ConfigurationError("policies cover different state spaces")
    return StochasticPolicy((1.0 - alpha) * pa + alpha * pb)


def _n_actions_of(*policies) -> int:
    for p in policies:
        if isinstance(p, StochasticPolicy):
            return p.probs.shape[1]
    return int(max(int(p.actions.max()) for p in policies)) + 1


def uniform(n_states: int) -> np.ndarray:
    return np.full(n_states, 1.0 / n_states)


def policy_to_json(policy) -> dict:
    if isinstance(policy, DeterministicPolicy):
        return {"kind": "deterministic", "actions": [int(a) for a in policy.actions]}
    if isinstance(policy, StochasticPolicy):
        return {"kind": "stochastic", "action_probs": policy.probs.tolist()}
    if isinstance(policy, NonStationaryPolicy):
        return {"kind": "nonstationary", "stages": [[int(a) for a in p.actions] for p in policy.stages]}
    raise ConfigurationError(f"not a policy: {type(policy).__name__}")


def policy_from_json(doc: dict):
    kind = doc.get("kind")
    if kind == "deterministic":
        return DeterministicPolicy(doc["actions"])
    if kind == "stochastic":
        return StochasticPolicy(doc["action_probs"])
    if kind == "nonstationary":
        return NonStationaryPolicy(tuple(DeterministicPolicy(s) for s in doc["stages"]))
    raise ConfigurationError(f"unknown policy kind {kind!r}")


def policy_loss(mdp: Mdp, mu, v_star, policy) -> float:
    """Exact loss of any policy kind; non-stationary policies use ``v_sigma``."""
    if isinstance(policy, NonStationaryPolicy):
        v = nonstationary_value(mdp, policy)
    else:
        v = policy_value(mdp, policy)
    return expected_loss(mu, v_star, v)


__all__ = [
    "Mdp", "DeterministicPolicy", "StochasticPolicy", "NonStationaryPolicy", "OptimalSolution",
    "policy_kernel", "q_values", "bellman_apply", "exact_greedy", "policy_value",
    "discounted_occupancy", "nonstationary_value", "optimal_solve", "expected_loss",
    "mix_policies", "as_distribution", "uniform", "save_mdp", "load_mdp",
]
