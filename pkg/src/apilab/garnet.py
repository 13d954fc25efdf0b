"""Random Garnet MDPs ``G(n_states, n_actions, branching, n_features)``."""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .mdp import Mdp, uniform
from .seeding import stream

_PARAMS_RE = re.compile(r"^\s*G\s*\(\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\)\s*$")


@dataclass(frozen=True)
class GarnetParams:
    n_states: int
    n_actions: int
    branching: int
    n_features: int
    seed: int = 0

    def __post_init__(self):
        if self.n_states < 1 or self.n_actions < 1:
            raise ConfigurationError("a Garnet needs at least one state and one action")
        if not 1 <= self.branching <= self.n_states:
            raise ConfigurationError(
                f"branching factor must lie in [1, {self.n_states}], got {self.branching}"
            )
        if not 1 <= self.n_features <= self.n_states:
            raise ConfigurationError(
                f"number of features must lie in [1, {self.n_states}], got {self.n_features}"
            )
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "GarnetParams":
        """Parse ``"G(ns,na,b,p)"``."""
        m = _PARAMS_RE.match(text)
        if m is None:
            raise ConfigurationError(f"expected G(ns,na,b,p), got {text!r}")
        return cls(*(int(g) for g in m.groups()), seed=seed)

    def label(self) -> str:
        return f"G({self.n_states},{self.n_actions},{self.branching},{self.n_features})"


def cut_point_probabilities(cuts) -> np.ndarray:
    """Gaps between sorted cut points in [0, 1]: ``b - 1`` cuts give ``b`` masses."""
    edges = np.concatenate(([0.0], np.sort(np.asarray(cuts, dtype=float)), [1.0]))
    return np.diff(edges)


def generate_garnet(params: GarnetParams, gamma: float = 0.99, r_max: float = 1.0):
    """Return ``(mdp, features)``, fully determined by ``params.seed``.

    Each (state, action) row draws from its own substream, so the rows do
    not depend on generation order.
    """
    ns, na, b = params.n_states, params.n_actions, params.branching
    succ = np.empty((ns, na, b), dtype=np.int64)
    prob = np.empty((ns, na, b))
    for s in range(ns):
        for a in range(na):
            rng = stream(params.seed, "garnet/row", s, a)
            succ[s, a] = rng.choice(ns, size=b, replace=False)
            prob[s, a] = cut_point_probabilities(rng.random(b - 1))
    rewards = stream(params.seed, "garnet/rewards").random(ns)
    features = stream(params.seed, "garnet/features").random((ns, params.n_features))
    return Mdp(succ, prob, rewards, gamma, r_max), features


def default_distributions(mdp: Mdp) -> tuple[np.ndarray, np.ndarray]:
    """Uniform ``mu`` and ``nu``."""
    return uniform(mdp.n_states), uniform(mdp.n_states)


def garnet_document(mdp: Mdp, features, params: GarnetParams) -> dict:
    """Sidecar keys written next to the MDP document."""
    return {
        "features": np.asarray(features).tolist(),
        "garnet": {
            "params": params.label(),
            "seed": params.seed,
        },
    }
