import numpy as np
import pytest

from apilab.garnet import GarnetParams, default_distributions, generate_garnet
from apilab.mdp import Mdp


def make_mdp(rows, rewards, gamma, n_actions=1):
    return Mdp.from_rows(rows, rewards, gamma, n_actions)


@pytest.fixture
def cycle():
    """Single-action 2-cycle 0 -> 1 -> 0 with r = [1, 0], gamma = 0.5."""
    return make_mdp([[(1, 1.0)], [(0, 1.0)]], [1.0, 0.0], 0.5)


@pytest.fixture
def choice():
    """State 0: a0 stays, a1 moves to 1. State 1 absorbs under both actions. r = [0, 1], gamma = 0.5."""
    rows = [[(0, 1.0)], [(1, 1.0)], [(1, 1.0)], [(1, 1.0)]]
    return make_mdp(rows, [0.0, 1.0], 0.5, n_actions=2)


@pytest.fixture
def garnet():
    def build(ns=10, na=3, b=2, p=2, seed=0, gamma=0.95):
        mdp, features = generate_garnet(GarnetParams(ns, na, b, p, seed=seed), gamma=gamma)
        mu, nu = default_distributions(mdp)
        return mdp, mu, nu

    return build


def random_policy_probs(rng, n_states, n_actions):
    p = rng.random((n_states, n_actions)) + 1e-3
    return p / p.sum(axis=1, keepdims=True)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                lines.append((props["criterion"], outcome, props.get("detail", "")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, outcome, detail in sorted(lines):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {detail}")
