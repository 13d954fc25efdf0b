import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apilab import _kernels
from apilab.garnet import GarnetParams, generate_garnet

pytestmark = pytest.mark.skipif(_kernels.numba_kernels is None, reason="numba is not importable")


@st.composite
def problems(draw):
    ns = draw(st.integers(1, 12))
    na = draw(st.integers(1, 4))
    b = draw(st.integers(1, ns))
    mdp, _ = generate_garnet(GarnetParams(ns, na, b, 1, seed=draw(st.integers(0, 2**32))), gamma=0.9)
    rng = np.random.default_rng(draw(st.integers(0, 2**32)))
    return mdp, rng


class TestBackendsAgree:
    @settings(max_examples=50, deadline=None)
    @given(problems())
    def test_expected_next(self, problem):
        mdp, rng = problem
        v = rng.normal(size=mdp.n_states) * 100
        fast = _kernels.numba_kernels["expected_next"](mdp.succ, mdp.prob, v)
        slow = _kernels.numpy_kernels["expected_next"](mdp.succ, mdp.prob, v)
        assert np.array_equal(fast, slow)

    @settings(max_examples=50, deadline=None)
    @given(problems())
    def test_dense_kernel(self, problem):
        mdp, rng = problem
        w = rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
        fast = _kernels.numba_kernels["dense_kernel"](mdp.succ, mdp.prob, w, mdp.n_states)
        slow = _kernels.numpy_kernels["dense_kernel"](mdp.succ, mdp.prob, w, mdp.n_states)
        assert np.array_equal(fast, slow)

    @settings(max_examples=50, deadline=None)
    @given(problems(), st.integers(1, 5))
    def test_reach_step(self, problem, m):
        mdp, rng = problem
        h = rng.random((mdp.n_states, m))
        fast = _kernels.numba_kernels["reach_step"](mdp.succ, mdp.prob, h)
        slow = _kernels.numpy_kernels["reach_step"](mdp.succ, mdp.prob, h)
        assert np.array_equal(fast, slow)

    def test_dense_kernel_rows_sum_to_one(self):
        mdp, _ = generate_garnet(GarnetParams(20, 3, 4, 1, seed=2))
        w = np.full((20, 3), 1 / 3)
        kernel = _kernels.dense_kernel(mdp.succ, mdp.prob, w, 20)
        assert np.allclose(kernel.sum(axis=1), 1.0, atol=1e-14)


@pytest.mark.parametrize("flag,backend", [("1", "numpy"), ("", "numba")])
def test_environment_switch(flag, backend):
    env = dict(os.environ, APILAB_DISABLE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from apilab import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == backend
