"""Hot inner loops over the padded sparse transition layout.

Transitions are stored as two ``(n_states, n_actions, width)`` arrays:
``succ`` (successor indices) and ``prob`` (probabilities, zero padding).
Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version. Both accumulate over the successor axis in the same sequential
order so that they agree bit for bit on the same inputs.

Set ``APILAB_DISABLE_NUMBA=1`` to force the numpy path (it is also used
when numba cannot be imported).
"""
from __future__ import annotations

import os

import numpy as np


def _numpy_expected_next(succ, prob, v):
    acc = prob[:, :, 0] * v[succ[:, :, 0]]
    for j in range(1, succ.shape[2]):
        acc += prob[:, :, j] * v[succ[:, :, j]]
    return acc


def _numpy_dense_kernel(succ, prob, weights, n_states):
    out = np.zeros((n_states, n_states))
    rows = np.arange(succ.shape[0])
    for a in range(succ.shape[1]):
        for j in range(succ.shape[2]):
            np.add.at(out, (rows, succ[:, a, j]), weights[:, a] * prob[:, a, j])
    return out


def _numpy_reach_step(succ, prob, h):
    n_states, n_actions, width = succ.shape
    best = None
    for a in range(n_actions):
        acc = prob[:, a, 0, None] * h[succ[:, a, 0]]
        for j in range(1, width):
            acc += prob[:, a, j, None] * h[succ[:, a, j]]
        best = acc if best is None else np.maximum(best, acc)
    return best


numpy_kernels = {
    "expected_next": _numpy_expected_next,
    "dense_kernel": _numpy_dense_kernel,
    "reach_step": _numpy_reach_step,
}

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

numba_kernels = None
if njit is not None:

    @njit(cache=True)
    def _numba_expected_next(succ, prob, v):
        n_states, n_actions, width = succ.shape
        out = np.empty((n_states, n_actions))
        for s in range(n_states):
            for a in range(n_actions):
                acc = 0.0
                for j in range(width):
                    acc += prob[s, a, j] * v[succ[s, a, j]]
                out[s, a] = acc
        return out

    @njit(cache=True)
    def _numba_dense_kernel(succ, prob, weights, n_states):
        out = np.zeros((n_states, n_states))
        n_rows, n_actions, width = succ.shape
        for a in range(n_actions):
            for j in range(width):
                for s in range(n_rows):
                    out[s, succ[s, a, j]] += weights[s, a] * prob[s, a, j]
        return out

    @njit(cache=True)
    def _numba_reach_step(succ, prob, h):
        n_states, n_actions, width = succ.shape
        m = h.shape[1]
        out = np.empty((n_states, m))
        acc = np.empty(m)
        for s in range(n_states):
            for a in range(n_actions):
                for t in range(m):
                    acc[t] = prob[s, a, 0] * h[succ[s, a, 0], t]
                for j in range(1, width):
                    p = prob[s, a, j]
                    row = succ[s, a, j]
                    for t in range(m):
                        acc[t] += p * h[row, t]
                if a == 0:
                    for t in range(m):
                        out[s, t] = acc[t]
                else:
                    for t in range(m):
                        if acc[t] > out[s, t]:
                            out[s, t] = acc[t]
        return out

    numba_kernels = {
        "expected_next": _numba_expected_next,
        "dense_kernel": _numba_dense_kernel,
        "reach_step": _numba_reach_step,
    }

_disabled = os.environ.get("APILAB_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}
BACKEND = "numpy" if (_disabled or numba_kernels is None) else "numba"
_active = numpy_kernels if BACKEND == "numpy" else numba_kernels


def expected_next(succ, prob, v):
    """``out[s, a] = sum_j prob[s, a, j] * v[succ[s, a, j]]``."""
    return _active["expected_next"](succ, prob, np.ascontiguousarray(v, dtype=np.float64))


def dense_kernel(succ, prob, weights, n_states):
    """Dense ``n_states x n_states`` kernel of an action-weighted policy."""
    return _active["dense_kernel"](succ, prob, np.ascontiguousarray(weights, dtype=np.float64), n_states)


def reach_step(succ, prob, h):
    """One max-backup of a batch of columns: ``max_a P_a h``."""
    return _active["reach_step"](succ, prob, np.ascontiguousarray(h, dtype=np.float64))
