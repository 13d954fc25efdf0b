"""Approximate greedy operator: exact greedy on a noisy, projected value.

One call computes ``greedy(project_nu(v + noise))`` and measures the error
it actually achieved, ``nu (T v - T_pi v)``, against the un-noised input.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError
from .mdp import DeterministicPolicy, Mdp, as_distribution, exact_greedy, q_values
from .seeding import stream

BASES = ("fourier", "random_features", "identity")
NOISE_MODES = ("relative", "absolute")


class RankDeficientBasisWarning(RuntimeWarning):
    """Trailing basis columns were dropped to make the weighted system full rank."""


@dataclass(frozen=True)
class GreedyConfig:
    """Fidelity knobs of the approximate greedy operator.

    ``n_coeffs=None`` means a full basis (``n_states`` columns, or every
    feature column for ``random_features``). With the
    default relative mode, noise is uniform in ``[-noise * span(v), noise * span(v)]``.
    """

    basis: str = "fourier"
    n_coeffs: int | None = None
    noise: float = 0.0
    noise_mode: str = "relative"
    seed: int = 0
    features: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.basis not in BASES:
            raise ConfigurationError(f"basis must be one of {BASES}, got {self.basis!r}")
        if self.noise_mode not in NOISE_MODES:
            raise ConfigurationError(f"noise mode must be one of {NOISE_MODES}")
        if not self.noise >= 0.0:
            raise ConfigurationError("noise amplitude must be nonnegative")
        if self.n_coeffs is not None and self.n_coeffs < 1:
            raise ConfigurationError("n_coeffs must be at least 1")
        if self.basis == "random_features" and self.features is None:
            raise ConfigurationError("random_features basis needs the Garnet feature matrix")

    def basis_matrix(self, n_states: int) -> np.ndarray:
        full = n_states if self.basis != "random_features" else np.shape(self.features)[1]
        f = full if self.n_coeffs is None else self.n_coeffs
        if f > n_states:
            raise ConfigurationError(f"n_coeffs={f} exceeds n_states={n_states}")
        if self.basis == "fourier":
            return fourier_basis(n_states, f)
        if self.basis == "identity":
            return np.eye(n_states)[:, :f]
        feats = np.asarray(self.features, dtype=float)
        if feats.shape[0] != n_states or f > feats.shape[1]:
            raise ConfigurationError(
                f"feature matrix {feats.shape} cannot supply {f} columns over {n_states} states"
            )
        return feats[:, :f]

    def with_seed(self, seed: int) -> "GreedyConfig":
        return GreedyConfig(self.basis, self.n_coeffs, self.noise, self.noise_mode, seed, self.features)


@dataclass(frozen=True, eq=False)
class EpsilonMeasurement:
    epsilon: float
    error_vector: np.ndarray


@lru_cache(maxsize=64)
def _fourier(n_states: int, n_coeffs: int) -> np.ndarray:
    s = np.arange(n_states)[:, None] + 0.5
    j = np.arange(n_coeffs)[None, :]
    out = np.cos(np.pi * j * s / n_states)
    out.setflags(write=False)
    return out


def fourier_basis(n_states: int, n_coeffs: int) -> np.ndarray:
    """Cosine basis ``cos(pi j (s + 0.5) / n)`` for ``j < n_coeffs``; column 0 is constant."""
    if not 1 <= n_coeffs <= n_states:
        raise ConfigurationError(f"need 1 <= n_coeffs <= {n_states}, got {n_coeffs}")
    return _fourier(int(n_states), int(n_coeffs))


def project_weighted(v, basis, nu) -> np.ndarray:
    """Least-squares fit of ``v`` in the span of ``basis`` under weights ``nu``.

    States with zero weight do not enter the fit and receive the fitted
    basis value. Columns are dropped from the right until the weighted
    system has full column rank (with a :class:`RankDeficientBasisWarning`).
    """
    v = np.asarray(v, dtype=float)
    basis = np.asarray(basis, dtype=float)
    nu = as_distribution(nu, v.shape[0], "nu")
    if basis.ndim != 2 or basis.shape[0] != v.shape[0]:
        raise ConfigurationError("basis rows must match the value function")
    w = np.sqrt(nu)
    design = basis * w[:, None]
    target = v * w
    m = basis.shape[1]
    while True:
        coef, _, rank, _ = np.linalg.lstsq(design[:, :m], target, rcond=None)
        if rank == m:
            break
        m -= 1
    if m < basis.shape[1]:
        warnings.warn(
            f"weighted basis was rank deficient; kept {m} of {basis.shape[1]} columns",
            RankDeficientBasisWarning,
            stacklevel=2,
        )
    return basis[:, :m] @ coef


def measure_epsilon(mdp: Mdp, nu, v, pi: DeterministicPolicy) -> EpsilonMeasurement:
    """Exact greedy gap ``T v - T_pi v`` and its ``nu``-average."""
    nu = as_distribution(nu, mdp.n_states, "nu")
    q = q_values(mdp, v)
    gap = q.max(axis=1) - q[np.arange(mdp.n_states), pi.actions]
    return EpsilonMeasurement(float(nu @ gap), gap)


def draw_noise(v, cfg: GreedyConfig, call_id: int) -> np.ndarray:
    n = v.shape[0]
    if cfg.noise == 0.0:
        return np.zeros(n)
    scale = cfg.noise * (float(v.max() - v.min()) if cfg.noise_mode == "relative" else 1.0)
    u = stream(cfg.seed, "greedy/noise", call_id).uniform(-1.0, 1.0, size=n)
    return scale * u


def approx_greedy(mdp: Mdp, nu, v, cfg: GreedyConfig, call_id: int = 0):
    """Return ``(policy, EpsilonMeasurement)``.

    ``call_id`` selects the noise substream; callers running concurrently
    must hand out distinct ids (the algorithms use the iteration index).
    """
    v = np.asarray(v, dtype=float)
    nu = as_distribution(nu, mdp.n_states, "nu")
    estimate = v + draw_noise(v, cfg, call_id)
    basis = cfg.basis_matrix(mdp.n_states)
    # a full invertible basis with positive weights projects onto itself
    identity_projection = (
        cfg.basis != "random_features" and basis.shape[1] == mdp.n_states and np.all(nu > 0.0)
    )
    if not identity_projection:
        estimate = project_weighted(estimate, basis, nu)
    pi, _ = exact_greedy(mdp, estimate)
    return pi, measure_epsilon(mdp, nu, v, pi)
