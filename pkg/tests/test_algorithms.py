import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from apilab.algorithms import (
    CpiConfig,
    cpi_step_size,
    default_max_iters,
    estimate_advantage,
    k_dagger,
    run_algorithm,
    run_cpi,
    run_cpi_alpha,
    run_cpi_plus,
    run_dpi,
    run_nsdpi,
    stop_bound,
)
from apilab.cli import main
from apilab.errors import ConfigurationError, NumericalInvariantError
from apilab.garnet import GarnetParams, generate_garnet
from apilab.greedy import GreedyConfig, approx_greedy
from apilab.mdp import (
    DeterministicPolicy,
    discounted_occupancy,
    mix_policies,
    optimal_solve,
    policy_value,
    uniform,
)
from apilab.trace import IterationRecord, read_trace, trace_csv, write_trace

GOLDEN = Path(__file__).parent / "golden"
EXACT = GreedyConfig()
NOISY = GreedyConfig(n_coeffs=3, noise=0.05, seed=11)


def golden_args(alg, out):
    return ["run", "--garnet", "G(30,4,2,3)", "--seed", "7", "--gamma", "0.95", "--alg", alg,
            "--iters", "30", "--alpha", "0.1", "--n-coeffs", "3", "--noise", "0.05",
            "--run-seed", "11", "--out", str(out)]


class TestStepSize:
    def test_hand_value(self):
        assert cpi_step_size(1.0, 0.3, 0.99, 100.0) == pytest.approx(0.01 * 0.9 / 396, rel=1e-12)
        assert cpi_step_size(1.0, 0.3, 0.99, 100.0) == pytest.approx(2.2727e-5, rel=1e-4)

    def test_clamps_to_one(self):
        gamma, v_max, rho = 0.9, 10.0, 0.3
        boundary = rho / 3 + 4 * gamma * v_max / (1 - gamma)
        assert cpi_step_size(boundary, rho, gamma, v_max) == pytest.approx(1.0)
        assert cpi_step_size(10 * boundary, rho, gamma, v_max) == 1.0

    def test_positive_above_threshold(self):
        assert cpi_step_size(0.1 + 1e-9, 0.3, 0.9, 10.0) > 0.0

    def test_nonpositive_step_is_an_invariant_violation(self):
        with pytest.raises(NumericalInvariantError):
            cpi_step_size(0.05, 0.3, 0.9, 10.0)

    def test_stop_bound(self):
        assert stop_bound(0.3, 0.99, 100.0) == pytest.approx(72 * 0.99 * 1e4 / 0.09)
        assert default_max_iters(1.0, 0.5, 2.0) == 10 * math.ceil(72 * 0.5 * 4)


class TestAdvantage:
    def test_same_policy_has_zero_advantage(self, garnet):
        mdp, _, nu = garnet()
        pi = DeterministicPolicy(np.arange(mdp.n_states) % mdp.n_actions)
        hat, true = estimate_advantage(mdp, pi, pi, nu)
        assert hat == true and abs(true) <= 1e-12

    def test_single_action(self, cycle):
        assert estimate_advantage(cycle, DeterministicPolicy([0, 0]), DeterministicPolicy([0, 0]),
                                  uniform(2)) == (0.0, 0.0)

    def test_two_state_hand_example(self, choice):
        """Staying forever gives v = [0, 2] and occupancy = nu; moving gains 1 at state 0."""
        stay, greedy = DeterministicPolicy([0, 0]), DeterministicPolicy([1, 0])
        assert np.allclose(policy_value(choice, stay), [0.0, 2.0])
        assert np.allclose(discounted_occupancy(choice, stay, [0.5, 0.5]), [0.5, 0.5])
        hat, true = estimate_advantage(choice, stay, greedy, [0.5, 0.5])
        assert true == pytest.approx(0.5, abs=1e-15) and hat == true

    def test_noisy_mode_stays_within_rho_over_three(self, choice):
        stay, greedy = DeterministicPolicy([0, 0]), DeterministicPolicy([1, 0])
        for call in range(50):
            hat, true = estimate_advantage(choice, stay, greedy, [0.5, 0.5], "noisy", rho=0.3, call_id=call)
            assert abs(hat - true) <= 0.1

    def test_noisy_needs_rho(self, choice):
        with pytest.raises(ConfigurationError):
            estimate_advantage(choice, DeterministicPolicy([0, 0]), DeterministicPolicy([0, 0]),
                               [0.5, 0.5], "noisy")


class TestDpi:
    def test_exact_run_is_policy_iteration(self, garnet):
        mdp, mu, nu = garnet(ns=20, na=3, b=3)
        trace = run_dpi(mdp, nu, mu, None, mdp.n_states * mdp.n_actions, EXACT)
        assert trace.final_loss < 1e-8
        assert all(r.epsilon == 0.0 and r.alpha == 1.0 for r in trace.records[:-1])

    def test_exact_losses_are_geometric(self, garnet):
        mdp, mu, nu = garnet(ns=20)
        trace = run_dpi(mdp, nu, mu, None, 10, EXACT)
        for rec in trace.records:
            assert rec.loss <= mdp.gamma**rec.k * mdp.v_max + 1e-12

    def test_runs_exactly_k_iterations(self, garnet):
        mdp, mu, nu = garnet()
        trace = run_dpi(mdp, nu, mu, None, 7, NOISY)
        assert [r.k for r in trace.records] == list(range(8))
        assert trace.records[-1].epsilon is None and trace.stop_iteration is None

    def test_k_must_be_positive(self, garnet):
        mdp, mu, nu = garnet()
        with pytest.raises(ConfigurationError):
            run_dpi(mdp, nu, mu, None, 0, EXACT)


class TestCpi:
    def test_optimal_start_stops_immediately(self, garnet):
        mdp, mu, nu = garnet()
        pi_star = optimal_solve(mdp).pi_star
        trace = run_cpi(mdp, nu, mu, pi_star, CpiConfig(rho=0.1), EXACT)
        assert trace.stop_iteration == 0 and len(trace.records) == 1
        assert trace.records[0].loss <= 1e-10

    def test_eta_increases_by_the_guaranteed_margin(self):
        mdp, _ = generate_garnet(GarnetParams(10, 2, 2, 1, seed=3), gamma=0.8)
        rho = 0.5
        trace = run_cpi(mdp, uniform(10), uniform(10), None, CpiConfig(rho=rho), EXACT)
        assert trace.stop_iteration is not None
        assert trace.stop_iteration <= math.ceil(stop_bound(rho, mdp.gamma, mdp.v_max))
        margin = rho**2 / (72 * mdp.gamma * mdp.v_max)
        etas = [r.eta for r in trace.records]
        assert all(b - a > margin for a, b in zip(etas, etas[1:]))
        assert all(eta <= mdp.v_max for eta in etas)

    def test_greedy_uses_the_occupancy_of_the_current_policy(self, garnet):
        mdp, mu, nu = garnet(ns=12)
        trace = run_cpi_alpha(mdp, nu, mu, None, 0.5, 1, NOISY)
        pi0 = DeterministicPolicy(np.zeros(12, dtype=int))
        d = discounted_occupancy(mdp, pi0, nu)
        _, meas = approx_greedy(mdp, d, policy_value(mdp, pi0), NOISY, call_id=0)
        assert trace.records[0].epsilon == meas.epsilon

    def test_unit_step_takes_the_greedy_policy(self, garnet):
        mdp, mu, nu = garnet(ns=12)
        trace = run_cpi_alpha(mdp, nu, mu, None, 1.0, 1, NOISY)
        pi0 = DeterministicPolicy(np.zeros(12, dtype=int))
        d = discounted_occupancy(mdp, pi0, nu)
        pi1, _ = approx_greedy(mdp, d, policy_value(mdp, pi0), NOISY, call_id=0)
        assert np.array_equal(trace.final_policy.probs, pi1.action_probs(mdp.n_actions))

    def test_fixed_step_runs_k_iterations(self, garnet):
        mdp, mu, nu = garnet()
        trace = run_cpi_alpha(mdp, nu, mu, None, 0.1, 5, NOISY)
        assert len(trace.records) == 6 and trace.stop_iteration is None
        assert all(r.alpha == 0.1 for r in trace.records[:-1])

    @pytest.mark.parametrize("alpha", [0.0, 1.5])
    def test_fixed_step_range(self, garnet, alpha):
        mdp, mu, nu = garnet()
        with pytest.raises(ConfigurationError):
            run_cpi_alpha(mdp, nu, mu, None, alpha, 5, EXACT)

    def test_max_iters_cap_records_no_stop(self, garnet):
        mdp, mu, nu = garnet()
        trace = run_cpi(mdp, nu, mu, None, CpiConfig(rho=1e-6, max_iters=3), EXACT)
        assert trace.stop_iteration is None and len(trace.records) == 4

    def test_noisy_advantage_recorded(self, garnet):
        mdp, mu, nu = garnet()
        trace = run_cpi(mdp, nu, mu, None, CpiConfig(rho=0.3, advantage_mode="noisy", max_iters=5), NOISY)
        for rec in trace.records:
            assert abs(rec.advantage_hat - rec.advantage_true) <= 0.1

    @pytest.mark.parametrize("kwargs", [{"rho": 0.0}, {"rho": 1.0, "advantage_mode": "guess"},
                                        {"rho": 1.0, "step_mode": "fixed"}, {"rho": 1.0, "max_iters": -1}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigurationError):
            CpiConfig(**kwargs)


class TestCpiPlus:
    def test_line_search_never_below_base_step(self, garnet):
        mdp, mu, nu = garnet(ns=15, gamma=0.9)
        rho = 0.05
        trace = run_cpi_plus(mdp, nu, mu, None, rho, 10, NOISY)
        pi = DeterministicPolicy(np.zeros(15, dtype=int))
        for rec in trace.records:
            if rec.alpha is None:
                break
            base = cpi_step_size(rec.advantage_hat, rho, mdp.gamma, mdp.v_max)
            assert rec.alpha >= base
            d = discounted_occupancy(mdp, pi, nu)
            pi_prime, _ = approx_greedy(mdp, d, policy_value(mdp, pi), NOISY, call_id=rec.k)
            eta_base = nu @ policy_value(mdp, mix_policies(pi, pi_prime, base, mdp.n_actions))
            pi = mix_policies(pi, pi_prime, rec.alpha, mdp.n_actions)
            assert nu @ policy_value(mdp, pi) >= eta_base - 1e-12

    def test_optimal_start(self, garnet):
        mdp, mu, nu = garnet()
        trace = run_cpi_plus(mdp, nu, mu, optimal_solve(mdp).pi_star, 0.01, 30, NOISY)
        assert trace.stop_iteration == 0

    def test_stops_quickly_on_deterministic_garnets(self):
        stops = []
        for seed in range(10):
            mdp, _ = generate_garnet(GarnetParams(50, 5, 1, 5, seed=seed), gamma=0.99)
            cfg = GreedyConfig(n_coeffs=5, noise=0.05, seed=seed)
            trace = run_cpi_plus(mdp, uniform(50), uniform(50), None, 0.01, 200, cfg)
            stops.append(trace.stop_iteration)
        assert None not in stops
        assert np.mean(np.array(stops) < 20) >= 0.9


class TestNsdpi:
    def test_first_loss_uses_rewards(self, garnet):
        mdp, mu, nu = garnet()
        v_star = optimal_solve(mdp).v_star
        trace = run_nsdpi(mdp, nu, mu, 3, NOISY)
        assert trace.records[0].loss == pytest.approx(float(mu @ (v_star - mdp.rewards)), abs=1e-14)
        assert trace.records[0].loss_conservative == pytest.approx(trace.records[0].loss + mdp.v_max)

    def test_exact_run_bound(self, garnet):
        mdp, mu, nu = garnet()
        trace = run_nsdpi(mdp, nu, mu, 40, EXACT)
        for rec in trace.records:
            assert rec.loss_conservative <= 2 * mdp.gamma**rec.k * mdp.v_max + 1e-12
        assert len(trace.final_policy) == 40


class TestTraces:
    def test_k_dagger(self):
        recs = [IterationRecord(k, 0.0, epsilon=0.5, alpha=1.0) for k in range(5)]
        # threshold log(10 / 0.5) / 0.5 = 5.99
        assert k_dagger(recs, 0.5, 10.0) is None
        recs += [IterationRecord(5, 0.0, epsilon=0.5, alpha=1.0)]
        assert k_dagger(recs, 0.5, 10.0) == 6

    def test_round_trip(self, tmp_path, garnet):
        mdp, mu, nu = garnet()
        trace = run_cpi(mdp, nu, mu, None, CpiConfig(rho=0.3, max_iters=4), NOISY)
        write_trace(trace, tmp_path / "t.csv")
        again = read_trace(tmp_path / "t.csv")
        assert trace_csv([again]) == trace_csv([trace])
        assert again.stop_iteration == trace.stop_iteration
        na = mdp.n_actions
        assert np.array_equal(again.final_policy.action_probs(na), trace.final_policy.action_probs(na))

    def test_determinism(self, garnet):
        mdp, mu, nu = garnet()
        a = run_algorithm("cpi-plus", mdp, nu, mu, NOISY, iters=10, rho=0.01)
        b = run_algorithm("cpi-plus", mdp, nu, mu, NOISY, iters=10, rho=0.01)
        assert trace_csv([a]) == trace_csv([b])

    def test_unknown_algorithm(self, garnet):
        mdp, mu, nu = garnet()
        with pytest.raises(ConfigurationError):
            run_algorithm("sarsa", mdp, nu, mu, EXACT, iters=3)

    def test_cpi_needs_rho(self, garnet):
        mdp, mu, nu = garnet()
        with pytest.raises(ConfigurationError):
            run_algorithm("cpi", mdp, nu, mu, EXACT, iters=3)


class TestGolden:
    @pytest.mark.parametrize("alg", ["dpi", "cpi-alpha", "nsdpi"])
    def test_byte_equality(self, tmp_path, alg, capsys):
        out = tmp_path / f"{alg}.csv"
        assert main(golden_args(alg, out)) == 0
        assert out.read_bytes() == (GOLDEN / f"{alg}.csv").read_bytes()
        assert (tmp_path / f"{alg}.meta.json").read_bytes() == (GOLDEN / f"{alg}.meta.json").read_bytes()

    def test_numpy_backend_reproduces_golden(self, tmp_path):
        env = dict(os.environ, APILAB_DISABLE_NUMBA="1")
        out = tmp_path / "dpi.csv"
        subprocess.run([sys.executable, "-m", "apilab", *golden_args("dpi", out)],
                       env=env, check=True, capture_output=True, cwd=tmp_path)
        assert out.read_bytes() == (GOLDEN / "dpi.csv").read_bytes()
