import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apilab.errors import ConfigurationError
from apilab.garnet import (
    GarnetParams,
    cut_point_probabilities,
    default_distributions,
    garnet_document,
    generate_garnet,
)
from apilab.seeding import stream


class TestCutPoints:
    def test_gaps_between_cuts(self):
        assert np.allclose(cut_point_probabilities([0.7, 0.2]), [0.2, 0.5, 0.3], atol=1e-15)

    def test_no_cuts_is_a_point_mass(self):
        assert np.array_equal(cut_point_probabilities([]), [1.0])

    @given(st.lists(st.floats(0.0, 1.0), max_size=10))
    def test_masses_form_a_distribution(self, cuts):
        p = cut_point_probabilities(cuts)
        assert len(p) == len(cuts) + 1
        assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-12


class TestParams:
    def test_parse(self):
        p = GarnetParams.parse(" G( 50, 2 ,1,5) ", seed=9)
        assert (p.n_states, p.n_actions, p.branching, p.n_features, p.seed) == (50, 2, 1, 5, 9)
        assert p.label() == "G(50,2,1,5)"

    @pytest.mark.parametrize("text", ["G(5,2,1)", "garnet(5,2,1,1)", "G(5,2,-1,1)", ""])
    def test_parse_rejects(self, text):
        with pytest.raises(ConfigurationError):
            GarnetParams.parse(text)

    @pytest.mark.parametrize(
        "args", [(0, 1, 1, 1), (3, 0, 1, 1), (3, 2, 4, 1), (3, 2, 0, 1), (3, 2, 1, 4), (3, 2, 1, 0)]
    )
    def test_invalid_values(self, args):
        with pytest.raises(ConfigurationError):
            GarnetParams(*args)

    def test_negative_seed(self):
        with pytest.raises(ConfigurationError):
            GarnetParams(3, 2, 1, 1, seed=-1)


class TestGenerate:
    def test_same_seed_same_mdp(self):
        p = GarnetParams(30, 4, 3, 5, seed=123)
        (a, fa), (b, fb) = generate_garnet(p), generate_garnet(p)
        assert np.array_equal(a.succ, b.succ) and np.array_equal(a.prob, b.prob)
        assert np.array_equal(a.rewards, b.rewards) and np.array_equal(fa, fb)
        assert a.fingerprint() == b.fingerprint()

    def test_different_seed_different_mdp(self):
        a, _ = generate_garnet(GarnetParams(30, 4, 3, 5, seed=1))
        b, _ = generate_garnet(GarnetParams(30, 4, 3, 5, seed=2))
        assert a.fingerprint() != b.fingerprint()

    def test_branching_one_is_deterministic(self):
        mdp, _ = generate_garnet(GarnetParams(20, 3, 1, 1, seed=5))
        assert np.all(mdp.prob == 1.0)

    @settings(max_examples=30, deadline=None)
    @given(ns=st.integers(1, 25), na=st.integers(1, 4), b=st.integers(1, 25),
           p=st.integers(1, 25), seed=st.integers(0, 2**64 - 1))
    def test_structure(self, ns, na, b, p, seed):
        b, p = min(b, ns), min(p, ns)
        mdp, features = generate_garnet(GarnetParams(ns, na, b, p, seed=seed), gamma=0.9)
        assert mdp.succ.shape == (ns, na, b)
        for s in range(ns):
            for a in range(na):
                assert len(set(mdp.succ[s, a].tolist())) == b
                assert abs(mdp.prob[s, a].sum() - 1.0) <= 1e-12
        assert np.all((mdp.rewards >= 0) & (mdp.rewards < 1))
        assert features.shape == (ns, p)
        assert np.all((features >= 0) & (features < 1))

    def test_rows_come_from_independent_substreams(self):
        """Row (s, a) is reproducible on its own, whatever else was generated."""
        params = GarnetParams(12, 3, 4, 1, seed=77)
        mdp, _ = generate_garnet(params)
        for s, a in [(11, 2), (0, 0), (5, 1)]:
            rng = stream(77, "garnet/row", s, a)
            assert np.array_equal(mdp.succ[s, a], rng.choice(12, size=4, replace=False))
            assert np.array_equal(mdp.prob[s, a], cut_point_probabilities(rng.random(3)))

    def test_reward_stream_does_not_depend_on_size_of_transitions(self):
        a, _ = generate_garnet(GarnetParams(10, 2, 1, 1, seed=4))
        b, _ = generate_garnet(GarnetParams(10, 5, 7, 1, seed=4))
        assert np.array_equal(a.rewards, b.rewards)

    def test_default_distributions_uniform(self):
        mdp, _ = generate_garnet(GarnetParams(8, 2, 2, 1))
        mu, nu = default_distributions(mdp)
        assert np.array_equal(mu, np.full(8, 0.125)) and np.array_equal(nu, mu)

    def test_document_records_seed(self):
        params = GarnetParams(4, 2, 2, 3, seed=8)
        mdp, features = generate_garnet(params)
        doc = garnet_document(mdp, features, params)
        assert doc["garnet"] == {"params": "G(4,2,2,3)", "seed": 8}
        assert np.array_equal(np.asarray(doc["features"]), features)
