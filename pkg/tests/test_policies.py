"""Feature extraction, energy policy, greedy baseline, and policy-gradient
training.

Feature values and the greedy choice are checked against plain-float Bayes
enumerations written out longhand. The training checks compare exact policy
values (computed by a recursive evaluator over the answer tree) against an
exhaustive expectimax optimum, both local to this file.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import TABLE_KB

from raredx.env import (
    EnvModel,
    KnowledgeState,
    TaskSeed,
    expected_posterior_entropy,
    posterior,
)
from raredx.errors import ConvergenceError, ValidationError
from raredx.kb import validate_kb
from raredx.maxent import JointTable
from raredx.policies import (
    EnergyPolicy,
    FeatureTriple,
    energy_action_probs,
    energy_policy,
    features,
    greedy_entropy_action,
    greedy_entropy_policy,
    random_policy,
    reinforce_train,
    stable_softmax,
)

NTP = 1e-5

PRIORS = {"d1": 0.042, "d2": 0.0083, "d3": 0.0083}
TYPICALS = {
    "d1": {"s1": 0.50, "s2": 0.55, "s3": 0.50, "s5": 0.90, "s8": 0.50, "s9": 0.50},
    "d2": {"s6": 0.90, "s7": 0.50, "s9": 0.90},
    "d3": {"s2": 0.90, "s4": 0.90, "s6": 0.50, "s9": 0.50},
}


def table_env():
    return EnvModel.independence(validate_kb(TABLE_KB), "s9")


def hand_masses(state_codes):
    """Unnormalized hypothesis masses for the three-disease reference task
    given {code: 0/1} evidence, written as plain products."""
    masses = {}
    for d, pri in PRIORS.items():
        v = pri
        for c, val in state_codes.items():
            p = TYPICALS[d].get(c, NTP)
            v *= p if val else 1.0 - p
        masses[d] = v
    v = 1.0 - sum(PRIORS.values())
    for c, val in state_codes.items():
        v *= NTP if val else 1.0 - NTP
    masses["other"] = v
    return masses


def hand_entropy(masses):
    tot = sum(masses.values())
    return -sum(v / tot * math.log(v / tot) for v in masses.values() if v > 0)


def hand_triple(evidence, code):
    """Independent feature computation: info gain, answer probability, and
    membership in the top hypothesis's typical set."""
    masses = hand_masses(evidence)
    tot = sum(masses.values())
    h = hand_entropy(masses)
    cond = {d: TYPICALS.get(d, {}).get(code, NTP) for d in masses}
    p1 = sum(masses[d] / tot * cond[d] for d in masses)
    m1 = {d: masses[d] * cond[d] for d in masses}
    m0 = {d: masses[d] * (1.0 - cond[d]) for d in masses}
    gain = h - (p1 * hand_entropy(m1) + (1.0 - p1) * hand_entropy(m0))
    top = min(masses, key=lambda d: (-masses[d], d))
    member = 1.0 if code in TYPICALS.get(top, {}) else 0.0
    return gain, p1, member


class TestFeatures:
    def test_root_marker_triple_matches_enumeration(self):
        m = table_env()
        s = KnowledgeState.initial(8)
        tr = features(m, s, m.index_of("s5"))
        gain, p1, member = hand_triple({"s9": 1}, "s5")
        assert tr.info_gain == pytest.approx(gain, abs=1e-12)
        assert tr.p_positive == pytest.approx(p1, abs=1e-12)
        assert tr.in_top_disease == member == 1.0

    def test_membership_follows_the_posterior_leader(self):
        m = table_env()
        s = KnowledgeState.initial(8)
        # at the root the leader is d1, so its markers are in, d3's are out
        assert features(m, s, m.index_of("s5")).in_top_disease == 1.0
        assert features(m, s, m.index_of("s4")).in_top_disease == 0.0
        # a positive s6 flips the leader to d2
        s2 = s.observe(m.index_of("s6"), True)
        assert posterior(m, s2).top()[0] == "d2"
        assert features(m, s2, m.index_of("s7")).in_top_disease == 1.0
        assert features(m, s2, m.index_of("s5")).in_top_disease == 0.0

    def test_triple_along_an_answered_state(self):
        m = table_env()
        s = KnowledgeState.initial(8).observe(m.index_of("s6"), True)
        s = s.observe(m.index_of("s2"), False)
        for code in ("s4", "s7"):
            tr = features(m, s, m.index_of(code))
            gain, p1, member = hand_triple({"s9": 1, "s6": 1, "s2": 0}, code)
            assert tr.info_gain == pytest.approx(gain, abs=1e-12)
            assert tr.p_positive == pytest.approx(p1, abs=1e-12)
            assert tr.in_top_disease == member

    def test_uninformative_action_has_zero_gain(self):
        model_a = JointTable.from_independent_marginals("da", ("x", "y"), {"x": 0.9, "y": 0.5})
        model_b = JointTable.from_independent_marginals("db", ("x", "y"), {"x": 0.4, "y": 0.5})
        m = EnvModel(
            task=TaskSeed(initial="x", diseases=("da", "db"), relevant=("y",)),
            codes=("x", "y"),
            models={"da": model_a, "db": model_b},
            priors={"da": 0.5, "db": 0.5},
            typicals={"da": frozenset(("x", "y")), "db": frozenset(("x", "y"))},
            background={},
            background_priors={},
            other_prior=0.0,
        )
        tr = features(m, KnowledgeState.initial(1), 1)
        assert tr.info_gain == pytest.approx(0.0, abs=1e-12)
        assert tr.p_positive == pytest.approx(0.5, abs=1e-12)

    def test_gain_never_meaningfully_negative(self):
        m = table_env()
        rng = np.random.default_rng(3)
        s = KnowledgeState.initial(8)
        while s.unobserved():
            for a in s.unobserved():
                assert features(m, s, a).info_gain >= -1e-9
            a = int(rng.choice(s.unobserved()))
            s = s.observe(a, bool(rng.random() < 0.5))

    def test_identical_inputs_identical_triple(self):
        m = table_env()
        s = KnowledgeState.initial(8).observe(3, True)
        t1 = features(m, s, 5)
        t2 = features(m, s, 5)
        assert t1 == t2

    def test_observed_index_rejected(self):
        m = table_env()
        s = KnowledgeState.initial(8).observe(3, True)
        with pytest.raises(ValidationError):
            features(m, s, 3)
        with pytest.raises(ValidationError):
            features(m, s, 0)

    def test_vector_layout(self):
        v = FeatureTriple(0.25, 0.5, 1.0).vector()
        assert v.tolist() == [0.25, 0.5, 1.0]


class TestEnergyProbs:
    def test_zero_weights_give_uniform(self):
        m = table_env()
        probs = energy_action_probs(EnergyPolicy(), m, KnowledgeState.initial(8))
        assert sorted(probs) == list(range(1, 9))
        for q in probs.values():
            assert q == pytest.approx(0.125, abs=1e-12)

    def test_matches_direct_exponentiation(self):
        m = table_env()
        s = KnowledgeState.initial(8)
        theta = (0.3, -0.2, 0.5)
        probs = energy_action_probs(EnergyPolicy(theta), m, s)
        energies = {}
        for a in s.unobserved():
            tr = features(m, s, a)
            energies[a] = (
                theta[0] * tr.info_gain
                + theta[1] * tr.p_positive
                + theta[2] * tr.in_top_disease
            )
        z = sum(math.exp(e) for e in energies.values())
        for a, e in energies.items():
            assert probs[a] == pytest.approx(math.exp(e) / z, abs=1e-12)

    def test_large_gain_weight_selects_best_gain(self):
        m = table_env()
        s = KnowledgeState.initial(8)
        probs = energy_action_probs(EnergyPolicy((1e4, 0.0, 0.0)), m, s)
        best = max(probs, key=probs.get)
        assert m.codes[best] == "s5"
        assert probs[best] > 1.0 - 1e-9

    def test_softmax_shift_invariance(self):
        e = np.array([1.5, -0.3, 0.0, 2.2])
        p1 = stable_softmax(e)
        p2 = stable_softmax(e + 17.3)
        assert np.all(np.abs(p1 - p2) <= 1e-12)
        assert p1.sum() == pytest.approx(1.0, abs=1e-12)

    def test_softmax_no_overflow_at_huge_energies(self):
        p = stable_softmax(np.array([1e4, 1e4 - 2.0, -1e4]))
        assert np.all(np.isfinite(p))
        assert p[0] == pytest.approx(1.0 / (1.0 + math.exp(-2.0)), rel=1e-12)

    def test_exhausted_state_rejected(self):
        m = table_env()
        s = KnowledgeState.initial(8)
        for a in list(s.unobserved()):
            s = s.observe(a, False)
        with pytest.raises(ValidationError):
            energy_action_probs(EnergyPolicy(), m, s)

    def test_artifact_round_trip(self):
        p = EnergyPolicy((0.1, -2.5, 3.0))
        d = p.to_dict()
        assert d == {"kind": "energy", "theta": [0.1, -2.5, 3.0]}
        assert EnergyPolicy.from_dict(d) == p
        with pytest.raises(ValidationError):
            EnergyPolicy.from_dict({"kind": "qnet", "theta": [0, 0, 0]})
        with pytest.raises(ValidationError):
            EnergyPolicy((0.0, float("nan"), 0.0))
        with pytest.raises(ValidationError):
            EnergyPolicy((1.0, 2.0))


class TestGreedyEntropy:
    def test_root_choice_matches_full_scan(self):
        m = table_env()
        s = KnowledgeState.initial(8)
        scans = {}
        for a in s.unobserved():
            masses = hand_masses({"s9": 1})
            tot = sum(masses.values())
            cond = {d: TYPICALS.get(d, {}).get(m.codes[a], NTP) for d in masses}
            p1 = sum(masses[d] / tot * cond[d] for d in masses)
            m1 = {d: masses[d] * cond[d] for d in masses}
            m0 = {d: masses[d] * (1.0 - cond[d]) for d in masses}
            scans[a] = p1 * hand_entropy(m1) + (1.0 - p1) * hand_entropy(m0)
        best = min(s.unobserved(), key=lambda a: scans[a])
        choice = greedy_entropy_action(m, s)
        assert choice == best
        assert m.codes[choice] == "s5"

    def test_matches_expected_entropy_argmin_along_episode(self):
        m = table_env()
        rng = np.random.default_rng(9)
        s = KnowledgeState.initial(8)
        while s.unobserved():
            choice = greedy_entropy_action(m, s)
            vals = {a: expected_posterior_entropy(m, s, a) for a in s.unobserved()}
            best = min(vals.values())
            assert vals[choice] == pytest.approx(best, abs=1e-12)
            # ties break toward the smallest index
            assert all(vals[a] > vals[choice] - 1e-12 for a in s.unobserved() if a < choice)
            s = s.observe(choice, bool(rng.random() < 0.5))

    def test_policy_wrapper_ignores_belief(self):
        m = table_env()
        s = KnowledgeState.initial(8)
        assert greedy_entropy_policy(m, s, posterior(m, s)) == greedy_entropy_action(m, s)

    def test_exhausted_state_rejected(self):
        m = table_env()
        s = KnowledgeState.initial(8)
        for a in list(s.unobserved()):
            s = s.observe(a, True)
        with pytest.raises(ValidationError):
            greedy_entropy_action(m, s)


class TestRandomPolicy:
    def test_picks_only_unobserved(self):
        m = table_env()
        pol = random_policy(np.random.default_rng(1))
        s = KnowledgeState.initial(8).observe(2, True).observe(5, False)
        b = posterior(m, s)
        for _ in range(50):
            assert pol(m, s, b) in s.unobserved()

    def test_seed_determinism(self):
        m = table_env()
        s = KnowledgeState.initial(8)
        b = posterior(m, s)
        picks1 = [random_policy(np.random.default_rng(4))(m, s, b) for _ in range(10)]
        picks2 = [random_policy(np.random.default_rng(4))(m, s, b) for _ in range(10)]
        assert picks1 == picks2


# ---------------------------------------------------------------------------
# exact evaluation oracles: recursive expectimax over the answer tree


def _answer_prob(m, s, a):
    b = posterior(m, s)
    code = m.codes[a]
    out = 0.0
    for h, q in b.probs.items():
        if h in m.priors and code in m.typicals[h]:
            marg = m.models[h].marginals[m.models[h].code_position(code)]
            out += q * marg
        else:
            out += q * NTP
    return out


def _terminal(m, s):
    return posterior(m, s).entropy <= m.entropy_threshold or not s.unobserved()


def optimal_value(m):
    memo = {}

    def v(s):
        if s.status in memo:
            return memo[s.status]
        if _terminal(m, s):
            out = 0.0
        else:
            out = None
            for a in s.unobserved():
                p = _answer_prob(m, s, a)
                cand = 1.0 + p * v(s.observe(a, True)) + (1.0 - p) * v(s.observe(a, False))
                if out is None or cand < out:
                    out = cand
        memo[s.status] = out
        return out

    return v(KnowledgeState.initial(m.dim))


def policy_value(m, pol):
    memo = {}

    def w(s):
        if s.status in memo:
            return memo[s.status]
        if _terminal(m, s):
            out = 0.0
        else:
            a = pol(m, s, posterior(m, s))
            p = _answer_prob(m, s, a)
            out = 1.0 + p * w(s.observe(a, True)) + (1.0 - p) * w(s.observe(a, False))
        memo[s.status] = out
        return out

    return w(KnowledgeState.initial(m.dim))


# one common marker terminates the episode for the frequent disease, the
# rare alternative's marker is nearly always a wasted question
TWO_SYMPTOM_KB = {
    "diseases": [
        {
            "id": "da",
            "prior": 0.02,
            "min_symptoms": 1,
            "symptoms": [
                {"code": "flag", "p": 0.9, "lambda": 1.0},
                {"code": "x", "p": 0.8, "lambda": 1.0},
            ],
        },
        {
            "id": "db",
            "prior": 0.00002,
            "min_symptoms": 1,
            "symptoms": [
                {"code": "flag", "p": 0.9, "lambda": 1.0},
                {"code": "y", "p": 0.7, "lambda": 1.0},
            ],
        },
    ],
    "ontology": {"edges": [], "base_level": ["flag", "x", "y"]},
    "other_prior": 1.0 - 0.02 - 0.00002,
}

# two comparable diseases; the frequent one has two markers that must both
# come up positive to end the episode early
THREE_SYMPTOM_KB = {
    "diseases": [
        {
            "id": "da",
            "prior": 0.01,
            "min_symptoms": 1,
            "symptoms": [
                {"code": "flag", "p": 0.9, "lambda": 1.0},
                {"code": "x1", "p": 0.8, "lambda": 1.0},
                {"code": "x2", "p": 0.8, "lambda": 1.0},
            ],
        },
        {
            "id": "db",
            "prior": 0.008,
            "min_symptoms": 1,
            "symptoms": [
                {"code": "flag", "p": 0.9, "lambda": 1.0},
                {"code": "y", "p": 0.7, "lambda": 1.0},
            ],
        },
    ],
    "ontology": {"edges": [], "base_level": ["flag", "x1", "x2", "y"]},
    "other_prior": 1.0 - 0.01 - 0.008,
}


class TestReinforce:
    def test_zero_episodes_returns_initial_weights(self):
        m = EnvModel.independence(validate_kb(TWO_SYMPTOM_KB), "flag")
        pol = reinforce_train(m, episodes=0, rng=np.random.default_rng(0))
        assert pol.theta == (0.0, 0.0, 0.0)
        start = EnergyPolicy((0.5, 0.5, 0.5))
        pol = reinforce_train(m, episodes=0, rng=np.random.default_rng(0), theta0=start)
        assert pol.theta == start.theta

    def test_seed_determinism(self):
        m = EnvModel.independence(validate_kb(TWO_SYMPTOM_KB), "flag")
        p1 = reinforce_train(m, episodes=50, rng=np.random.default_rng(21))
        p2 = reinforce_train(m, episodes=50, rng=np.random.default_rng(21))
        assert p1.theta == p2.theta

    def test_two_symptom_task_reaches_the_optimum(self):
        m = EnvModel.independence(validate_kb(TWO_SYMPTOM_KB), "flag")
        opt = optimal_value(m)
        # the skewed priors let one positive marker answer end the episode
        assert opt == pytest.approx(1.2012, abs=1e-3)
        trained = reinforce_train(m, episodes=600, lr=0.01, rng=np.random.default_rng(7))
        value = policy_value(m, energy_policy(trained))
        assert value <= 1.05 * opt
        # the myopic baseline prefers the cheap exclusion question and pays
        # a full extra question for it
        greedy = policy_value(m, greedy_entropy_policy)
        assert greedy == pytest.approx(2.0, abs=1e-6)
        assert value <= greedy

    def test_three_symptom_task_beats_the_greedy_baseline(self):
        m = EnvModel.independence(validate_kb(THREE_SYMPTOM_KB), "flag")
        opt = optimal_value(m)
        trained = reinforce_train(m, episodes=600, lr=0.01, rng=np.random.default_rng(7))
        value = policy_value(m, energy_policy(trained))
        greedy = policy_value(m, greedy_entropy_policy)
        assert value <= greedy + 1e-9
        assert value <= 1.05 * opt

    def test_reference_task_improves_on_greedy(self):
        m = table_env()
        trained = reinforce_train(m, episodes=1000, lr=0.01, rng=np.random.default_rng(11))
        value = policy_value(m, energy_policy(trained))
        greedy = policy_value(m, greedy_entropy_policy)
        assert value <= greedy

    def test_baseline_toggle_changes_the_trajectory(self):
        m = EnvModel.independence(validate_kb(TWO_SYMPTOM_KB), "flag")
        with_b = reinforce_train(m, episodes=80, rng=np.random.default_rng(5))
        without = reinforce_train(
            m, episodes=80, rng=np.random.default_rng(5), use_baseline=False
        )
        assert with_b.theta != without.theta

    def test_divergence_aborts_with_diagnostic(self):
        m = EnvModel.independence(validate_kb(TWO_SYMPTOM_KB), "flag")
        with pytest.raises(ConvergenceError, match="diverged"):
            reinforce_train(m, episodes=50, lr=1e9, rng=np.random.default_rng(2))
