"""Baseline question-selection policies.

Three ways to pick the next symptom: uniformly at random, greedily by
expected posterior entropy, and a three-feature energy model whose weights
are trained episode by episode with a policy-gradient update. The features
of a state-action pair are the expected information gain, the probability of
a positive answer, and membership of the symptom in the top disease's
typical set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .env import (
    Belief,
    BeliefEngine,
    EnvModel,
    KnowledgeState,
    Policy,
    _answer_probability,
    is_terminal,
    sample_disease,
)
from .errors import ConvergenceError, ValidationError

THETA_DIVERGENCE_NORM = 1e6


@dataclass(frozen=True)
class FeatureTriple:
    info_gain: float
    p_positive: float
    in_top_disease: float

    def vector(self) -> np.ndarray:
        return np.array([self.info_gain, self.p_positive, self.in_top_disease])


@dataclass(frozen=True)
class EnergyPolicy:
    """Linear energies over the feature triple, turned into action
    probabilities by a softmax."""

    theta: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.theta) != 3 or not all(np.isfinite(self.theta)):
            raise ValidationError("theta must be three finite numbers")

    def to_dict(self) -> dict:
        return {"kind": "energy", "theta": [float(t) for t in self.theta]}

    @staticmethod
    def from_dict(data: Mapping) -> "EnergyPolicy":
        if data.get("kind") != "energy":
            raise ValidationError("not an energy policy payload")
        return EnergyPolicy(theta=tuple(float(t) for t in data["theta"]))


def _top_typicals(m: EnvModel, b: Belief) -> frozenset[str]:
    top, _ = b.top()
    return m.typicals.get(top, frozenset())


def _feature_rows(m: EnvModel, eng: BeliefEngine) -> tuple[tuple[int, ...], np.ndarray]:
    """Feature triples for every unobserved action, stacked row-wise."""
    b = eng.belief()
    p1, h1, h0 = eng.branch_stats()
    actions = eng.state.unobserved()
    top = _top_typicals(m, b)
    rows = np.empty((len(actions), 3))
    for r, a in enumerate(actions):
        gain = b.entropy - (p1[a] * h1[a] + (1.0 - p1[a]) * h0[a])
        rows[r] = (gain, p1[a], 1.0 if m.codes[a] in top else 0.0)
    return actions, rows


def features(m: EnvModel, s: KnowledgeState, a: int) -> FeatureTriple:
    if s.status[a] == 0 or s.status[a] == 1:
        raise ValidationError(f"symptom index {a} was already observed")
    actions, rows = _feature_rows(m, BeliefEngine(m, s))
    row = rows[actions.index(a)]
    return FeatureTriple(info_gain=float(row[0]), p_positive=float(row[1]), in_top_disease=float(row[2]))


def stable_softmax(energies: np.ndarray) -> np.ndarray:
    z = np.exp(energies - np.max(energies))
    return z / z.sum()


def energy_action_probs(p: EnergyPolicy, m: EnvModel, s: KnowledgeState) -> dict[int, float]:
    if not s.unobserved():
        raise ValidationError("no unobserved symptom to choose from")
    actions, rows = _feature_rows(m, BeliefEngine(m, s))
    probs = stable_softmax(rows @ np.asarray(p.theta))
    return {a: float(q) for a, q in zip(actions, probs)}


def greedy_entropy_action(m: EnvModel, s: KnowledgeState) -> int:
    """Smallest expected posterior entropy; ties go to the lowest index."""
    if not s.unobserved():
        raise ValidationError("no unobserved symptom to choose from")
    eng = BeliefEngine(m, s)
    p1, h1, h0 = eng.branch_stats()
    best, best_val = None, None
    for a in s.unobserved():
        val = p1[a] * h1[a] + (1.0 - p1[a]) * h0[a]
        if best_val is None or val < best_val:
            best, best_val = a, val
    return best


def greedy_entropy_policy(m: EnvModel, s: KnowledgeState, b: Belief) -> int:
    return greedy_entropy_action(m, s)


def random_policy(rng: np.random.Generator) -> Policy:
    def pick(m: EnvModel, s: KnowledgeState, b: Belief) -> int:
        return int(rng.choice(s.unobserved()))

    return pick


def energy_policy(
    p: EnergyPolicy, *, greedy: bool = True, rng: np.random.Generator | None = None
) -> Policy:
    """Wrap an EnergyPolicy for episode play: greedy argmax for evaluation,
    stochastic sampling during training."""
    if not greedy and rng is None:
        raise ValidationError("sampling mode needs an rng")

    def pick(m: EnvModel, s: KnowledgeState, b: Belief) -> int:
        probs = energy_action_probs(p, m, s)
        actions = list(probs)
        if greedy:
            values = np.array([probs[a] for a in actions])
            return actions[int(np.argmax(values))]
        weights = np.array([probs[a] for a in actions])
        return actions[int(rng.choice(len(actions), p=weights))]

    return pick


def reinforce_train(
    m: EnvModel,
    episodes: int = 1000,
    lr: float = 0.01,
    rng: np.random.Generator | None = None,
    *,
    use_baseline: bool = True,
    lr_decay: bool = True,
    theta0: EnergyPolicy | None = None,
) -> EnergyPolicy:
    """Policy-gradient training of the energy weights.

    Each episode plays one game with the current stochastic policy and takes
    one ascent step on theta, scaled by the episode return against a running
    mean baseline. The learning rate decays as 1/sqrt(episode).
    """
    if rng is None:
        rng = np.random.default_rng()
    theta = np.asarray(theta0.theta if theta0 is not None else (0.0, 0.0, 0.0), dtype=float)
    returns: list[float] = []
    for ep in range(1, episodes + 1):
        d = sample_disease(m, rng)
        eng = BeliefEngine(m)
        trajectory: list[tuple[np.ndarray, int]] = []
        while True:
            b = eng.belief()
            if is_terminal(b, m.entropy_threshold) or not eng.state.unobserved():
                break
            actions, rows = _feature_rows(m, eng)
            probs = stable_softmax(rows @ theta)
            pick = int(rng.choice(len(actions), p=probs))
            # grad of log softmax: own features minus the policy average
            grad = rows[pick] - probs @ rows
            trajectory.append((grad, actions[pick]))
            a = actions[pick]
            p_yes = _answer_probability(m, eng.state, a, d)
            eng.answer(a, bool(rng.random() < p_yes))
        g = -float(len(trajectory))
        baseline = (sum(returns) / len(returns)) if (use_baseline and returns) else 0.0
        returns.append(g)
        step_lr = lr / np.sqrt(ep) if lr_decay else lr
        for grad, _ in trajectory:
            theta += step_lr * (g - baseline) * grad
        norm = float(np.linalg.norm(theta))
        if norm > THETA_DIVERGENCE_NORM:
            raise ConvergenceError(
                f"policy weights diverged (norm {norm:.3e} after {ep} episodes)"
            )
    return EnergyPolicy(theta=tuple(float(t) for t in theta))
