"""Simulated examination episodes over fitted symptom models.

A task conditions the diagnosis problem on one initial symptom. The state is
a ternary vector over the initial symptom plus the task's relevant set
(1 present, 0 absent, 2 unobserved), each question costs a reward of -1, and
an episode ends when the disease posterior entropy falls to the stopping
threshold or every symptom has been observed.

Symptoms outside a disease's typical list occur independently with a small
probability. The residual "other" hypothesis lumps the diseases that do not
list the initial symptom (tracked through their stated marginals, product
form) with the truly unexplained share, which has no typical symptoms at
all; evidence no candidate can explain therefore shifts mass toward it.

Imprecise answers given above the ontology's base level are handled by
deterministic implication rules plus an enumeration over the base-level
completions they leave open.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .errors import ContradictionError, InfeasibleError, TooImpreciseError, UnknownCodeError, ValidationError
from .kb import KnowledgeBase, Ontology, TaskSeed, relevant_set
from .maxent import GroupFactorization, JointTable, bit_patterns, query_joint

NON_TYPICAL_P = 1e-5
ENTROPY_EPS = 1e-6
FUZZY_BUDGET = 64
OTHER_ID = "other"

UNOBSERVED = 2


@dataclass(frozen=True)
class KnowledgeState:
    """Ternary evidence vector; position 0 is the task's initial symptom."""

    status: tuple[int, ...]

    def __post_init__(self):
        if not self.status:
            raise ValidationError("state must cover at least the initial symptom")
        if any(v not in (0, 1, UNOBSERVED) for v in self.status):
            raise ValidationError("state entries must be 0, 1 or 2")
        if self.status[0] != 1:
            raise ValidationError("the initial symptom is present by construction")

    @staticmethod
    def initial(dim: int) -> "KnowledgeState":
        return KnowledgeState((1,) + (UNOBSERVED,) * dim)

    @property
    def asked_count(self) -> int:
        return sum(1 for v in self.status if v != UNOBSERVED) - 1

    def observe(self, index: int, present: bool) -> "KnowledgeState":
        if not 1 <= index < len(self.status):
            raise ValidationError(f"symptom index {index} out of range")
        if self.status[index] != UNOBSERVED:
            raise ValidationError(f"symptom index {index} was already observed")
        status = list(self.status)
        status[index] = 1 if present else 0
        return KnowledgeState(tuple(status))

    def unobserved(self) -> tuple[int, ...]:
        return tuple(i for i, v in enumerate(self.status) if v == UNOBSERVED)


@dataclass(frozen=True)
class Belief:
    """Posterior over candidate diseases plus the residual hypothesis."""

    probs: Mapping[str, float]
    entropy: float

    def __post_init__(self):
        total = sum(self.probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"belief sums to {total!r}")
        if any(p < 0 for p in self.probs.values()):
            raise ValidationError("belief probabilities must be non-negative")

    @staticmethod
    def from_probs(probs: Mapping[str, float]) -> "Belief":
        return Belief(probs=dict(probs), entropy=entropy_of(probs.values()))

    def top(self) -> tuple[str, float]:
        """Most probable hypothesis; ties go to the smallest id."""
        code = min(self.probs, key=lambda k: (-self.probs[k], k))
        return code, self.probs[code]


@dataclass(frozen=True)
class Transition:
    s: KnowledgeState
    a: int
    s_next: KnowledgeState
    terminal: bool
    reward: float = -1.0
    mc_return: float | None = None

    def __post_init__(self):
        if self.reward != -1.0:
            raise ValidationError("every question costs exactly -1")
        diff = [i for i, (u, v) in enumerate(zip(self.s.status, self.s_next.status)) if u != v]
        if diff != [self.a]:
            raise ValidationError("successor state must differ exactly at the asked symptom")


def entropy_of(ps) -> float:
    """Shannon entropy in nats with the 0 log 0 = 0 convention."""
    out = 0.0
    for p in ps:
        if p > 0.0:
            out -= p * math.log(p)
    return out


def entropy(b: Belief) -> float:
    return entropy_of(b.probs.values())


def is_terminal(b: Belief, eps: float) -> bool:
    if eps <= 0:
        raise ValidationError("entropy threshold must be positive")
    return b.entropy <= eps


@dataclass(frozen=True)
class EnvModel:
    """One task's candidate diseases with their fitted joints and priors.

    ``codes`` lists the initial symptom first and then the relevant set;
    state vectors index into it. ``background`` carries the stated marginals
    of diseases outside the task, whose priors are folded with
    ``other_prior`` into the residual hypothesis.
    """

    task: TaskSeed
    codes: tuple[str, ...]
    models: Mapping[str, JointTable | GroupFactorization]
    priors: Mapping[str, float]
    typicals: Mapping[str, frozenset[str]]
    background: Mapping[str, Mapping[str, float]]
    background_priors: Mapping[str, float]
    other_prior: float
    non_typical_p: float = NON_TYPICAL_P
    entropy_threshold: float = ENTROPY_EPS
    ontology: Ontology | None = field(default=None, compare=False)

    def __post_init__(self):
        if not 0.0 < self.non_typical_p < 0.01:
            raise ValidationError("non_typical_p must lie in (0, 0.01)")
        if self.entropy_threshold <= 0:
            raise ValidationError("entropy threshold must be positive")
        if self.codes[0] != self.task.initial or self.codes[1:] != self.task.relevant:
            raise ValidationError("codes must be the initial symptom followed by the relevant set")
        for d in self.task.diseases:
            if d not in self.models:
                raise ValidationError(f"missing joint model for candidate {d!r}")
            if d not in self.priors:
                raise ValidationError(f"missing prior for candidate {d!r}")
        if set(self.background) != set(self.background_priors):
            raise ValidationError("background marginals and priors must cover the same diseases")
        if self.other_prior < 0:
            raise ValidationError("other prior must be non-negative")

    @property
    def dim(self) -> int:
        return self.task.dim

    @property
    def n_actions(self) -> int:
        return len(self.codes)

    @property
    def other_mass(self) -> float:
        return self.other_prior + sum(self.background_priors.values())

    def index_of(self, code: str) -> int:
        try:
            return self.codes.index(code)
        except ValueError:
            raise UnknownCodeError(f"{code!r} is not part of this task") from None

    def assignment_of(self, s: KnowledgeState) -> dict[str, int]:
        if len(s.status) != len(self.codes):
            raise ValidationError("state length does not match the task")
        return {c: v for c, v in zip(self.codes, s.status) if v != UNOBSERVED}

    @staticmethod
    def for_task(
        kb: KnowledgeBase,
        initial: str,
        models: Mapping[str, JointTable | GroupFactorization],
        *,
        non_typical_p: float = NON_TYPICAL_P,
        entropy_threshold: float = ENTROPY_EPS,
    ) -> "EnvModel":
        task = relevant_set(kb, initial)
        priors = {d: kb.disease(d).prior for d in task.diseases}
        typicals = {}
        for d in task.diseases:
            entry = kb.disease(d)
            typicals[d] = frozenset(entry.codes)
            model = models.get(d)
            if model is not None and tuple(sorted(model.codes)) != entry.codes:
                raise ValidationError(f"model for {d!r} covers different symptoms than the knowledge base")
        background = {}
        background_priors = {}
        for entry in kb.diseases:
            if entry.id not in priors:
                background[entry.id] = {t.code: t.p for t in entry.typicals}
                background_priors[entry.id] = entry.prior
        return EnvModel(
            task=task,
            codes=(task.initial,) + task.relevant,
            models=dict(models),
            priors=priors,
            typicals=typicals,
            background=background,
            background_priors=background_priors,
            other_prior=kb.other_prior,
            non_typical_p=non_typical_p,
            entropy_threshold=entropy_threshold,
            ontology=kb.ontology,
        )

    @staticmethod
    def independence(
        kb: KnowledgeBase,
        initial: str,
        *,
        non_typical_p: float = NON_TYPICAL_P,
        entropy_threshold: float = ENTROPY_EPS,
    ) -> "EnvModel":
        """Product-form joints straight from the stated marginals."""
        task = relevant_set(kb, initial)
        models = {}
        for d in task.diseases:
            entry = kb.disease(d)
            models[d] = JointTable.from_independent_marginals(
                d, entry.codes, {t.code: t.p for t in entry.typicals}
            )
        return EnvModel.for_task(
            kb, initial, models, non_typical_p=non_typical_p, entropy_threshold=entropy_threshold
        )


def _likelihood(m: EnvModel, hypothesis: str, assign: Mapping[str, int]) -> float:
    """P[observed pattern | hypothesis], marginalizing unobserved typicals.

    The hypothesis is a candidate id, a background disease id, or OTHER_ID
    for the truly unexplained share.
    """
    ntp = m.non_typical_p
    if hypothesis == OTHER_ID:
        out = 1.0
        for val in assign.values():
            out *= ntp if val else 1.0 - ntp
        return out
    if hypothesis in m.background:
        marg = m.background[hypothesis]
        out = 1.0
        for c, val in assign.items():
            p = marg.get(c, ntp)
            out *= p if val else 1.0 - p
        return out
    typ = m.typicals[hypothesis]
    typical_part = {c: v for c, v in assign.items() if c in typ}
    out = query_joint(m.models[hypothesis], typical_part)
    for c, val in assign.items():
        if c not in typ:
            out *= ntp if val else 1.0 - ntp
    return out


def _hypotheses(m: EnvModel) -> tuple[str, ...]:
    return m.task.diseases + tuple(m.background) + (OTHER_ID,)


def _component_masses(m: EnvModel, assign: Mapping[str, int]) -> np.ndarray:
    """Unnormalized prior x likelihood per hypothesis component; the
    background diseases and the unexplained share stay separate here and
    collapse into "other" only at the belief level."""
    n_cand = len(m.task.diseases)
    out = np.empty(n_cand + len(m.background) + 1)
    for i, d in enumerate(m.task.diseases):
        out[i] = m.priors[d] * _likelihood(m, d, assign)
    for j, e in enumerate(m.background):
        out[n_cand + j] = m.background_priors[e] * _likelihood(m, e, assign)
    out[-1] = m.other_prior * _likelihood(m, OTHER_ID, assign)
    return out


def _belief_from_components(m: EnvModel, masses: np.ndarray) -> Belief:
    total = float(masses.sum())
    if total <= 0.0:
        raise InfeasibleError("evidence impossible under the model")
    n_cand = len(m.task.diseases)
    probs = {d: float(masses[i]) / total for i, d in enumerate(m.task.diseases)}
    probs[OTHER_ID] = float(masses[n_cand:].sum()) / total
    return Belief.from_probs(probs)


def posterior(m: EnvModel, s: KnowledgeState) -> Belief:
    return _belief_from_components(m, _component_masses(m, m.assignment_of(s)))


def sample_disease(m: EnvModel, rng: np.random.Generator) -> str:
    """Draw the episode's generating hypothesis from the task-conditioned
    posterior; a background disease id may come back, OTHER_ID stands for
    the unexplained share."""
    masses = _component_masses(m, m.assignment_of(KnowledgeState.initial(m.dim)))
    ids = _hypotheses(m)
    p = masses / masses.sum()
    return ids[int(rng.choice(len(ids), p=p))]


def _answer_probability(m: EnvModel, s: KnowledgeState, a: int, d: str) -> float:
    """P[S_a present | observed pattern, D=d]."""
    code = m.codes[a]
    if d == OTHER_ID:
        return m.non_typical_p
    if d in m.background:
        # product form: the conditional equals the marginal
        return m.background[d].get(code, m.non_typical_p)
    if code not in m.typicals[d]:
        return m.non_typical_p
    typ = m.typicals[d]
    evidence = {c: v for c, v in m.assignment_of(s).items() if c in typ}
    denom = query_joint(m.models[d], evidence)
    if denom <= 0.0:
        raise InfeasibleError(f"observed pattern impossible for disease {d!r}")
    evidence[code] = 1
    return query_joint(m.models[d], evidence) / denom


def step(
    m: EnvModel, s: KnowledgeState, a: int, d: str, rng: np.random.Generator
) -> Transition:
    """Ask symptom ``a`` with hypothesis ``d`` generating the answer."""
    if not 0 <= a < len(s.status):
        raise ValidationError(f"symptom index {a} out of range")
    if s.status[a] != UNOBSERVED:
        raise ValidationError(f"symptom index {a} was already observed")
    p1 = _answer_probability(m, s, a, d)
    present = bool(rng.random() < p1)
    s_next = s.observe(a, present)
    b = posterior(m, s_next)
    terminal = is_terminal(b, m.entropy_threshold) or not s_next.unobserved()
    return Transition(s=s, a=a, s_next=s_next, terminal=terminal)


Policy = Callable[[EnvModel, KnowledgeState, Belief], int]


def play_episode(
    m: EnvModel,
    policy: Policy,
    start: KnowledgeState,
    rng: np.random.Generator,
    d: str | None = None,
) -> tuple[list[Transition], int]:
    """Run one episode to the stopping criterion; returns the transitions
    annotated with their remaining-question returns and the inquiry count."""
    b = posterior(m, start)
    if is_terminal(b, m.entropy_threshold) or not start.unobserved():
        return [], 0
    if d is None:
        d = sample_disease(m, rng)
    transitions: list[Transition] = []
    s = start
    while True:
        a = policy(m, s, b)
        t = step(m, s, a, d, rng)
        transitions.append(t)
        if t.terminal:
            break
        s = t.s_next
        b = posterior(m, s)
    count = len(transitions)
    return [replace(t, mc_return=-(count - k)) for k, t in enumerate(transitions)], count


class BeliefEngine:
    """Incremental per-episode belief tracking.

    Keeps, for each candidate, the joint cells still compatible with the
    answers so far, so the posterior and the answer statistics of every
    remaining symptom come out of one masked matrix product instead of a
    fresh scan per action. Background diseases and the unexplained share
    reduce to running scalar products. Group-factorized models fall back to
    per-action queries against their running assignment.
    """

    def __init__(self, m: EnvModel, state: KnowledgeState | None = None):
        self.m = m
        self._table: dict[str, np.ndarray] = {}
        self._assign: dict[str, dict[str, int]] = {}
        self._scalar: dict[str, float] = {h: 1.0 for h in _hypotheses(m)}
        self._positions: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for d in m.task.diseases:
            model = m.models[d]
            if isinstance(model, JointTable):
                self._table[d] = model.probs.copy()
                bits = bit_patterns(model.n_symptoms)
                env_idx = np.array([m.index_of(c) for c in model.codes])
                self._positions[d] = (bits, env_idx)
            else:
                self._assign[d] = {}
        state = state if state is not None else KnowledgeState.initial(m.dim)
        if len(state.status) != len(m.codes):
            raise ValidationError("state length does not match the task")
        self.state = KnowledgeState.initial(m.dim)
        self._ingest(0, True)
        for i, v in enumerate(state.status):
            if i > 0 and v != UNOBSERVED:
                self.answer(i, bool(v))

    def copy(self) -> "BeliefEngine":
        out = object.__new__(BeliefEngine)
        out.m = self.m
        out._table = {d: v.copy() for d, v in self._table.items()}
        out._assign = {d: dict(v) for d, v in self._assign.items()}
        out._scalar = dict(self._scalar)
        out._positions = self._positions
        out.state = self.state
        return out

    def _ingest(self, index: int, present: bool) -> None:
        m = self.m
        code = m.codes[index]
        val = 1 if present else 0
        ntp_factor = m.non_typical_p if present else 1.0 - m.non_typical_p
        for d in m.task.diseases:
            if code in m.typicals[d]:
                if d in self._table:
                    bits, _ = self._positions[d]
                    k = m.models[d].code_position(code)
                    self._table[d] *= bits[:, k] == val
                else:
                    self._assign[d][code] = val
            else:
                self._scalar[d] *= ntp_factor
        for e, marg in m.background.items():
            p = marg.get(code, m.non_typical_p)
            self._scalar[e] *= p if present else 1.0 - p
        self._scalar[OTHER_ID] *= ntp_factor

    def answer(self, index: int, present: bool) -> None:
        self.state = self.state.observe(index, present)
        self._ingest(index, present)

    def component_masses(self) -> np.ndarray:
        m = self.m
        n_cand = len(m.task.diseases)
        out = np.empty(n_cand + len(m.background) + 1)
        for i, d in enumerate(m.task.diseases):
            if d in self._table:
                like = float(self._table[d].sum())
            else:
                like = query_joint(m.models[d], self._assign[d])
            out[i] = m.priors[d] * like * self._scalar[d]
        for j, e in enumerate(m.background):
            out[n_cand + j] = m.background_priors[e] * self._scalar[e]
        out[-1] = m.other_prior * self._scalar[OTHER_ID]
        return out

    def belief(self) -> Belief:
        return _belief_from_components(self.m, self.component_masses())

    def _cond_matrix(self) -> np.ndarray:
        """Row per hypothesis component, column per symptom index:
        P[symptom present | answers so far, component]."""
        m = self.m
        n = len(m.codes)
        n_cand = len(m.task.diseases)
        cond = np.full((n_cand + len(m.background) + 1, n), m.non_typical_p)
        for i, d in enumerate(m.task.diseases):
            if d in self._table:
                probs = self._table[d]
                bits, env_idx = self._positions[d]
                total = probs.sum()
                if total > 0:
                    cond[i, env_idx] = (probs @ bits) / total
                else:
                    cond[i, env_idx] = 0.0
            else:
                assign = self._assign[d]
                denom = query_joint(m.models[d], assign)
                for c in m.typicals[d]:
                    j = m.index_of(c)
                    if c in assign:
                        cond[i, j] = float(assign[c])
                    elif denom > 0:
                        q = dict(assign)
                        q[c] = 1
                        cond[i, j] = query_joint(m.models[d], q) / denom
                    else:
                        cond[i, j] = 0.0
        for j, e in enumerate(m.background):
            marg = m.background[e]
            for c, p in marg.items():
                if c in m.codes:
                    cond[n_cand + j, m.index_of(c)] = p
        return cond

    def branch_stats(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per symptom index: answer probability and the posterior entropy of
        each answer branch. Already-observed positions come back as nan."""
        masses = self.component_masses()
        total = masses.sum()
        if total <= 0.0:
            raise InfeasibleError("evidence impossible under the model")
        n_cand = len(self.m.task.diseases)
        cond = self._cond_matrix()
        j1 = masses[:, None] * cond
        j0 = masses[:, None] * (1.0 - cond)
        # background components and the unexplained share act as one
        # hypothesis in the entropy
        j1 = np.vstack([j1[:n_cand], j1[n_cand:].sum(axis=0)])
        j0 = np.vstack([j0[:n_cand], j0[n_cand:].sum(axis=0)])
        t1 = j1.sum(axis=0)
        t0 = j0.sum(axis=0)
        p1 = t1 / total
        with np.errstate(divide="ignore", invalid="ignore"):
            post1 = np.where(t1 > 0, j1 / np.where(t1 > 0, t1, 1.0), 0.0)
            post0 = np.where(t0 > 0, j0 / np.where(t0 > 0, t0, 1.0), 0.0)
            h1 = -np.sum(np.where(post1 > 0, post1 * np.log(post1), 0.0), axis=0)
            h0 = -np.sum(np.where(post0 > 0, post0 * np.log(post0), 0.0), axis=0)
        observed = np.array([v != UNOBSERVED for v in self.state.status])
        p1[observed] = np.nan
        h1[observed] = np.nan
        h0[observed] = np.nan
        return p1, h1, h0


def expected_posterior_entropy(m: EnvModel, s: KnowledgeState, a: int) -> float:
    """Expected disease-posterior entropy after asking symptom ``a``."""
    if s.status[a] != UNOBSERVED:
        raise ValidationError(f"symptom index {a} was already observed")
    eng = BeliefEngine(m, s)
    p1, h1, h0 = eng.branch_stats()
    return float(p1[a] * h1[a] + (1.0 - p1[a]) * h0[a])


@dataclass(frozen=True)
class FuzzyEvidence:
    """Answers possibly given above the base level, with their deterministic
    implications and the base-level completions still open.

    ``resolved`` holds implied base-level assignments; ``pending`` pairs each
    imprecise positive code with the base-level descendants that could
    realize it (exactly one of them is taken present per completion).
    """

    answered: tuple[tuple[str, bool], ...] = ()
    resolved: Mapping[str, int] = field(default_factory=dict)
    pending: tuple[tuple[str, tuple[str, ...]], ...] = ()


def apply_deterministic_rules(
    o: Ontology, ev: FuzzyEvidence, code: str, presence: bool
) -> FuzzyEvidence:
    """Fold one answer into the evidence.

    A positive answer marks the code and all its ancestors present; a
    negative one marks the code and all its descendants absent. The
    implication closure is recomputed from the full answer set, so the
    result does not depend on answer order.
    """
    if code not in o.nodes:
        raise UnknownCodeError(f"unknown ontology code {code!r}")
    answered = ev.answered
    if (code, presence) not in answered:
        answered = answered + ((code, presence),)

    claims: dict[str, tuple[bool, str]] = {}
    for c, pres in answered:
        implied = (c,) + (o.ancestors(c) if pres else o.descendants(c))
        for node in implied:
            prev = claims.get(node)
            if prev is not None and prev[0] != pres:
                raise ContradictionError(c, prev[1])
            claims.setdefault(node, (pres, c))

    resolved = {node: int(pres) for node, (pres, _) in claims.items() if node in o.base_level}

    pending: list[tuple[str, tuple[str, ...]]] = []
    for c, pres in answered:
        if not pres or c in o.base_level:
            continue
        base = o.base_descendants(c)
        if not base:
            continue
        if any(resolved.get(x) == 1 for x in base):
            continue
        open_codes = tuple(x for x in base if resolved.get(x) != 0)
        if not open_codes:
            blocker = next(claims[x][1] for x in base if claims.get(x) is not None)
            raise ContradictionError(
                c,
                blocker,
                message=f"positive {c!r} but every base-level realization is excluded by {blocker!r}",
            )
        if (c, open_codes) not in pending:
            pending.append((c, open_codes))

    return FuzzyEvidence(answered=answered, resolved=resolved, pending=tuple(pending))


@dataclass(frozen=True)
class FuzzyAssignment:
    """One base-level completion of imprecise evidence with its posterior
    weight among all completions."""

    values: Mapping[str, int]
    weight: float


def fuzzy_posterior(
    m: EnvModel, ev: FuzzyEvidence, fuzzy_budget: int = FUZZY_BUDGET
) -> tuple[Belief, tuple[FuzzyAssignment, ...]]:
    """Posterior under imprecise evidence.

    Enumerates one-candidate-per-pending-code completions (the candidates of
    a pending code are disjoint events), mixes the per-completion joint
    masses, and reports each completion's posterior weight.
    """
    n_combo = 1
    for _, cands in ev.pending:
        n_combo *= len(cands)
    if n_combo > fuzzy_budget:
        raise TooImpreciseError(
            f"{n_combo} base-level completions exceed the budget of {fuzzy_budget}"
        )

    base = dict(ev.resolved)
    if base.get(m.codes[0], 1) == 0:
        raise InfeasibleError("evidence excludes the task's initial symptom")
    base[m.codes[0]] = 1

    combos: list[dict[str, int]] = []
    for choice in itertools.product(*(cands for _, cands in ev.pending)):
        assign = dict(base)
        ok = True
        for (_, cands), chosen in zip(ev.pending, choice):
            for c in cands:
                want = 1 if c == chosen else 0
                if assign.setdefault(c, want) != want:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            combos.append(assign)

    if not combos:
        raise InfeasibleError("evidence impossible under the model")
    masses = np.zeros(len(_hypotheses(m)))
    weights = np.empty(len(combos))
    for k, assign in enumerate(combos):
        mk = _component_masses(m, assign)
        weights[k] = mk.sum()
        masses += mk
    belief = _belief_from_components(m, masses)
    weights /= weights.sum()
    assignments = tuple(
        FuzzyAssignment(values=assign, weight=float(w)) for assign, w in zip(combos, weights)
    )
    return belief, assignments


def state_from_assignment(m: EnvModel, values: Mapping[str, int]) -> KnowledgeState:
    """Project a base-level assignment onto the task's state layout; codes
    outside the task are dropped."""
    status = [UNOBSERVED] * len(m.codes)
    status[0] = 1
    for c, v in values.items():
        if c in m.codes and c != m.codes[0]:
            status[m.index_of(c)] = int(v)
    return KnowledgeState(tuple(status))
