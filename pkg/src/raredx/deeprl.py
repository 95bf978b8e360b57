"""Value-based training for the question policies.

Small tasks get an exact tabular solution by depth-first expectimax over the
answer tree. Larger tasks train a compact Q-network from scratch on replayed
transitions, with Monte-Carlo or temporal-difference targets, and the largest
ones reuse the networks of already solved subtasks: an episode halts as soon
as a positive answer lands on a solved symptom and the subtask's own value
estimate stands in for the rest of the game.
"""

from __future__ import annotations

import copy
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .env import (
    Belief,
    BeliefEngine,
    EnvModel,
    KnowledgeState,
    Policy,
    Transition,
    _answer_probability,
    is_terminal,
    play_episode,
    sample_disease,
)
from .errors import ConvergenceError, ValidationError
from .kb import KnowledgeBase, TaskSeed, relevant_set

log = logging.getLogger(__name__)

TABULAR_MAX_DIM = 10
MINIBATCH = 32


def build_tasks(kb: KnowledgeBase) -> list[TaskSeed]:
    """One task per base-level symptom that some disease lists, smallest
    first."""
    codes = sorted({c for d in kb.diseases for c in d.codes})
    tasks = [relevant_set(kb, c) for c in codes]
    return sorted(tasks, key=lambda t: (t.dim, t.initial))


# ---------------------------------------------------------------------------
# exact solution for small tasks


@dataclass
class TabularQ:
    """Q-vectors per reachable knowledge state.

    Vector entry j scores asking state position j+1; observed positions hold
    -inf. Terminal states are stored as None and have value 0.
    """

    dim: int
    table: dict[tuple[int, ...], np.ndarray | None] = field(default_factory=dict)

    def q_values(self, s: KnowledgeState) -> np.ndarray:
        """Raw action scores; a state outside the table was terminal when it
        was solved, where one more question costs exactly its own -1."""
        stored = self.table.get(s.status)
        if stored is not None:
            return stored
        out = np.full(self.dim, -1.0)
        for i, v in enumerate(s.status[1:]):
            if v != 2:
                out[i] = -np.inf
        return out

    def value(self, s: KnowledgeState) -> float:
        stored = self.table.get(s.status)
        if stored is None:
            return 0.0
        best = float(np.max(stored))
        return best if np.isfinite(best) else 0.0

    def greedy_action(self, s: KnowledgeState) -> int:
        stored = self.table.get(s.status)
        if stored is None:
            raise ValidationError("no action recorded for a terminal state")
        return int(np.argmax(stored)) + 1


def value_iteration(task: TaskSeed, m: EnvModel, eps_h: float | None = None) -> TabularQ:
    """Exact expectimax over the answer tree; exhaustive, so dim stays small."""
    if task.dim > TABULAR_MAX_DIM:
        raise ValidationError(
            f"tabular solving is limited to dimension {TABULAR_MAX_DIM}, got {task.dim}"
        )
    eps = eps_h if eps_h is not None else m.entropy_threshold
    out = TabularQ(dim=task.dim)
    values: dict[tuple[int, ...], float] = {}

    def solve(eng: BeliefEngine) -> float:
        key = eng.state.status
        if key in values:
            return values[key]
        b = eng.belief()
        if is_terminal(b, eps) or not eng.state.unobserved():
            out.table[key] = None
            values[key] = 0.0
            return 0.0
        p1, _, _ = eng.branch_stats()
        q = np.full(task.dim, -np.inf)
        for a in eng.state.unobserved():
            p = float(p1[a])
            yes = eng.copy()
            yes.answer(a, True)
            no = eng.copy()
            no.answer(a, False)
            q[a - 1] = -1.0 + p * solve(yes) + (1.0 - p) * solve(no)
        out.table[key] = q
        v = float(np.max(q))
        values[key] = v
        return v

    solve(BeliefEngine(m))
    return out


# ---------------------------------------------------------------------------
# the Q-network


@dataclass
class QNetwork:
    """Ternary state in, one Q-value per symptom position out.

    Each position embeds its three-valued status into three learned units;
    the concatenation passes through two ReLU layers that narrow back down to
    one output per position.
    """

    dim: int
    emb: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    steps: int = 0

    @staticmethod
    def init(dim: int, rng: np.random.Generator) -> "QNetwork":
        if dim < 1:
            raise ValidationError("network needs at least one symptom position")
        u = lambda *shape: rng.uniform(-0.05, 0.05, size=shape)
        return QNetwork(
            dim=dim,
            emb=u(dim, 3, 3),
            w1=u(3 * dim, 2 * dim),
            b1=np.zeros(2 * dim),
            w2=u(2 * dim, dim),
            b2=np.zeros(dim),
            w3=u(dim, dim),
            b3=np.zeros(dim),
        )

    def params(self) -> dict[str, np.ndarray]:
        """Live references to the weight arrays, keyed by name."""
        return {"emb": self.emb, "w1": self.w1, "b1": self.b1, "w2": self.w2,
                "b2": self.b2, "w3": self.w3, "b3": self.b3}

    def state_dict(self) -> dict:
        return {
            "dim": self.dim,
            "steps": self.steps,
            "emb": self.emb.tolist(),
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2.tolist(),
            "w3": self.w3.tolist(),
            "b3": self.b3.tolist(),
        }

    @staticmethod
    def from_state_dict(data: Mapping) -> "QNetwork":
        return QNetwork(
            dim=int(data["dim"]),
            steps=int(data.get("steps", 0)),
            emb=np.asarray(data["emb"], dtype=float),
            w1=np.asarray(data["w1"], dtype=float),
            b1=np.asarray(data["b1"], dtype=float),
            w2=np.asarray(data["w2"], dtype=float),
            b2=np.asarray(data["b2"], dtype=float),
            w3=np.asarray(data["w3"], dtype=float),
            b3=np.asarray(data["b3"], dtype=float),
        )


def net_input(s: KnowledgeState) -> np.ndarray:
    """Ternary statuses of the relevant positions; the fixed initial symptom
    carries no information."""
    return np.asarray(s.status[1:], dtype=np.int64)


def _forward_full(net: QNetwork, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != net.dim:
        raise ValidationError(f"expected {net.dim} ternary positions, got shape {x.shape}")
    e = net.emb[np.arange(net.dim), x]
    x1 = e.reshape(x.shape[0], 3 * net.dim)
    z1 = x1 @ net.w1 + net.b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ net.w2 + net.b2
    h2 = np.maximum(z2, 0.0)
    out = h2 @ net.w3 + net.b3
    return out, (x, x1, z1, h1, z2, h2)


def qnet_forward(net: QNetwork, s) -> np.ndarray:
    """Q-values for one state (KnowledgeState or a ternary vector of length
    dim)."""
    x = net_input(s) if isinstance(s, KnowledgeState) else np.asarray(s, dtype=np.int64)
    out, _ = _forward_full(net, x[None, :])
    return out[0]


def qnet_gradients(
    net: QNetwork,
    states: np.ndarray,
    actions: np.ndarray,
    targets: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error over the taken-action outputs and its gradient.

    Actions index the output vector (state position minus one). The gradient
    comes from reverse-mode differentiation and can be checked against finite
    differences directly.
    """
    n = states.shape[0]
    out, (x, x1, z1, h1, z2, h2) = _forward_full(net, states)
    rows = np.arange(n)
    diff = out[rows, actions] - targets
    loss = float(np.mean(diff**2))
    dout = np.zeros_like(out)
    dout[rows, actions] = 2.0 * diff / n
    dh2 = dout @ net.w3.T
    dz2 = dh2 * (z2 > 0)
    dh1 = dz2 @ net.w2.T
    dz1 = dh1 * (z1 > 0)
    dx1 = (dz1 @ net.w1.T).reshape(n, net.dim, 3)
    demb = np.zeros_like(net.emb)
    np.add.at(demb, (np.broadcast_to(np.arange(net.dim), x.shape), x), dx1)
    grads = {
        "emb": demb,
        "w1": x1.T @ dz1,
        "b1": dz1.sum(axis=0),
        "w2": h1.T @ dz2,
        "b2": dz2.sum(axis=0),
        "w3": h2.T @ dout,
        "b3": dout.sum(axis=0),
    }
    return loss, grads


class AdamState:
    """Adaptive moment accumulators, one pair per parameter."""

    B1 = 0.9
    B2 = 0.999
    EPS = 1e-8

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.B1 * self.m[name] + (1.0 - self.B1) * g
            self.v[name] = self.B2 * self.v[name] + (1.0 - self.B2) * g * g
            m_hat = self.m[name] / (1.0 - self.B1**self.t)
            v_hat = self.v[name] / (1.0 - self.B2**self.t)
            params[name] -= lr * m_hat / (np.sqrt(v_hat) + self.EPS)


def qnet_train_step(
    net: QNetwork,
    states: np.ndarray,
    actions: np.ndarray,
    targets: np.ndarray,
    lr: float,
    opt: AdamState | None = None,
) -> float:
    """One full-batch step on the taken-action squared errors.

    Plain gradient descent without optimizer state; adaptive moment steps with
    it. Returns the loss before the update.
    """
    states = np.asarray(states, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    targets = np.asarray(targets, dtype=float)
    if states.shape[0] == 0:
        return 0.0
    loss, grads = qnet_gradients(net, states, actions, targets)
    if not np.isfinite(loss):
        raise ConvergenceError(
            f"non-finite training loss after {net.steps} steps "
            f"(max |weight| {max(np.max(np.abs(a)) for a in (net.w1, net.w2, net.w3)):.3e})"
        )
    params = net.params()
    if opt is None:
        for name, g in grads.items():
            params[name] -= lr * g
    else:
        opt.step(params, grads, lr)
    net.steps += 1
    return loss


def fit_sample(
    net: QNetwork,
    states: np.ndarray,
    actions: np.ndarray,
    targets: np.ndarray,
    lr: float,
    opt: AdamState,
) -> float:
    """One epoch of minibatch steps over an already shuffled sample; returns
    the mean pre-step loss."""
    n = len(states)
    if n == 0:
        return 0.0
    losses = []
    for start in range(0, n, MINIBATCH):
        end = start + MINIBATCH
        losses.append(qnet_train_step(net, states[start:end], actions[start:end],
                                      targets[start:end], lr, opt))
    return float(np.mean(losses))


def _masked_q(q: np.ndarray, s: KnowledgeState) -> np.ndarray:
    out = q.copy()
    for i, v in enumerate(s.status[1:]):
        if v != 2:
            out[i] = -np.inf
    return out


def _greedy_q_action(net: QNetwork, s: KnowledgeState) -> int:
    return int(np.argmax(_masked_q(qnet_forward(net, s), s))) + 1


def _backup_value(net: QNetwork, s: KnowledgeState) -> float:
    # the one-step backup takes the raw maximum; positions already observed
    # are not masked here, only at action-selection time
    return float(np.max(qnet_forward(net, s)))


def _state_value(net: QNetwork, s: KnowledgeState) -> float:
    return float(np.max(_masked_q(qnet_forward(net, s), s)))


def td_targets(frozen: "QNetwork", batch: "list[Transition]") -> np.ndarray:
    """One-step regression targets: -1 plus the frozen net's backup of the
    successor, or exactly -1 where the transition ended the episode."""
    return np.array(
        [
            -1.0 + (0.0 if t.terminal else _backup_value(frozen, t.s_next))
            for t in batch
        ]
    )


def qnet_policy(net: QNetwork) -> Policy:
    def pick(m: EnvModel, s: KnowledgeState, b: Belief) -> int:
        return _greedy_q_action(net, s)

    return pick


def tabular_policy(tq: TabularQ) -> Policy:
    def pick(m: EnvModel, s: KnowledgeState, b: Belief) -> int:
        return tq.greedy_action(s)

    return pick


# ---------------------------------------------------------------------------
# replay and training loops


class ReplayMemory:
    """FIFO transition store; once the capacity is set, the oldest entries
    make room first."""

    def __init__(self, capacity: int | None = None):
        if capacity is not None and capacity < 1:
            raise ValidationError("replay capacity must be positive")
        self.capacity = capacity
        self._items: list[Transition] = []

    def __len__(self) -> int:
        return len(self._items)

    def push(self, items: Iterable[Transition]) -> None:
        self._items.extend(items)
        self._trim()

    def set_capacity(self, capacity: int) -> None:
        if capacity < 1:
            raise ValidationError("replay capacity must be positive")
        self.capacity = capacity
        self._trim()

    def _trim(self) -> None:
        if self.capacity is not None and len(self._items) > self.capacity:
            del self._items[: len(self._items) - self.capacity]

    def items(self) -> tuple[Transition, ...]:
        return tuple(self._items)

    def sample(self, fraction: float, rng: np.random.Generator) -> list[Transition]:
        if not self._items:
            return []
        k = max(1, int(round(fraction * len(self._items))))
        idx = rng.choice(len(self._items), size=min(k, len(self._items)), replace=False)
        return [self._items[i] for i in idx]


@dataclass(frozen=True)
class TrainConfig:
    iters: int
    lr0: float
    games_per_iter: int = 100
    sample_fraction: float = 1.0 / 20.0
    lr_halving_period: int = 300
    frozen_update_period: int = 2
    epsilon_greedy: float = 0.1
    eval_games: int = 30
    replay_iters: int = 50

    def __post_init__(self):
        if self.iters < 0:
            raise ValidationError("iteration budget must be non-negative")
        for name in ("lr0", "games_per_iter", "lr_halving_period", "frozen_update_period",
                     "eval_games", "replay_iters"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValidationError("sample_fraction must be in (0, 1]")
        if not 0.0 <= self.epsilon_greedy <= 1.0:
            raise ValidationError("epsilon_greedy must be a probability")

    def lr_at(self, iteration: int) -> float:
        return self.lr0 * 0.5 ** (iteration // self.lr_halving_period)


@dataclass
class TrainRun:
    net: QNetwork
    report: list[dict]
    diverged: bool = False


class _SolvedLookup:
    """Hands an episode over to an already solved subtask.

    When a positive answer lands on a solved symptom, the main state projects
    onto the subtask's layout and the subtask's greedy value estimates the
    remaining questions. A projection that would drop an observed positive
    the subtask cannot represent is refused and the episode just continues.
    """

    def __init__(self, m: EnvModel, solved: Mapping[str, tuple[TaskSeed, "QNetwork | TabularQ"]]):
        self.m = m
        self.solved = dict(solved)
        self.fallbacks = 0

    def project(self, code: str, s: KnowledgeState) -> KnowledgeState | None:
        entry = self.solved.get(code)
        if entry is None:
            return None
        task, _ = entry
        sub_codes = (task.initial,) + task.relevant
        known = set(sub_codes)
        for i, v in enumerate(s.status):
            c = self.m.codes[i]
            # the main task's own initial symptom is background evidence the
            # subtask never models; any other positive must carry over
            if v == 1 and c not in known and i != 0 and c != code:
                self.fallbacks += 1
                log.info("projection onto %s would drop positive %s; continuing", code, c)
                return None
        status = [2] * (task.dim + 1)
        status[0] = 1
        for j, c in enumerate(sub_codes):
            if j > 0 and c in self.m.codes:
                v = s.status[self.m.index_of(c)]
                if v != 2:
                    status[j] = v
        return KnowledgeState(status=tuple(status))

    def boundary_value(self, code: str, s: KnowledgeState) -> float | None:
        sub_state = self.project(code, s)
        if sub_state is None:
            return None
        _, q = self.solved[code]
        if isinstance(q, TabularQ):
            return q.value(sub_state)
        if not sub_state.unobserved():
            return 0.0
        return _state_value(q, sub_state)

    def delegate_action(self, s: KnowledgeState) -> int | None:
        """Main-task action picked by the artifact of a positively observed,
        cleanly projectable solved symptom, if there is one."""
        for code in sorted(self.solved):
            if code not in self.m.codes:
                continue
            idx = self.m.index_of(code)
            if idx == 0 or s.status[idx] != 1:
                continue
            sub_state = self.project(code, s)
            if sub_state is None or not sub_state.unobserved():
                continue
            task, q = self.solved[code]
            try:
                a = (
                    q.greedy_action(sub_state)
                    if isinstance(q, TabularQ)
                    else _greedy_q_action(q, sub_state)
                )
            except ValidationError:
                # the projected state fell outside the artifact's coverage
                continue
            target = ((task.initial,) + task.relevant)[a]
            if target in self.m.codes:
                j = self.m.index_of(target)
                if s.status[j] == 2:
                    return j
        return None


def composed_policy(net: QNetwork, lookup: _SolvedLookup) -> Policy:
    """Greedy play that defers to solved-subtask artifacts once a positive
    answer lands on their symptom; this is the policy a bootstrapped run
    actually produces."""

    def pick(m: EnvModel, s: KnowledgeState, b: Belief) -> int:
        a = lookup.delegate_action(s)
        return a if a is not None else _greedy_q_action(net, s)

    return pick


def _select_action(net: QNetwork, s: KnowledgeState, eps: float, rng: np.random.Generator) -> int:
    if rng.random() < eps:
        return int(rng.choice(s.unobserved()))
    return _greedy_q_action(net, s)


def _play_training_episode(
    m: EnvModel,
    net: QNetwork,
    eps: float,
    rng: np.random.Generator,
    lookup: _SolvedLookup,
) -> list[Transition]:
    d = sample_disease(m, rng)
    eng = BeliefEngine(m)
    raw: list[tuple[KnowledgeState, int, KnowledgeState, bool]] = []
    boundary = None
    while True:
        b = eng.belief()
        if is_terminal(b, m.entropy_threshold) or not eng.state.unobserved():
            break
        s = eng.state
        a = _select_action(net, s, eps, rng)
        present = rng.random() < _answer_probability(m, s, a, d)
        eng.answer(a, present)
        s2 = eng.state
        term = is_terminal(eng.belief(), m.entropy_threshold) or not s2.unobserved()
        raw.append((s, a, s2, term))
        if present and not term:
            boundary = lookup.boundary_value(m.codes[a], s2)
            if boundary is not None:
                break
    n = len(raw)
    tail = 0.0 if boundary is None else boundary
    return [
        Transition(
            s=s,
            a=a,
            s_next=s2,
            terminal=term or (boundary is not None and t == n - 1),
            mc_return=-(n - t) + tail,
        )
        for t, (s, a, s2, term) in enumerate(raw)
    ]


def _train_loop(
    task: TaskSeed,
    m: EnvModel,
    cfg: TrainConfig,
    rng: np.random.Generator,
    *,
    td: bool,
    solved: Mapping[str, tuple[TaskSeed, "QNetwork | TabularQ"]] | None = None,
) -> TrainRun:
    net = QNetwork.init(task.dim, rng)
    memory = ReplayMemory()
    lookup = _SolvedLookup(m, solved or {})
    frozen = copy.deepcopy(net)
    opt = AdamState()
    report: list[dict] = []
    games = 0
    best = None
    best_state = None
    eval_history: list[float] = []
    bad_evals = 0
    diverged = False
    for it in range(cfg.iters):
        if td and it % cfg.frozen_update_period == 0:
            frozen = copy.deepcopy(net)
        fresh: list[Transition] = []
        for _ in range(cfg.games_per_iter):
            fresh.extend(_play_training_episode(m, net, cfg.epsilon_greedy, rng, lookup))
        games += cfg.games_per_iter
        memory.push(fresh)
        if memory.capacity is None and fresh:
            memory.set_capacity(cfg.replay_iters * len(fresh))
        batch = memory.sample(cfg.sample_fraction, rng)
        lr = cfg.lr_at(it)
        if batch:
            states = np.stack([net_input(t.s) for t in batch])
            actions = np.array([t.a - 1 for t in batch])
            if td:
                targets = td_targets(frozen, batch)
            else:
                targets = np.array([t.mc_return for t in batch])
            try:
                fit_sample(net, states, actions, targets, lr, opt)
            except ConvergenceError as exc:
                log.warning("training halted: %s", exc)
                diverged = True
        pol = composed_policy(net, lookup) if lookup.solved else qnet_policy(net)
        ev = evaluate_policy(pol, task, m, cfg.eval_games, rng)
        report.append(
            {
                "iter": it + 1,
                "games": games,
                "eval_mean_I": ev.mean_i,
                "eval_var": ev.variance,
                "lr": lr,
            }
        )
        eval_history.append(ev.mean_i)
        if best is None or ev.mean_i < best:
            best = ev.mean_i
            best_state = net.state_dict()
        # collapse is judged against the run's own typical level; the all-time
        # best is a minimum over noisy evaluations and sits too low to anchor
        if td and ev.mean_i > 2.0 * float(np.median(eval_history)):
            bad_evals += 1
            if bad_evals >= 5:
                diverged = True
        else:
            bad_evals = 0
        if diverged:
            report[-1]["diverged"] = True
            break
    # the training curve wanders between near-tied policies, so the weights
    # from the best evaluation come back rather than the last iterate
    if best_state is not None:
        net = QNetwork.from_state_dict(best_state)
    return TrainRun(net=net, report=report, diverged=diverged)


def dqn_mc_train(task: TaskSeed, m: EnvModel, cfg: TrainConfig, rng: np.random.Generator) -> TrainRun:
    """Monte-Carlo targets: each transition learns the return its own episode
    actually collected."""
    return _train_loop(task, m, cfg, rng, td=False)


def dqn_td_train(task: TaskSeed, m: EnvModel, cfg: TrainConfig, rng: np.random.Generator) -> TrainRun:
    """One-step targets against a frozen copy of the network, refreshed on a
    fixed cadence; a sustained collapse of evaluation quality or a non-finite
    loss marks the run diverged and stops it."""
    return _train_loop(task, m, cfg, rng, td=True)


def dqn_mc_bootstrap_train(
    task: TaskSeed,
    m: EnvModel,
    solved: Mapping[str, tuple[TaskSeed, "QNetwork | TabularQ"]],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> TrainRun:
    """Monte-Carlo training that hands episodes over to solved subtasks.

    Evaluations (and the best-evaluation weights handed back) score the
    composed policy: the trained network plays until a positive answer lands
    on a solved symptom, then that subtask's artifact takes over. With an
    empty solved map this is exactly dqn_mc_train, random draw for random
    draw.
    """
    return _train_loop(task, m, cfg, rng, td=False, solved=solved)


# ---------------------------------------------------------------------------
# evaluation, ordering, fuzzy averaging


@dataclass(frozen=True)
class EvalResult:
    mean_i: float
    variance: float
    histogram: dict[int, int]
    n_games: int

    @property
    def std_error(self) -> float:
        return float(np.sqrt(self.variance / self.n_games))


def evaluate_policy(
    policy: Policy, task: TaskSeed, m: EnvModel, n_games: int, rng: np.random.Generator
) -> EvalResult:
    if n_games < 1:
        raise ValidationError("need at least one evaluation game")
    counts: Counter[int] = Counter()
    for _ in range(n_games):
        _, count = play_episode(m, policy, KnowledgeState.initial(task.dim), rng)
        counts[count] += 1
    values = np.array([i for i, c in counts.items() for _ in range(c)], dtype=float)
    return EvalResult(
        mean_i=float(values.mean()),
        variance=float(values.var()),
        histogram=dict(sorted(counts.items())),
        n_games=n_games,
    )


def next_task_to_solve(
    tasks: Sequence[TaskSeed],
    solved: set[str],
    model_of: Callable[[TaskSeed], EnvModel],
) -> TaskSeed:
    """Pick the unsolved task whose subtasks are best covered, weighting each
    subtask by how likely its symptom is to come up at the start."""
    unsolved = [t for t in tasks if t.initial not in solved]
    if not unsolved:
        raise ValidationError("every task is already solved")
    scored = []
    for t in unsolved:
        m = model_of(t)
        p1, _, _ = BeliefEngine(m).branch_stats()
        total = 0.0
        covered = 0.0
        for code in t.relevant:
            w = float(p1[m.index_of(code)])
            total += w
            if code in solved:
                covered += w
        ratio = covered / total if total > 0 else 0.0
        scored.append((-ratio, t.dim, t.initial, t))
    return min(scored)[3]


def fuzzy_q(
    q: "QNetwork | TabularQ",
    weighted_states: Sequence[tuple[KnowledgeState, float]],
) -> np.ndarray:
    """Probability-weighted mix of per-state Q-vectors; only positions still
    open in at least one candidate state stay scoreable."""
    if not weighted_states:
        raise ValidationError("need at least one weighted state")
    weights = np.array([w for _, w in weighted_states], dtype=float)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValidationError("weights must be non-negative and sum to one")
    dim = q.dim
    out = np.zeros(dim)
    open_anywhere = np.zeros(dim, dtype=bool)
    for s, w in weighted_states:
        if len(s.status) != dim + 1:
            raise ValidationError("state length does not match the policy")
        vec = q.q_values(s) if isinstance(q, TabularQ) else qnet_forward(q, s)
        vec = np.where(np.isfinite(vec), vec, -1.0)
        out += w * vec
        for i, v in enumerate(s.status[1:]):
            if v == 2:
                open_anywhere[i] = True
    out[~open_anywhere] = -np.inf
    return out
