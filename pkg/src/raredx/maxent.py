"""Joint symptom-combination models fit by penalized maximum entropy.

For one disease with K typical symptoms, the model is a probability vector
over the 2^K presence combinations. The fit maximizes

    J = sum_j N_j log pi_j  +  epsilon * ( H(pi) - sum_k lambda_k KL_k )

subject to the cells summing to one, the marginals of pi matching the model
marginal vector P, and combinations with fewer than ``min_active`` present
symptoms having probability zero. N_j are observed combination counts, H is
the entropy of pi, and KL_k penalizes the divergence of the recovered
marginal P(k) from the expert's stated marginal, weighted by the per-symptom
confidence lambda_k (lambda_k = 0 marks the expert value as unknown and
leaves that marginal free).

The saddle point is found by a Uzawa iteration: for fixed multipliers the
inner problem separates per cell (a Gibbs closed form for unobserved cells, a
one-dimensional root bracketed in [1e-12, 1] for observed cells, a logistic
closed form for the marginals), and the multipliers then take a gradient step
on the constraint residuals, scaled per constraint by the closed-form
response rate of the cells it touches. Multipliers are kept in units of
epsilon so the scaling is consistent across epsilon values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConvergenceError, InfeasibleError, UnknownCodeError, ValidationError

EXPERT_CLIP = 1e-6
BISECT_FLOOR = 1e-12
MARGINAL_CONSISTENCY_TOL = 1e-6


def kl_bernoulli(p: float, q: float) -> float:
    """Kullback-Leibler divergence between Bernoulli(p) and Bernoulli(q)."""
    if not 0.0 <= p <= 1.0 or not 0.0 < q < 1.0:
        raise ValueError("kl_bernoulli needs p in [0,1] and q in (0,1)")
    out = 0.0
    if p > 0.0:
        out += p * math.log(p / q)
    if p < 1.0:
        out += (1.0 - p) * math.log((1.0 - p) / (1.0 - q))
    return out


def heuristic_epsilon(c: float, n_symptoms: int) -> float:
    """Smoothing weight growing with the cell count: c * 2^K."""
    return c * float(2**n_symptoms)


def bit_patterns(n_symptoms: int) -> np.ndarray:
    """(2^K, K) array: row j holds the presence bits of cell index j."""
    idx = np.arange(1 << n_symptoms, dtype=np.int64)
    return ((idx[:, None] >> np.arange(n_symptoms)) & 1).astype(np.float64)


@dataclass(frozen=True)
class ObservedCounts:
    """Counts of fully observed symptom combinations, keyed by cell index.

    Bit k of a cell index is the presence of ``codes[k]``; codes are kept in
    sorted order so indices are reproducible.
    """

    codes: tuple[str, ...]
    counts: Mapping[int, int]

    def __post_init__(self):
        if tuple(sorted(self.codes)) != self.codes:
            raise ValidationError("codes must be sorted")
        n = 1 << len(self.codes)
        for cell, c in self.counts.items():
            if not 0 <= cell < n:
                raise ValidationError(f"cell index {cell} out of range for {len(self.codes)} symptoms")
            if c < 0:
                raise ValidationError(f"negative count for cell {cell}")

    @property
    def total(self) -> int:
        return int(sum(self.counts.values()))

    def vector(self) -> np.ndarray:
        out = np.zeros(1 << len(self.codes))
        for cell, c in self.counts.items():
            out[cell] = c
        return out

    @staticmethod
    def from_cells(codes: Sequence[str], cells: Iterable[int]) -> "ObservedCounts":
        counts: dict[int, int] = {}
        for cell in cells:
            counts[int(cell)] = counts.get(int(cell), 0) + 1
        return ObservedCounts(codes=tuple(sorted(codes)), counts=counts)

    @staticmethod
    def from_rows(codes: Sequence[str], rows: Iterable[Mapping[str, int]]) -> "ObservedCounts":
        """Rows are full presence assignments over ``codes``."""
        ordered = tuple(sorted(codes))
        pos = {c: k for k, c in enumerate(ordered)}
        cells = []
        for row in rows:
            cell = 0
            for c in ordered:
                if c not in row:
                    raise ValidationError(f"row missing code {c!r}")
                if row[c]:
                    cell |= 1 << pos[c]
            cells.append(cell)
        return ObservedCounts.from_cells(ordered, cells)


@dataclass(frozen=True)
class MaxentConfig:
    epsilon: float
    lambdas: tuple[float, ...] | None = None
    step: float | None = None
    max_iter: int = 200_000
    tol: float = 1e-8

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")
        if self.lambdas is not None and any(l < 0 for l in self.lambdas):
            raise ValidationError("lambdas must be >= 0")


@dataclass(frozen=True)
class SolveInfo:
    iterations: int
    max_residual: float
    dual: np.ndarray
    step: float


@dataclass(frozen=True)
class JointTable:
    """Fitted joint over the presence combinations of one disease's typicals."""

    disease_id: str
    codes: tuple[str, ...]
    probs: np.ndarray
    marginals: np.ndarray
    min_active: int = 0
    fit: SolveInfo | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        n = 1 << len(self.codes)
        if self.probs.shape != (n,):
            raise ValidationError(f"probs must have length {n}")
        if tuple(sorted(self.codes)) != self.codes:
            raise ValidationError("codes must be sorted")
        if np.any(self.probs < -1e-12):
            raise ValidationError("cell probabilities must be non-negative")
        if abs(float(self.probs.sum()) - 1.0) > 1e-8:
            raise ValidationError("cell probabilities must sum to 1")
        pops = bit_patterns(len(self.codes)).sum(axis=1)
        if np.any(self.probs[pops < self.min_active] > 0):
            raise ValidationError("impossible combinations must carry zero probability")
        m = self.probs @ bit_patterns(len(self.codes))
        if np.max(np.abs(m - self.marginals)) > MARGINAL_CONSISTENCY_TOL:
            raise ValidationError("marginals inconsistent with cell probabilities")

    @property
    def n_symptoms(self) -> int:
        return len(self.codes)

    def impossible_cells(self) -> np.ndarray:
        pops = bit_patterns(self.n_symptoms).sum(axis=1)
        return np.flatnonzero(pops < self.min_active)

    def code_position(self, code: str) -> int:
        try:
            return self.codes.index(code)
        except ValueError:
            raise UnknownCodeError(f"{code!r} is not a typical symptom of {self.disease_id!r}") from None

    def query(self, assignment: Mapping[str, int]) -> float:
        """Probability of a partial presence assignment (codes not mentioned
        are marginalized out)."""
        mask = np.ones(1 << self.n_symptoms, dtype=bool)
        bits = bit_patterns(self.n_symptoms)
        for code, val in assignment.items():
            k = self.code_position(code)
            mask &= bits[:, k] == (1 if val else 0)
        return float(self.probs[mask].sum())

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n cell indices from the joint."""
        return rng.choice(len(self.probs), size=n, p=self.probs)

    @staticmethod
    def from_independent_marginals(
        disease_id: str, codes: Sequence[str], marginals: Mapping[str, float]
    ) -> "JointTable":
        """Product-form joint; no co-occurrence constraint."""
        ordered = tuple(sorted(codes))
        p = np.array([marginals[c] for c in ordered])
        bits = bit_patterns(len(ordered))
        probs = np.prod(np.where(bits == 1, p, 1.0 - p), axis=1)
        return JointTable(disease_id=disease_id, codes=ordered, probs=probs, marginals=p, min_active=0)


def _bisect_observed(counts, eps, shift, iters=64):
    """Root of N/p - eps*log(p) - eps + shift = 0 on [BISECT_FLOOR, 1].

    The left side is strictly decreasing in p; if it is still non-negative at
    p = 1 the root is clamped there (the simplex multiplier will pull it back
    on later iterations).
    """
    hi = np.ones_like(counts)
    f_hi = counts - eps + shift
    done_hi = f_hi >= 0
    lo = np.full_like(counts, BISECT_FLOOR)
    base = shift - eps
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        f_mid = counts / mid - eps * np.log(mid) + base
        take_hi = f_mid > 0
        lo = np.where(take_hi, mid, lo)
        hi = np.where(take_hi, hi, mid)
    out = 0.5 * (lo + hi)
    return np.where(done_hi, 1.0, out)


def solve_maxent(
    expert: Sequence[float],
    counts: ObservedCounts | None,
    cfg: MaxentConfig,
    min_symptoms: int = 1,
    *,
    codes: Sequence[str] | None = None,
    disease_id: str = "",
    initial_dual: np.ndarray | None = None,
) -> JointTable:
    """Fit the joint for one disease.

    ``expert`` holds the stated marginals in code order; ``cfg.lambdas`` their
    confidences. ``counts`` may be None when no examinations are available.
    ``initial_dual`` warm-starts the multipliers (e.g. along a sweep).
    """
    expert = np.asarray(expert, dtype=np.float64)
    K = expert.shape[0]
    n = 1 << K
    if codes is None:
        codes = tuple(f"s{k:03d}" for k in range(K))
    codes = tuple(codes)
    if len(codes) != K:
        raise ValidationError("codes length must match expert marginals")
    lam = np.ones(K) if cfg.lambdas is None else np.asarray(cfg.lambdas, dtype=np.float64)
    if lam.shape[0] != K:
        raise ValidationError("lambdas length must match expert marginals")
    if not 0 <= min_symptoms <= K:
        raise ValidationError(f"min_symptoms must lie in [0, {K}]")

    bits = bit_patterns(K)
    pops = bits.sum(axis=1)
    admissible = pops >= min_symptoms
    if not admissible.any():
        raise InfeasibleError("no admissible combination")

    N = np.zeros(n) if counts is None else counts.vector()
    if counts is not None and tuple(counts.codes) != codes:
        raise ValidationError("counts indexed over different codes")
    if np.any(N[~admissible] > 0):
        bad = int(np.flatnonzero((~admissible) & (N > 0))[0])
        raise InfeasibleError(
            f"cell {bad:0{K}b} was observed {int(N[bad])} times but has fewer than "
            f"{min_symptoms} present symptoms"
        )

    expert = np.clip(expert, EXPERT_CLIP, 1.0 - EXPERT_CLIP)
    logit_e = np.log(expert) - np.log1p(-expert)
    eps = float(cfg.epsilon)

    # a bit forced present by the admissibility pattern cannot obey a smooth
    # marginal target; its constraint is dropped and the marginal read off pi
    free_bit = np.array([bool(np.any(admissible & (bits[:, k] == 0))) for k in range(K)])
    pinned = (lam > 0) & free_bit

    zero_cells = admissible & (N == 0)
    pos_cells = admissible & (N > 0)
    pos_idx = np.flatnonzero(pos_cells)
    pos_N = N[pos_idx]

    nu = np.zeros(K + 1) if initial_dual is None else np.array(initial_dual, dtype=np.float64)
    if nu.shape != (K + 1,):
        raise ValidationError("initial_dual must have length K + 1")
    step0 = cfg.step if cfg.step is not None else 0.5
    step = step0
    prev_res = np.inf
    last_update = np.inf

    pi = np.zeros(n)
    dpi = np.zeros(n)
    iterations = 0
    res = np.inf
    for iterations in range(1, cfg.max_iter + 1):
        shift = eps * (nu[0] + bits @ nu[1:])
        pi[:] = 0.0
        expo = np.clip(-1.0 + shift[zero_cells] / eps, None, 30.0)
        pi[zero_cells] = np.exp(expo)
        if pos_idx.size:
            # far from convergence a coarse inner root suffices
            inner = 24 if prev_res > 1e-3 else 64
            pi[pos_idx] = _bisect_observed(pos_N, eps, shift[pos_idx], iters=inner)

        m = pi @ bits
        marg = np.where(pinned, 1.0 / (1.0 + np.exp(-(logit_e - nu[1:] / np.maximum(lam, 1e-300)))), m)
        r0 = pi.sum() - 1.0
        rk = m - marg
        res = max(abs(r0), float(np.max(np.abs(rk))) if K else 0.0)
        if res <= cfg.tol and last_update <= cfg.tol:
            break
        # each cell responds to its own dual shift at a known rate (pi for a
        # Gibbs cell, eps*pi^2/(N + eps*pi) for an observed one, the sigmoid
        # slope over lambda on the target side), so the dual steps are scaled
        # by that curvature; observed cells would otherwise pin the residual
        # at a fixed step for count totals far above epsilon
        dpi[:] = 0.0
        dpi[zero_cells] = pi[zero_cells]
        if pos_idx.size:
            pp = pi[pos_idx]
            dpi[pos_idx] = eps * pp * pp / (pos_N + eps * pp)
        curv0 = float(dpi.sum())
        curv_k = dpi @ bits + np.where(pinned, marg * (1.0 - marg) / np.maximum(lam, 1e-300), 0.0)
        # the residual jitters a few percent while descending, so only a
        # clear increase triggers a halving; stability earns the step back
        if res > prev_res * 1.1:
            step *= 0.5
        else:
            step = min(step0, step * 1.02)
        prev_res = res
        d0 = step * r0 / max(curv0, 1e-300)
        dk = step * rk / np.maximum(curv_k, 1e-300)
        nu[0] -= d0
        nu[1:] -= dk
        # measured as the constraint-space displacement, not the raw dual
        # step, which grows without bound as curvature vanishes
        last_update = step * res
    else:
        raise ConvergenceError(
            f"maxent solve stalled at residual {res:.3e} after {cfg.max_iter} iterations",
            residual=res,
            iterations=cfg.max_iter,
        )

    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    marginals = pi @ bits
    info = SolveInfo(iterations=iterations, max_residual=res, dual=nu.copy(), step=step)
    return JointTable(
        disease_id=disease_id,
        codes=codes,
        probs=pi,
        marginals=marginals,
        min_active=min_symptoms,
        fit=info,
    )


def fit_disease_model(
    kb,
    disease_id: str,
    counts: ObservedCounts | None = None,
    c: float = 1.8,
    cfg: MaxentConfig | None = None,
) -> JointTable:
    """Fit one disease's joint from its knowledge-base entry.

    ``cfg`` overrides the default configuration (epsilon from the cell-count
    heuristic with factor ``c``, confidences from the entry).
    """
    d = kb.disease(disease_id)
    ordered = sorted(d.typicals, key=lambda t: t.code)
    expert = [t.p for t in ordered]
    if cfg is None:
        cfg = MaxentConfig(
            epsilon=heuristic_epsilon(c, len(ordered)),
            lambdas=tuple(t.confidence for t in ordered),
        )
    return solve_maxent(
        expert,
        counts,
        cfg,
        min_symptoms=d.min_symptoms,
        codes=[t.code for t in ordered],
        disease_id=disease_id,
    )


@dataclass(frozen=True)
class GroupFactorization:
    """Joint split by organ groups: per-group conditional tables (given the
    group shows at least one symptom) glued by a joint over group indicators."""

    disease_id: str
    group_keys: tuple[str, ...]
    members: Mapping[str, JointTable]
    group_table: JointTable
    code_group: Mapping[str, str]

    def __post_init__(self):
        if self.group_table.codes != tuple(sorted(self.group_keys)):
            raise ValidationError("group_table must be indexed by the sorted group keys")
        for key in self.group_keys:
            if key not in self.members:
                raise ValidationError(f"missing member table for group {key!r}")
            if self.members[key].min_active < 1:
                raise ValidationError("member tables must exclude the all-absent combination")

    @property
    def codes(self) -> tuple[str, ...]:
        out: list[str] = []
        for key in self.group_keys:
            out.extend(self.members[key].codes)
        return tuple(sorted(out))

    def query(self, assignment: Mapping[str, int]) -> float:
        """Total-probability expansion over the on/off states of the groups
        touched by the assignment."""
        by_group: dict[str, dict[str, int]] = {}
        for code, val in assignment.items():
            g = self.code_group.get(code)
            if g is None:
                raise UnknownCodeError(f"{code!r} is not a typical symptom of {self.disease_id!r}")
            by_group.setdefault(g, {})[code] = 1 if val else 0
        touched = sorted(by_group)
        if not touched:
            return 1.0
        total = 0.0
        for config in range(1 << len(touched)):
            states = {g: (config >> i) & 1 for i, g in enumerate(touched)}
            term = self.group_table.query(states)
            if term == 0.0:
                continue
            for g in touched:
                part = by_group[g]
                if states[g] == 0:
                    if any(v == 1 for v in part.values()):
                        term = 0.0
                        break
                else:
                    term *= self.members[g].query(part)
                if term == 0.0:
                    break
            total += term
        return total


def independence_group_marginal(ps: Sequence[float]) -> float:
    """Probability that at least one of independently occurring symptoms shows."""
    out = 1.0
    for p in ps:
        out *= 1.0 - p
    return 1.0 - out


def fit_group_model(
    kb,
    disease_id: str,
    grouping: Mapping[str, str],
    c: float = 1.8,
    min_active_groups: int | None = None,
    group_marginals: Mapping[str, float] | None = None,
    group_confidence: float = 1.0,
) -> GroupFactorization:
    """Fit a grouped joint for one disease.

    ``grouping`` maps each typical code to a group key. Group marginals that
    are not supplied are treated as unknown at the indicator level (their
    constraint is left free) but are approximated by independence when scaling
    the member marginals to their conditional form. ``min_active_groups``
    defaults to the entry's minimum symptom count, interpreted at the group
    level.
    """
    d = kb.disease(disease_id)
    tmap = d.typical_map()
    if set(grouping) != set(d.codes):
        raise ValidationError("grouping must cover exactly the disease's typical codes")
    keys = tuple(sorted(set(grouping.values())))
    members: dict[str, JointTable] = {}
    approx_on: dict[str, float] = {}
    for key in keys:
        codes = sorted(c_ for c_ in d.codes if grouping[c_] == key)
        ps = [tmap[c_].p for c_ in codes]
        lam = [tmap[c_].confidence for c_ in codes]
        p_on = (
            group_marginals[key]
            if group_marginals is not None and key in group_marginals
            else independence_group_marginal(ps)
        )
        approx_on[key] = p_on
        cond = np.clip(np.array(ps) / max(p_on, EXPERT_CLIP), EXPERT_CLIP, 1.0 - EXPERT_CLIP)
        cfg = MaxentConfig(epsilon=heuristic_epsilon(c, len(codes)), lambdas=tuple(lam))
        members[key] = solve_maxent(
            cond, None, cfg, min_symptoms=1, codes=codes, disease_id=disease_id
        )
    if min_active_groups is None:
        min_active_groups = min(d.min_symptoms, len(keys))
    if min_active_groups > len(keys):
        raise InfeasibleError(
            f"min_active_groups {min_active_groups} exceeds the {len(keys)} groups"
        )
    lam_groups = tuple(
        group_confidence if group_marginals is not None and key in group_marginals else 0.0
        for key in keys
    )
    cfg = MaxentConfig(epsilon=heuristic_epsilon(c, len(keys)), lambdas=lam_groups)
    group_table = solve_maxent(
        [approx_on[key] for key in keys],
        None,
        cfg,
        min_symptoms=min_active_groups,
        codes=keys,
        disease_id=disease_id,
    )
    return GroupFactorization(
        disease_id=disease_id,
        group_keys=keys,
        members=members,
        group_table=group_table,
        code_group=dict(grouping),
    )


def query_joint(model: JointTable | GroupFactorization, assignment: Mapping[str, int]) -> float:
    """Probability of a partial presence assignment under either model form."""
    return model.query(assignment)
