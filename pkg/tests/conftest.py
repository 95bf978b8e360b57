"""Shared fixtures: the three-disease worked example, small ontologies, a
seeded synthetic task generator, and exact policy evaluators."""

from __future__ import annotations

import numpy as np
import pytest

from raredx.env import BeliefEngine, KnowledgeState, posterior
from raredx.kb import validate_kb

# Three rare diseases over nine flat symptoms. d1 is an order of magnitude more
# frequent than the others; most marginals sit at 0.5 with a few strong 0.9
# markers. Used throughout as the exactly-checkable reference case.
TABLE_KB = {
    "diseases": [
        {
            "id": "d1",
            "prior": 0.042,
            "min_symptoms": 1,
            "symptoms": [
                {"code": "s1", "p": 0.50, "lambda": 1.0},
                {"code": "s2", "p": 0.55, "lambda": 1.0},
                {"code": "s3", "p": 0.50, "lambda": 1.0},
                {"code": "s5", "p": 0.90, "lambda": 1.0},
                {"code": "s8", "p": 0.50, "lambda": 1.0},
                {"code": "s9", "p": 0.50, "lambda": 1.0},
            ],
        },
        {
            "id": "d2",
            "prior": 0.0083,
            "min_symptoms": 1,
            "symptoms": [
                {"code": "s6", "p": 0.90, "lambda": 1.0},
                {"code": "s7", "p": 0.50, "lambda": 1.0},
                {"code": "s9", "p": 0.90, "lambda": 1.0},
            ],
        },
        {
            "id": "d3",
            "prior": 0.0083,
            "min_symptoms": 1,
            "symptoms": [
                {"code": "s2", "p": 0.90, "lambda": 1.0},
                {"code": "s4", "p": 0.90, "lambda": 1.0},
                {"code": "s6", "p": 0.50, "lambda": 1.0},
                {"code": "s9", "p": 0.50, "lambda": 1.0},
            ],
        },
    ],
    "ontology": {"edges": [], "base_level": [f"s{i}" for i in range(1, 10)]},
    "other_prior": 1.0 - 0.042 - 0.0083 - 0.0083,
}


@pytest.fixture
def table_kb():
    return validate_kb(TABLE_KB)


# A four-level cardiac branch next to a flat skeletal branch. Base level sits
# mid-chain on the cardiac side so there are codes both above and below it.
CARDIAC_EDGES = [
    ["ventricular-abnormality", "heart-abnormality"],
    ["septal-defect", "heart-abnormality"],
    ["hypoplastic-left-ventricle", "ventricular-abnormality"],
    ["hypoplastic-right-ventricle", "ventricular-abnormality"],
    ["hlv-moderate", "hypoplastic-left-ventricle"],
    ["vertebral-fusion", "skeletal-abnormality"],
    ["rib-anomaly", "skeletal-abnormality"],
]
CARDIAC_BASE = [
    "hypoplastic-left-ventricle",
    "hypoplastic-right-ventricle",
    "septal-defect",
    "vertebral-fusion",
    "rib-anomaly",
]


@pytest.fixture
def cardiac_kb():
    data = {
        "diseases": [
            {
                "id": "syndrome-a",
                "prior": 0.01,
                "min_symptoms": 1,
                "symptoms": [
                    {"code": "hypoplastic-left-ventricle", "p": 0.7, "lambda": 1.0},
                    {"code": "septal-defect", "p": 0.4, "lambda": 1.0},
                    {"code": "vertebral-fusion", "p": 0.6, "lambda": 1.0},
                ],
            },
            {
                "id": "syndrome-b",
                "prior": 0.02,
                "min_symptoms": 1,
                "symptoms": [
                    {"code": "hypoplastic-right-ventricle", "p": 0.8, "lambda": 1.0},
                    {"code": "septal-defect", "p": 0.5, "lambda": 1.0},
                    {"code": "rib-anomaly", "p": 0.3, "lambda": 1.0},
                ],
            },
        ],
        "ontology": {"edges": CARDIAC_EDGES, "base_level": CARDIAC_BASE},
        "other_prior": 0.97,
    }
    return validate_kb(data)


# --------------------------------------------------------------------------
# seeded synthetic tasks with private marker blocks

_GRID = np.array([0.3, 0.5, 0.55, 0.7, 0.9])
_GRID_W = np.array([0.10, 0.35, 0.10, 0.10, 0.35])
_HIGH = np.array([0.5, 0.7, 0.9])
_HIGH_W = np.array([0.2, 0.3, 0.5])


def make_task_kb(seed: int, dim: int, n_diseases: int | None = None):
    """A flat KB whose shared trigger symptom t00 yields one task of the given
    dimension. Each disease owns a private block of symptoms, the first with a
    0.9 marker marginal, so an efficient policy can actually resolve the
    posterior; leftovers are shared between two diseases."""
    rng = np.random.default_rng(seed)
    if n_diseases is None:
        n_diseases = max(2, min(8, dim // 3))
    pool = [f"t{i:02d}" for i in range(1, dim + 1)]
    order = [pool[i] for i in rng.permutation(dim)]
    block = max(2, (dim * 7 // 10) // n_diseases)
    private = [order[i * block:(i + 1) * block] for i in range(n_diseases)]
    shared = order[n_diseases * block:]
    picks = [set(p) for p in private]
    for i, c in enumerate(shared):
        picks[i % n_diseases].add(c)
        picks[int(rng.integers(n_diseases))].add(c)
    diseases = []
    for i, chosen in enumerate(picks):
        symptoms = [{"code": "t00", "p": float(rng.choice(_HIGH, p=_HIGH_W)), "lambda": 1.0}]
        strong = private[i][0] if private[i] else None
        for c in sorted(chosen):
            if c == strong:
                p = 0.9
            elif c in private[i]:
                p = float(rng.choice(_HIGH, p=_HIGH_W))
            else:
                p = float(rng.choice(_GRID, p=_GRID_W))
            symptoms.append({"code": c, "p": p, "lambda": 1.0})
        diseases.append({"id": f"d{i:02d}", "prior": 0.0, "min_symptoms": 1,
                         "symptoms": symptoms})
    pri = np.exp(rng.uniform(np.log(2e-3), np.log(3e-2), size=n_diseases))
    for d, p in zip(diseases, pri):
        d["prior"] = float(round(p, 6))
    data = {"diseases": diseases,
            "ontology": {"edges": [], "base_level": ["t00"] + pool},
            "other_prior": 1.0 - sum(d["prior"] for d in diseases)}
    return validate_kb(data)


def make_block_kb(seed: int, n_diseases: int = 10, block: int = 5):
    """A KB whose shared-trigger task is large but block-structured: each
    disease owns a disjoint private symptom block entered through a 0.9
    marker, so every private symptom's own task stays small enough for the
    tabular solver while the t00 task grows with n_diseases * block."""
    rng = np.random.default_rng(seed)
    dim = n_diseases * block
    pool = [f"t{i:02d}" for i in range(1, dim + 1)]
    order = [pool[i] for i in rng.permutation(dim)]
    diseases = []
    for i in range(n_diseases):
        mine = order[i * block:(i + 1) * block]
        symptoms = [{"code": "t00", "p": float(rng.choice(_HIGH, p=_HIGH_W)), "lambda": 1.0}]
        for c in sorted(mine):
            p = 0.9 if c == mine[0] else float(rng.choice(_GRID, p=_GRID_W))
            symptoms.append({"code": c, "p": p, "lambda": 1.0})
        diseases.append({"id": f"d{i:02d}", "prior": 0.0, "min_symptoms": 1,
                        "symptoms": symptoms})
    pri = np.exp(rng.uniform(np.log(2e-3), np.log(3e-2), size=n_diseases))
    for d, p in zip(diseases, pri):
        d["prior"] = float(round(p, 6))
    data = {"diseases": diseases,
            "ontology": {"edges": [], "base_level": ["t00"] + pool},
            "other_prior": 1.0 - sum(d["prior"] for d in diseases)}
    return validate_kb(data)


# --------------------------------------------------------------------------
# exact evaluators: expectimax over the full observation tree

def exact_policy_value(m, pol) -> float:
    """Expected number of questions the policy asks, by exhaustive recursion
    over answer outcomes under the environment model."""
    memo: dict = {}

    def walk(s):
        if s.status in memo:
            return memo[s.status]
        b = posterior(m, s)
        if b.entropy <= m.entropy_threshold or not s.unobserved():
            memo[s.status] = 0.0
            return 0.0
        a = pol(m, s, b)
        p1, _, _ = BeliefEngine(m, s).branch_stats()
        p = float(p1[a])
        out = 1.0 + p * walk(s.observe(a, True)) + (1 - p) * walk(s.observe(a, False))
        memo[s.status] = out
        return out

    return walk(KnowledgeState.initial(m.dim))


def exact_optimal_value(m) -> float:
    """Minimum expected question count over all policies (expectimax)."""
    memo: dict = {}

    def walk(s):
        if s.status in memo:
            return memo[s.status]
        b = posterior(m, s)
        if b.entropy <= m.entropy_threshold or not s.unobserved():
            memo[s.status] = 0.0
            return 0.0
        eng = BeliefEngine(m, s)
        p1, _, _ = eng.branch_stats()
        best = np.inf
        for a in s.unobserved():
            p = float(p1[a])
            best = min(best, 1.0 + p * walk(s.observe(a, True)) + (1 - p) * walk(s.observe(a, False)))
        memo[s.status] = best
        return best

    return walk(KnowledgeState.initial(m.dim))
