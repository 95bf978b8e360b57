"""Knowledge base: ontology forest, disease entries, loading and synthesis.

A knowledge base couples a single-parent symptom ontology with a list of
diseases. Each disease carries a prior, a minimum number of co-occurring
typical symptoms, and its typical symptoms with expert marginal frequencies
and confidence weights. Everything downstream (model fitting, task
construction, the consultation service) goes through these types.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InfeasibleError, UnknownCodeError, ValidationError

PRIOR_SUM_TOL = 1e-9


@dataclass(frozen=True)
class Ontology:
    """Single-parent forest of symptom codes with a designated base level.

    ``parent`` maps child code to parent code; roots are absent from the map.
    ``base_level`` is the precision level at which diseases list their typical
    symptoms and at which answers are ultimately resolved.
    """

    parent: Mapping[str, str]
    base_level: frozenset[str]
    nodes: frozenset[str]
    _children: Mapping[str, tuple[str, ...]] = field(repr=False, default_factory=dict)

    @staticmethod
    def from_edges(edges: Iterable[Sequence[str]], base_level: Iterable[str]) -> "Ontology":
        parent: dict[str, str] = {}
        nodes: set[str] = set()
        for i, edge in enumerate(edges):
            if len(edge) != 2:
                raise ValidationError("edge must be a [child, parent] pair", field=f"ontology.edges[{i}]")
            child, par = edge
            nodes.add(child)
            nodes.add(par)
            if child in parent and parent[child] != par:
                raise ValidationError(
                    f"node {child!r} has two parents ({parent[child]!r}, {par!r}); the ontology must be a forest",
                    field=f"ontology.edges[{i}]",
                )
            parent[child] = par
        base = frozenset(base_level)
        nodes |= base
        # reject cycles: walk each chain with a visited set
        for start in parent:
            seen = {start}
            cur = start
            while cur in parent:
                cur = parent[cur]
                if cur in seen:
                    raise ValidationError(f"cycle through {cur!r}", field="ontology.edges")
                seen.add(cur)
        children: dict[str, list[str]] = {}
        for child, par in parent.items():
            children.setdefault(par, []).append(child)
        onto = Ontology(
            parent=dict(parent),
            base_level=base,
            nodes=frozenset(nodes),
            _children={k: tuple(sorted(v)) for k, v in children.items()},
        )
        for code in sorted(base):
            anc = set(onto.ancestors(code))
            overlap = anc & base
            if overlap:
                warnings.warn(
                    f"base-level code {code!r} has base-level ancestors {sorted(overlap)}",
                    stacklevel=2,
                )
        return onto

    def _require(self, code: str) -> None:
        if code not in self.nodes:
            raise UnknownCodeError(f"unknown ontology code {code!r}")

    def ancestors(self, code: str) -> tuple[str, ...]:
        """Chain of ancestors from immediate parent to root, in that order."""
        self._require(code)
        out: list[str] = []
        cur = code
        while cur in self.parent:
            cur = self.parent[cur]
            out.append(cur)
        return tuple(out)

    def descendants(self, code: str) -> tuple[str, ...]:
        """All strict descendants, sorted by code."""
        self._require(code)
        out: list[str] = []
        stack = list(self._children.get(code, ()))
        while stack:
            cur = stack.pop()
            out.append(cur)
            stack.extend(self._children.get(cur, ()))
        return tuple(sorted(out))

    def children(self, code: str) -> tuple[str, ...]:
        self._require(code)
        return self._children.get(code, ())

    def base_descendants(self, code: str) -> tuple[str, ...]:
        """Base-level codes at or below ``code``, sorted."""
        self._require(code)
        if code in self.base_level:
            return (code,)
        return tuple(c for c in self.descendants(code) if c in self.base_level)

    def is_root(self, code: str) -> bool:
        self._require(code)
        return code not in self.parent


@dataclass(frozen=True)
class TypicalSymptom:
    """One typical symptom of a disease: expert marginal ``p`` with confidence
    weight ``confidence`` (0 marks the marginal as unknown)."""

    code: str
    p: float
    confidence: float = 1.0


@dataclass(frozen=True)
class DiseaseEntry:
    id: str
    prior: float
    typicals: tuple[TypicalSymptom, ...]
    min_symptoms: int = 1

    @property
    def codes(self) -> tuple[str, ...]:
        return tuple(t.code for t in self.typicals)

    def typical_map(self) -> dict[str, TypicalSymptom]:
        return {t.code: t for t in self.typicals}


@dataclass(frozen=True)
class KnowledgeBase:
    diseases: tuple[DiseaseEntry, ...]
    ontology: Ontology
    other_prior: float

    def disease(self, disease_id: str) -> DiseaseEntry:
        for d in self.diseases:
            if d.id == disease_id:
                return d
        raise UnknownCodeError(f"unknown disease {disease_id!r}")

    @property
    def disease_ids(self) -> tuple[str, ...]:
        return tuple(d.id for d in self.diseases)

    def base_codes(self) -> tuple[str, ...]:
        return tuple(sorted(self.ontology.base_level))


@dataclass(frozen=True)
class TaskSeed:
    """Conditioning of the diagnosis problem on one initial typical symptom:
    candidate diseases listing it, and the union of their remaining typicals."""

    initial: str
    diseases: tuple[str, ...]
    relevant: tuple[str, ...]

    @property
    def dim(self) -> int:
        return len(self.relevant)


def relevant_set(kb: KnowledgeBase, code: str) -> TaskSeed:
    """Candidate diseases for which ``code`` is typical, and the sorted union
    of their typical symptoms with ``code`` itself removed."""
    if code not in kb.ontology.nodes:
        raise UnknownCodeError(f"unknown ontology code {code!r}")
    diseases = tuple(d.id for d in kb.diseases if code in d.codes)
    union: set[str] = set()
    for d in kb.diseases:
        if d.id in diseases:
            union.update(d.codes)
    union.discard(code)
    return TaskSeed(initial=code, diseases=diseases, relevant=tuple(sorted(union)))


def validate_kb(data: Mapping) -> KnowledgeBase:
    """Build a KnowledgeBase from parsed JSON, raising ValidationError with a
    field path on the first violated rule."""
    if not isinstance(data, Mapping):
        raise ValidationError("knowledge base must be a JSON object")
    onto_raw = data.get("ontology")
    if not isinstance(onto_raw, Mapping):
        raise ValidationError("missing object", field="ontology")
    base_level = onto_raw.get("base_level")
    if not isinstance(base_level, list) or not base_level:
        raise ValidationError("must be a non-empty list", field="ontology.base_level")
    ontology = Ontology.from_edges(onto_raw.get("edges", []), base_level)

    raw_diseases = data.get("diseases")
    if not isinstance(raw_diseases, list) or not raw_diseases:
        raise ValidationError("must be a non-empty list", field="diseases")

    diseases: list[DiseaseEntry] = []
    seen_ids: set[str] = set()
    for i, raw in enumerate(raw_diseases):
        where = f"diseases[{i}]"
        did = raw.get("id")
        if not isinstance(did, str) or not did:
            raise ValidationError("id must be a non-empty string", field=where)
        if did in seen_ids:
            raise ValidationError(f"duplicate disease id {did!r}", field=where)
        seen_ids.add(did)
        prior = raw.get("prior")
        if not isinstance(prior, (int, float)) or not 0.0 < prior < 1.0:
            raise ValidationError("prior must lie in (0, 1)", field=f"{where}.prior")
        symptoms = raw.get("symptoms")
        if not isinstance(symptoms, list) or not symptoms:
            raise ValidationError("symptoms must be a non-empty list", field=f"{where}.symptoms")
        typicals: list[TypicalSymptom] = []
        codes_seen: set[str] = set()
        for j, s in enumerate(symptoms):
            sw = f"{where}.symptoms[{j}]"
            code = s.get("code")
            if not isinstance(code, str) or not code:
                raise ValidationError("code must be a non-empty string", field=sw)
            if code in codes_seen:
                raise ValidationError(f"duplicate typical code {code!r}", field=sw)
            codes_seen.add(code)
            if code not in ontology.nodes:
                raise ValidationError(f"code {code!r} is not an ontology node", field=sw)
            if code not in ontology.base_level:
                raise ValidationError(f"typical code {code!r} must be base-level", field=sw)
            p = s.get("p")
            if not isinstance(p, (int, float)) or not 0.0 < p < 1.0:
                raise ValidationError("p must lie in (0, 1)", field=f"{sw}.p")
            lam = s.get("lambda", 1.0)
            if not isinstance(lam, (int, float)) or lam < 0.0:
                raise ValidationError("lambda must be >= 0", field=f"{sw}.lambda")
            typicals.append(TypicalSymptom(code=code, p=float(p), confidence=float(lam)))
        min_symptoms = raw.get("min_symptoms", 1)
        if not isinstance(min_symptoms, int) or min_symptoms < 1:
            raise ValidationError("min_symptoms must be an integer >= 1", field=f"{where}.min_symptoms")
        if min_symptoms > len(typicals):
            raise ValidationError(
                f"min_symptoms {min_symptoms} exceeds the {len(typicals)} typical symptoms",
                field=f"{where}.min_symptoms",
            )
        typicals.sort(key=lambda t: t.code)
        diseases.append(
            DiseaseEntry(id=did, prior=float(prior), typicals=tuple(typicals), min_symptoms=min_symptoms)
        )

    other_prior = data.get("other_prior")
    if not isinstance(other_prior, (int, float)) or not 0.0 <= other_prior < 1.0:
        raise ValidationError("other_prior must lie in [0, 1)", field="other_prior")
    total = sum(d.prior for d in diseases) + float(other_prior)
    if abs(total - 1.0) > PRIOR_SUM_TOL:
        raise ValidationError(
            f"disease priors plus other_prior must sum to 1 (got {total!r})", field="other_prior"
        )
    return KnowledgeBase(diseases=tuple(diseases), ontology=ontology, other_prior=float(other_prior))


def kb_to_dict(kb: KnowledgeBase) -> dict:
    edges = sorted([child, par] for child, par in kb.ontology.parent.items())
    return {
        "diseases": [
            {
                "id": d.id,
                "prior": d.prior,
                "min_symptoms": d.min_symptoms,
                "symptoms": [
                    {"code": t.code, "p": t.p, "lambda": t.confidence} for t in d.typicals
                ],
            }
            for d in kb.diseases
        ],
        "ontology": {"edges": edges, "base_level": sorted(kb.ontology.base_level)},
        "other_prior": kb.other_prior,
    }


def load_kb(path: str | Path) -> KnowledgeBase:
    with open(path, "r", encoding="utf-8") as fh:
        return validate_kb(json.load(fh))


def save_kb(kb: KnowledgeBase, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(kb_to_dict(kb), fh, indent=2, sort_keys=True)
        fh.write("\n")


_MARGINAL_GRID = np.array([0.3, 0.5, 0.55, 0.7, 0.9])
_MARGINAL_WEIGHTS = np.array([0.10, 0.35, 0.10, 0.10, 0.35])


def synth_kb(
    seed: int,
    n_diseases: int,
    n_symptoms: int,
    overlap: float = 0.3,
    k_range: tuple[int, int] = (3, 19),
    group_size: int = 6,
) -> KnowledgeBase:
    """Deterministically generate a synthetic knowledge base.

    ``overlap`` is the fraction of each disease's typicals drawn from a shared
    pool; the rest come from the remaining symptom codes. ``k_range`` bounds
    the per-disease typical count. The ontology groups base symptoms under
    organ nodes of about ``group_size`` children each.
    """
    if n_diseases < 1 or n_symptoms < 1:
        raise InfeasibleError("need at least one disease and one symptom")
    k_min, k_max = k_range
    if k_min < 1 or k_max < k_min:
        raise InfeasibleError(f"bad typical-count range {k_range}")
    if k_min > n_symptoms:
        raise InfeasibleError(
            f"each disease needs at least {k_min} typicals but only {n_symptoms} symptoms exist"
        )
    k_max = min(k_max, n_symptoms)

    rng = np.random.default_rng(seed)
    width = max(3, len(str(n_symptoms - 1)))
    codes = [f"s{i:0{width}d}" for i in range(n_symptoms)]

    n_groups = max(1, math.ceil(n_symptoms / group_size))
    gwidth = max(2, len(str(n_groups - 1)))
    edges = [[codes[i], f"g{i % n_groups:0{gwidth}d}"] for i in range(n_symptoms)]

    pool_size = min(n_symptoms, max(1, round(overlap * n_symptoms))) if overlap > 0 else 0
    shared = codes[:pool_size]
    rest = codes[pool_size:]

    diseases = []
    for i in range(n_diseases):
        k = int(rng.integers(k_min, k_max + 1))
        want_shared = min(len(shared), math.ceil(overlap * k))
        if k - want_shared > len(rest):
            want_shared = k - len(rest)
            if want_shared > len(shared):
                raise InfeasibleError(
                    f"overlap {overlap} demands {k} typicals but only {n_symptoms} symptoms exist"
                )
        picked = [str(c) for c in rng.choice(shared, size=want_shared, replace=False)] if want_shared else []
        picked += [str(c) for c in rng.choice(rest, size=k - want_shared, replace=False)]
        ps = rng.choice(_MARGINAL_GRID, size=k, p=_MARGINAL_WEIGHTS)
        min_symptoms = int(rng.choice([1, 1, 1, 2])) if k >= 2 else 1
        diseases.append(
            {
                "id": f"d{i:03d}",
                "prior": 0.0,
                "min_symptoms": min_symptoms,
                "symptoms": [
                    {"code": c, "p": float(p), "lambda": 1.0}
                    for c, p in sorted(zip(picked, ps), key=lambda cp: cp[0])
                ],
            }
        )

    raw_priors = np.exp(rng.uniform(np.log(1e-3), np.log(3e-2), size=n_diseases))
    if raw_priors.sum() > 0.6:
        raw_priors *= 0.6 / raw_priors.sum()
    for d, p in zip(diseases, raw_priors):
        d["prior"] = float(round(p, 6))
    other = 1.0 - sum(d["prior"] for d in diseases)

    data = {
        "diseases": diseases,
        "ontology": {"edges": edges, "base_level": codes},
        "other_prior": other,
    }
    return validate_kb(data)
