"""Live consultation sessions over trained policies, with an HTTP front.

A session accumulates answers given at any ontology precision, keeps the
disease posterior current under the fuzzy-evidence semantics, and serves
ranked next-symptom recommendations from the policy artifact that covers
the active part of the examination. Sessions live in memory; artifacts are
shared read-only across sessions.
"""

from __future__ import annotations

import secrets
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from pydantic import BaseModel

from .artifacts import PolicyArtifact, load_policy
from .deeprl import fuzzy_q
from .env import (
    ENTROPY_EPS,
    OTHER_ID,
    Belief,
    EnvModel,
    FuzzyEvidence,
    apply_deterministic_rules,
    fuzzy_posterior,
    is_terminal,
    state_from_assignment,
)
from .env import FUZZY_BUDGET
from .errors import (
    ArtifactError,
    ContradictionError,
    InfeasibleError,
    RaredxError,
    TooImpreciseError,
    UnknownCodeError,
    ValidationError,
)
from .kb import KnowledgeBase

SCHEMA_VERSION = 1
RECOMMENDATION_COUNT = 5


class UnknownResourceError(RaredxError):
    """A knowledge base, policy bundle, or session id is not registered."""

    def __init__(self, kind: str, ident: str):
        super().__init__(f"unknown {kind} {ident!r}")
        self.kind = kind
        self.ident = ident


class SessionConcludedError(RaredxError):
    """The session already reached a conclusion and takes no more answers."""


def _prob_display(p: float) -> str:
    return f"{100.0 * p:.2f}%"


def _score_display(v: float) -> str:
    return f"{v:.3f}"


def _posterior_payload(b: Belief) -> list[dict]:
    ordered = sorted(b.probs.items(), key=lambda kv: (-kv[1], kv[0]))
    return [
        {"id": d, "probability": p, "display": _prob_display(p)}
        for d, p in ordered
    ]


@dataclass
class Session:
    """One consultation: the answers so far and the payloads they imply."""

    id: str
    kb_id: str
    policy_id: str
    eps: float
    history: list[dict] = field(default_factory=list)
    overlooked: list[tuple[str, bool]] = field(default_factory=list)
    evidence: FuzzyEvidence = field(default_factory=FuzzyEvidence)
    status: str = "active"
    task_code: str | None = None
    serving_code: str | None = None
    entropy: float = 0.0
    posterior: list[dict] = field(default_factory=list)
    recommendations: list[dict] = field(default_factory=list)
    advisory: str | None = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


def load_bundle(path) -> dict[str, PolicyArtifact]:
    """Read every policy artifact in a directory, keyed by its task's
    initial symptom."""
    out: dict[str, PolicyArtifact] = {}
    files = sorted(Path(path).glob("*.json"))
    if not files:
        raise ArtifactError(f"no policy artifacts under {path}")
    for f in files:
        art = load_policy(f)
        if art.kind == "energy":
            # recommendation scores come from per-action values, which an
            # energy policy does not expose
            raise ArtifactError(f"{f} holds an energy policy, which cannot serve consultations")
        if art.task.initial in out:
            raise ArtifactError(f"duplicate policy for task {art.task.initial!r}")
        out[art.task.initial] = art
    return out


class ConsultationService:
    """Registries plus the session state machine; the HTTP layer only
    translates payloads and error codes."""

    def __init__(self):
        self.kbs: dict[str, KnowledgeBase] = {}
        self.models: dict[str, Mapping] = {}
        self.bundles: dict[str, dict[str, PolicyArtifact]] = {}
        self.sessions: dict[str, Session] = {}
        self._envs: dict[tuple[str, str], EnvModel] = {}

    def register_kb(self, kb_id: str, kb: KnowledgeBase, models: Mapping | None = None) -> None:
        self.kbs[kb_id] = kb
        if models is not None:
            self.models[kb_id] = dict(models)

    def register_bundle(self, policy_id: str, bundle: Mapping[str, PolicyArtifact]) -> None:
        self.bundles[policy_id] = dict(bundle)

    # -- lookups ----------------------------------------------------------

    def _kb(self, kb_id: str) -> KnowledgeBase:
        if kb_id not in self.kbs:
            raise UnknownResourceError("knowledge base", kb_id)
        return self.kbs[kb_id]

    def _bundle(self, policy_id: str) -> dict[str, PolicyArtifact]:
        if policy_id not in self.bundles:
            raise UnknownResourceError("policy", policy_id)
        return self.bundles[policy_id]

    def session(self, session_id: str) -> Session:
        if session_id not in self.sessions:
            raise UnknownResourceError("session", session_id)
        return self.sessions[session_id]

    def _env(self, kb_id: str, initial: str) -> EnvModel:
        key = (kb_id, initial)
        if key not in self._envs:
            kb = self._kb(kb_id)
            models = self.models.get(kb_id)
            if models is None:
                self._envs[key] = EnvModel.independence(kb, initial)
            else:
                self._envs[key] = EnvModel.for_task(kb, initial, models)
        return self._envs[key]

    # -- evidence handling ------------------------------------------------

    @staticmethod
    def _fold(kb: KnowledgeBase, answers) -> FuzzyEvidence:
        ev = FuzzyEvidence()
        for code, presence in answers:
            ev = apply_deterministic_rules(kb.ontology, ev, code, presence)
        return ev

    @staticmethod
    def _combo_count(ev: FuzzyEvidence) -> int:
        n = 1
        for _, cands in ev.pending:
            n *= len(cands)
        return n

    def _likelihood_evidence(
        self, kb: KnowledgeBase, answers: list[tuple[str, bool]], overlooked: list[tuple[str, bool]]
    ) -> tuple[FuzzyEvidence, list[str]]:
        """Evidence that actually enters the posterior.

        Answers already overlooked stay excluded; if the remainder still
        enumerates past the completion budget, the most recent imprecise
        positives are overlooked in turn until it fits.
        """
        newly: list[str] = []
        while True:
            kept = [a for a in answers if a not in overlooked]
            ev = self._fold(kb, kept)
            if self._combo_count(ev) <= FUZZY_BUDGET:
                return ev, newly
            vague = [
                (code, presence)
                for code, presence in kept
                if presence and code not in kb.ontology.base_level
                and kb.ontology.base_descendants(code)
            ]
            # rules above guarantee at least one pending entry exists here
            overlooked.append(vague[-1])
            newly.append(vague[-1][0])

    @staticmethod
    def _present_base(kb: KnowledgeBase, ev: FuzzyEvidence) -> set[str]:
        present = {c for c, v in ev.resolved.items() if v == 1 and c in kb.ontology.base_level}
        for _, cands in ev.pending:
            if len(cands) == 1:
                present.add(cands[0])
        return present

    def _anchor(self, kb: KnowledgeBase, ev: FuzzyEvidence, bundle) -> str | None:
        """First answered positive that resolves to a base symptom with a
        policy; this fixes the candidate-disease pool for the session."""
        present = self._present_base(kb, ev)
        for code, presence in ev.answered:
            if not presence:
                continue
            cands = (code,) if code in kb.ontology.base_level else kb.ontology.base_descendants(code)
            hits = sorted(c for c in cands if c in present and c in bundle)
            if hits:
                return hits[0]
        return None

    def _serving(self, kb: KnowledgeBase, ev: FuzzyEvidence, bundle, anchor: str) -> str:
        """Most recent positive inside the anchor task that has its own
        policy; crossing into a solved sub-space swaps the serving network."""
        task = bundle[anchor].task
        eligible = {anchor} | (set(bundle) & set(task.relevant))
        present = self._present_base(kb, ev)
        out = anchor
        for code, presence in ev.answered:
            if not presence:
                continue
            cands = (code,) if code in kb.ontology.base_level else kb.ontology.base_descendants(code)
            hits = sorted(c for c in cands if c in present and c in eligible)
            if hits:
                out = hits[0]
        return out

    # -- payload computation ----------------------------------------------

    def _entry_points(self, kb: KnowledgeBase, bundle, ev: FuzzyEvidence) -> list[dict]:
        """Ranking of the tasks a consultation could open with, weighted by
        the prior mass behind each initial symptom."""
        rows = []
        for code in sorted(bundle):
            if ev.resolved.get(code) is not None:
                continue
            mass = sum(
                d.prior * d.typical_map()[code].p
                for d in kb.diseases
                if code in d.codes
            )
            rows.append(
                {
                    "code": code,
                    "score": mass,
                    "display": _score_display(mass),
                    "rationale": "entry-point",
                }
            )
        rows.sort(key=lambda r: (-r["score"], r["code"]))
        return rows[:RECOMMENDATION_COUNT]

    def _policy_recommendations(
        self, kb_id: str, bundle, serving: str, assignments, resolved: Mapping[str, int]
    ) -> list[dict]:
        art = bundle[serving]
        env = self._env(kb_id, serving)
        weighted = [(state_from_assignment(env, a.values), a.weight) for a in assignments]
        q = fuzzy_q(art.policy, weighted)
        rows = []
        for i, score in enumerate(q):
            code = env.codes[i + 1]
            if not np.isfinite(score) or resolved.get(code) is not None:
                continue
            rows.append(
                {
                    "code": code,
                    "score": float(score),
                    "display": _score_display(float(score)),
                    "rationale": "policy",
                }
            )
        rows.sort(key=lambda r: (-r["score"], r["code"]))
        return rows[:RECOMMENDATION_COUNT]

    def _prior_belief(self, kb: KnowledgeBase) -> Belief:
        probs = {d.id: d.prior for d in kb.diseases}
        probs[OTHER_ID] = kb.other_prior
        return Belief.from_probs(probs)

    def _refresh(self, s: Session, answers: list[tuple[str, bool]]) -> None:
        """Recompute everything the session serves from the answer list.

        Raises on contradiction or unknown codes without touching the
        session; commits the new state otherwise.
        """
        kb = self._kb(s.kb_id)
        bundle = self._bundle(s.policy_id)
        full = self._fold(kb, answers)
        overlooked = list(s.overlooked)
        lik, newly_overlooked = self._likelihood_evidence(kb, answers, overlooked)
        anchor = self._anchor(kb, lik, bundle)

        if anchor is None:
            belief = self._prior_belief(kb)
            assignments = ()
            serving = None
        else:
            env = self._env(s.kb_id, anchor)
            belief, assignments = fuzzy_posterior(env, lik)
            serving = self._serving(kb, lik, bundle, anchor)

        s.evidence = full
        s.overlooked = overlooked
        s.task_code = anchor
        s.serving_code = serving
        s.entropy = belief.entropy
        s.posterior = _posterior_payload(belief)
        if is_terminal(belief, s.eps):
            s.status = "concluded"
        if s.status == "concluded":
            s.recommendations = []
        elif anchor is None:
            s.recommendations = self._entry_points(kb, bundle, lik)
        else:
            s.recommendations = self._policy_recommendations(
                s.kb_id, bundle, serving, assignments, full.resolved
            )
        if newly_overlooked:
            s.advisory = (
                "answer too imprecise: "
                + ", ".join(sorted(set(newly_overlooked)))
                + " stored but not used for the posterior"
            )
        else:
            s.advisory = None

    # -- operations --------------------------------------------------------

    def create_session(self, kb_id: str, policy_id: str, eps: float | None = None) -> Session:
        self._kb(kb_id)
        self._bundle(policy_id)
        s = Session(
            id=secrets.token_hex(12),
            kb_id=kb_id,
            policy_id=policy_id,
            eps=ENTROPY_EPS if eps is None else float(eps),
        )
        if s.eps <= 0:
            raise ValidationError("entropy threshold must be positive")
        self._refresh(s, [])
        self.sessions[s.id] = s
        return s

    def submit_answer(self, session_id: str, code: str, presence: bool) -> Session:
        s = self.session(session_id)
        with s.lock:
            if s.status == "concluded":
                raise SessionConcludedError(f"session {session_id} is concluded")
            answers = [(h["code"], h["presence"]) for h in s.history]
            answers.append((code, bool(presence)))
            self._refresh(s, answers)
            entry = {"code": code, "presence": bool(presence), "timestamp": time.time()}
            if s.advisory:
                entry["advisory"] = s.advisory
            s.history.append(entry)
        return s

    def close_session(self, session_id: str) -> Session:
        s = self.session(session_id)
        with s.lock:
            if s.status != "concluded":
                s.status = "concluded"
                s.recommendations = []
                s.advisory = None
        return s


def session_payload(s: Session) -> dict:
    top = s.posterior[0] if s.posterior else None
    return {
        "schema": SCHEMA_VERSION,
        "session": s.id,
        "status": s.status,
        "kb": s.kb_id,
        "policy": s.policy_id,
        "task": s.task_code,
        "serving": s.serving_code,
        "entropy": {
            "value": s.entropy,
            "display": f"{s.entropy:.6f}",
            "threshold": s.eps,
            "concluded": s.status == "concluded",
        },
        "posterior": s.posterior,
        "recommendations": s.recommendations,
        "conclusion": top if s.status == "concluded" else None,
        "advisory": s.advisory,
        "history": [dict(h) for h in s.history],
    }


def posterior_payload(s: Session) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "session": s.id,
        "status": s.status,
        "entropy": {
            "value": s.entropy,
            "display": f"{s.entropy:.6f}",
            "threshold": s.eps,
            "concluded": s.status == "concluded",
        },
        "posterior": s.posterior,
    }


def recommendations_payload(s: Session) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "session": s.id,
        "status": s.status,
        "recommendations": s.recommendations,
    }


# -- HTTP front ------------------------------------------------------------

# checked in declaration order, most specific first
_HTTP_ERRORS: tuple[tuple[type, int, str], ...] = (
    (UnknownResourceError, 404, "unknown-resource"),
    (UnknownCodeError, 404, "unknown-code"),
    (ContradictionError, 409, "contradiction"),
    (SessionConcludedError, 409, "session-concluded"),
    (InfeasibleError, 409, "infeasible-evidence"),
    (TooImpreciseError, 422, "too-imprecise"),
    (ValidationError, 422, "invalid-request"),
    (ArtifactError, 500, "artifact-error"),
    (RaredxError, 400, "request-failed"),
)


def _error_body(exc: RaredxError) -> tuple[int, dict]:
    status, code = 400, "request-failed"
    for cls, st, c in _HTTP_ERRORS:
        if isinstance(exc, cls):
            status, code = st, c
            break
    details: dict = {}
    if isinstance(exc, ContradictionError):
        details = {"code": exc.code, "conflicts_with": exc.other}
    elif isinstance(exc, UnknownResourceError):
        details = {"kind": exc.kind, "id": exc.ident}
    return status, {"code": code, "message": str(exc), "details": details}


class CreateSessionBody(BaseModel):
    kb: str
    policy: str
    eps: float | None = None


class AnswerBody(BaseModel):
    code: str
    presence: bool


def http_app(service: ConsultationService):
    """FastAPI application over one service instance."""
    from fastapi import FastAPI
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import JSONResponse

    app = FastAPI(title="raredx consultation service")

    @app.exception_handler(RaredxError)
    async def on_raredx_error(request, exc: RaredxError):
        status, body = _error_body(exc)
        return JSONResponse(status_code=status, content=body)

    @app.exception_handler(RequestValidationError)
    async def on_bad_request(request, exc: RequestValidationError):
        details = [{"loc": list(e["loc"]), "msg": e["msg"]} for e in exc.errors()]
        return JSONResponse(
            status_code=422,
            content={
                "code": "invalid-request",
                "message": "request body failed validation",
                "details": details,
            },
        )

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "schema": SCHEMA_VERSION}

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody):
        return session_payload(service.create_session(body.kb, body.policy, body.eps))

    @app.post("/sessions/{sid}/answers")
    def submit_answer(sid: str, body: AnswerBody):
        return session_payload(service.submit_answer(sid, body.code, body.presence))

    @app.post("/sessions/{sid}/close")
    def close_session(sid: str):
        return session_payload(service.close_session(sid))

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        return session_payload(service.session(sid))

    @app.get("/sessions/{sid}/posterior")
    def get_posterior(sid: str):
        return posterior_payload(service.session(sid))

    @app.get("/sessions/{sid}/recommendations")
    def get_recommendations(sid: str):
        return recommendations_payload(service.session(sid))

    return app
