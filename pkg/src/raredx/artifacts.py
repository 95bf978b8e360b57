"""On-disk form of trained policies and fitted disease models.

Every file is a JSON envelope with a format version, an integrity checksum
over the canonical payload encoding, and the payload itself. Reads verify
the version first (incompatible files get an explicit migration error, not
a parse failure) and the checksum second, so silent corruption cannot reach
the serving layer.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .deeprl import QNetwork, TabularQ
from .errors import ArtifactError
from .kb import TaskSeed
from .maxent import GroupFactorization, JointTable
from .policies import EnergyPolicy

FORMAT_VERSION = 1


def canonical_json(payload) -> bytes:
    """Key-sorted, whitespace-free, strict-JSON encoding; the checksum input."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def payload_checksum(payload) -> str:
    return hashlib.sha256(canonical_json(payload)).hexdigest()


def config_digest(config: Mapping | None) -> str:
    """Stable fingerprint of a training configuration."""
    return payload_checksum({k: config[k] for k in config} if config else {})


def _write_doc(path, payload) -> None:
    try:
        body = canonical_json(payload)
    except ValueError as exc:
        raise ArtifactError(f"payload is not strict JSON: {exc}") from exc
    doc = {
        "format_version": FORMAT_VERSION,
        "checksum": hashlib.sha256(body).hexdigest(),
        "payload": payload,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def _read_doc(path, expected_kinds: tuple[str, ...]) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ArtifactError(f"cannot read artifact {path}: {exc}") from exc
    if not isinstance(doc, dict) or not {"format_version", "checksum", "payload"} <= set(doc):
        raise ArtifactError(f"{path} is not a recognized artifact file")
    version = doc["format_version"]
    if version != FORMAT_VERSION:
        raise ArtifactError(
            f"{path} uses artifact format {version}, this build reads format "
            f"{FORMAT_VERSION}; re-export or migrate the artifact"
        )
    if payload_checksum(doc["payload"]) != doc["checksum"]:
        raise ArtifactError(f"checksum mismatch, {path} is corrupted")
    payload = doc["payload"]
    if payload.get("kind") not in expected_kinds:
        raise ArtifactError(
            f"{path} holds a {payload.get('kind')!r} artifact, expected one of {expected_kinds}"
        )
    return payload


@dataclass(frozen=True)
class PolicyArtifact:
    """A trained policy bound to the task it answers for."""

    kind: str
    task: TaskSeed
    policy: "TabularQ | QNetwork | EnergyPolicy"
    config: dict = field(default_factory=dict)
    report: tuple = ()

    @property
    def dim(self) -> int:
        return self.task.dim

    @property
    def symptom_order(self) -> tuple[str, ...]:
        """Code of each action index, the initial symptom first."""
        return (self.task.initial,) + self.task.relevant

    @property
    def config_digest(self) -> str:
        return config_digest(self.config)


def _task_to_json(task: TaskSeed) -> dict:
    return {
        "initial": task.initial,
        "diseases": list(task.diseases),
        "relevant": list(task.relevant),
    }


def _task_from_json(data: Mapping) -> TaskSeed:
    return TaskSeed(
        initial=data["initial"],
        diseases=tuple(data["diseases"]),
        relevant=tuple(data["relevant"]),
    )


def _cell(v: float):
    # -inf marks an already-observed action slot; JSON has no encoding for it
    return float(v) if np.isfinite(v) else None


def save_policy(path, task: TaskSeed, policy: "TabularQ | QNetwork", *,
                config: Mapping | None = None, report=()) -> None:
    """Persist a trained policy with its task binding and training config."""
    config = dict(config or {})
    payload = {
        "task": _task_to_json(task),
        "dim": task.dim,
        "symptom_order": [task.initial, *task.relevant],
        "config": config,
        "config_digest": config_digest(config),
        "report": list(report),
    }
    if isinstance(policy, TabularQ):
        if policy.dim != task.dim:
            raise ArtifactError("policy dimension does not match the task")
        payload["kind"] = "tabular"
        payload["table"] = sorted(
            [list(status), None if q is None else [_cell(v) for v in q]]
            for status, q in policy.table.items()
        )
    elif isinstance(policy, QNetwork):
        if policy.dim != task.dim:
            raise ArtifactError("policy dimension does not match the task")
        payload["kind"] = "qnet"
        payload["net"] = policy.state_dict()
    elif isinstance(policy, EnergyPolicy):
        # three scalar weights, valid for any task dimension
        payload["kind"] = "energy"
        payload["theta"] = [float(t) for t in policy.theta]
    else:
        raise ArtifactError(f"cannot persist a policy of type {type(policy).__name__}")
    _write_doc(path, payload)


def load_policy(path) -> PolicyArtifact:
    """Read a policy artifact back, verifying version and integrity."""
    payload = _read_doc(path, ("tabular", "qnet", "energy"))
    task = _task_from_json(payload["task"])
    kind = payload["kind"]
    if kind == "tabular":
        table = {
            tuple(int(v) for v in status): None if q is None else np.array(
                [-np.inf if v is None else float(v) for v in q]
            )
            for status, q in payload["table"]
        }
        policy = TabularQ(dim=int(payload["dim"]), table=table)
    elif kind == "qnet":
        policy = QNetwork.from_state_dict(payload["net"])
    else:
        policy = EnergyPolicy(theta=tuple(float(t) for t in payload["theta"]))
    dim_ok = kind == "energy" or policy.dim == task.dim
    if not dim_ok or payload["symptom_order"] != [task.initial, *task.relevant]:
        raise ArtifactError(f"inconsistent task binding in {path}")
    if payload["config_digest"] != config_digest(payload["config"]):
        raise ArtifactError(f"training config digest mismatch in {path}")
    return PolicyArtifact(
        kind=kind,
        task=task,
        policy=policy,
        config=dict(payload["config"]),
        report=tuple(payload["report"]),
    )


def _joint_to_json(t: JointTable) -> dict:
    return {
        "disease_id": t.disease_id,
        "codes": list(t.codes),
        "probs": t.probs.tolist(),
        "marginals": t.marginals.tolist(),
        "min_active": t.min_active,
    }


def _joint_from_json(data: Mapping) -> JointTable:
    return JointTable(
        disease_id=data["disease_id"],
        codes=tuple(data["codes"]),
        probs=np.asarray(data["probs"], dtype=float),
        marginals=np.asarray(data["marginals"], dtype=float),
        min_active=int(data["min_active"]),
    )


def _model_to_json(model: "JointTable | GroupFactorization") -> dict:
    if isinstance(model, JointTable):
        return {"type": "joint", **_joint_to_json(model)}
    if isinstance(model, GroupFactorization):
        return {
            "type": "group",
            "disease_id": model.disease_id,
            "group_keys": list(model.group_keys),
            "members": {k: _joint_to_json(v) for k, v in model.members.items()},
            "group_table": _joint_to_json(model.group_table),
            "code_group": dict(model.code_group),
        }
    raise ArtifactError(f"cannot persist a model of type {type(model).__name__}")


def _model_from_json(data: Mapping) -> "JointTable | GroupFactorization":
    if data["type"] == "joint":
        return _joint_from_json(data)
    if data["type"] == "group":
        return GroupFactorization(
            disease_id=data["disease_id"],
            group_keys=tuple(data["group_keys"]),
            members={k: _joint_from_json(v) for k, v in data["members"].items()},
            group_table=_joint_from_json(data["group_table"]),
            code_group=dict(data["code_group"]),
        )
    raise ArtifactError(f"unknown model type {data['type']!r}")


def save_models(path, models: Mapping[str, "JointTable | GroupFactorization"]) -> None:
    """Persist fitted per-disease joints as one bundle."""
    payload = {
        "kind": "models",
        "models": {d: _model_to_json(m) for d, m in models.items()},
    }
    _write_doc(path, payload)


def load_models(path) -> dict[str, "JointTable | GroupFactorization"]:
    """Read a fitted-model bundle; table invariants are re-checked on build."""
    payload = _read_doc(path, ("models",))
    return {d: _model_from_json(m) for d, m in payload["models"].items()}
