"""Command-line front end.

Knowledge-base tooling, joint-model fitting, policy training and evaluation,
and the consultation server, all operating on the JSON artifact files the
library reads and writes.
"""

from __future__ import annotations

import csv
import json
import warnings
from pathlib import Path

import click
import numpy as np

from .artifacts import load_models, load_policy, save_models, save_policy
from .deeprl import (
    TrainConfig,
    build_tasks,
    dqn_mc_bootstrap_train,
    dqn_mc_train,
    dqn_td_train,
    evaluate_policy,
    qnet_policy,
    tabular_policy,
    value_iteration,
)
from .env import EnvModel, KnowledgeState
from .errors import RaredxError
from .kb import load_kb, relevant_set, save_kb, synth_kb
from .maxent import ObservedCounts, fit_disease_model, fit_group_model
from .policies import energy_policy, reinforce_train
from .service import ConsultationService, http_app, load_bundle

# direct joints enumerate 2^K cells; larger diseases get the organ-group route
GROUP_FIT_ABOVE = 16

_TRAIN_DEFAULTS = {"vi": (0, 0.0), "reinforce": (1000, 0.01),
                   "dqn-mc": (200, 1e-3), "dqn-td": (200, 1e-3),
                   "dqn-mc-boot": (200, 1e-3)}


def _load_kb_checked(path):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            base = load_kb(path)
        except RaredxError as exc:
            raise click.ClickException(f"{path}: {exc}") from exc
    for w in caught:
        click.echo(f"warning: {w.message}", err=True)
    return base


def _env_builder(base, models_path):
    if models_path is None:
        return lambda initial: EnvModel.independence(base, initial)
    models = load_models(models_path)
    return lambda initial: EnvModel.for_task(base, initial, models)


@click.group()
def main():
    """Diagnosis-policy toolkit: knowledge bases, symptom models, question
    policies, and the consultation service."""


@main.group()
def kb():
    """Inspect and generate knowledge bases."""


@kb.command("validate")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def kb_validate(path):
    """Check a knowledge-base file and print a summary."""
    base = _load_kb_checked(path)
    tasks = build_tasks(base)
    dims = [t.dim for t in tasks]
    click.echo(
        f"ok: {len(base.diseases)} diseases, {len(base.ontology.nodes)} ontology nodes, "
        f"{len(base.base_codes())} base symptoms, {len(tasks)} tasks "
        f"(dim {min(dims)}..{max(dims)})"
    )


@kb.command("synth")
@click.option("--seed", type=int, required=True)
@click.option("--diseases", type=int, required=True)
@click.option("--symptoms", type=int, required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def kb_synth(seed, diseases, symptoms, out):
    """Generate a deterministic synthetic knowledge base."""
    try:
        base = synth_kb(seed, diseases, symptoms)
    except RaredxError as exc:
        raise click.ClickException(str(exc)) from exc
    save_kb(base, out)
    click.echo(f"wrote {out}: {diseases} diseases, {symptoms} base symptoms, seed {seed}")


def _read_observations(path):
    """Rows of {base code: 0/1/None}; None marks a symptom not examined."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames:
            raise click.ClickException(f"{path}: empty observations file")
        for lineno, raw in enumerate(reader, start=2):
            row = {}
            for code, cell in raw.items():
                cell = (cell or "").strip()
                if cell.upper() in ("", "NA"):
                    row[code] = None
                elif cell in ("0", "1"):
                    row[code] = int(cell)
                else:
                    raise click.ClickException(
                        f"{path}:{lineno}: column {code!r} holds {cell!r}, expected 0, 1, or NA"
                    )
            rows.append(row)
    return rows


@main.group()
def model():
    """Fit per-disease symptom models."""


@model.command("fit")
@click.option("--kb", "kb_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--obs", type=click.Path(exists=True, dir_okay=False),
              help="Examination CSV: columns are base codes, cells 0/1/NA.")
@click.option("--c", "c_factor", type=float, default=1.8, show_default=True,
              help="Smoothing-threshold factor for observed counts.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def model_fit(kb_path, obs, c_factor, out):
    """Fit every disease's joint and write one model bundle."""
    base = _load_kb_checked(kb_path)
    rows = _read_observations(obs) if obs else []
    parent = base.ontology.parent
    models = {}
    for d in base.diseases:
        usable = [
            {c: row[c] for c in d.codes}
            for row in rows
            if all(row.get(c) is not None for c in d.codes)
        ]
        if len(d.codes) > GROUP_FIT_ABOVE:
            if usable:
                click.echo(
                    f"note: {d.id}: {len(usable)} observation rows ignored, "
                    f"grouped fits use expert marginals only", err=True)
            grouping = {c: parent.get(c, c) for c in d.codes}
            try:
                models[d.id] = fit_group_model(base, d.id, grouping, c=c_factor)
            except RaredxError as exc:
                raise click.ClickException(f"{d.id}: {exc}") from exc
            route = f"grouped ({len(set(grouping.values()))} groups)"
        else:
            counts = ObservedCounts.from_rows(d.codes, usable) if usable else None
            try:
                models[d.id] = fit_disease_model(base, d.id, counts=counts, c=c_factor)
            except RaredxError as exc:
                raise click.ClickException(f"{d.id}: {exc}") from exc
            route = f"direct, {len(usable)} rows"
        click.echo(f"{d.id}: {len(d.codes)} symptoms, {route}")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = out_dir / "models.json"
    save_models(bundle, models)
    click.echo(f"wrote {bundle}")


def _solved_artifacts(out_dir, skip_initial):
    """Previously trained policies in the output directory, keyed by their
    task's first symptom; these seed the bootstrap's subtask handoff."""
    solved = {}
    for f in sorted(Path(out_dir).glob("*.json")):
        if f.name.endswith(".report.json"):
            continue
        try:
            art = load_policy(f)
        except RaredxError:
            continue
        if art.kind == "energy" or art.task.initial == skip_initial:
            continue
        solved[art.task.initial] = (art.task, art.policy)
    return solved


def _train_one(task, env_of, algo, iters, lr0, seed, out_dir):
    m = env_of(task.initial)
    rng = np.random.default_rng(seed)
    target = out_dir / f"{task.initial}.json"
    if algo == "vi":
        tq = value_iteration(task, m)
        questions = -tq.value(KnowledgeState.initial(task.dim))
        save_policy(target, task, tq, config={"algo": "vi", "eps_h": m.entropy_threshold})
        return f"optimal mean questions {questions:.3f}", False
    if algo == "reinforce":
        pol = reinforce_train(m, episodes=iters, lr=lr0, rng=rng)
        save_policy(target, task, pol,
                    config={"algo": "reinforce", "episodes": iters, "lr": lr0, "seed": seed})
        return f"theta {np.round(pol.theta, 3).tolist()}", False
    cfg = TrainConfig(iters=iters, lr0=lr0)
    config = {"algo": algo, "iters": iters, "lr0": lr0, "seed": seed}
    if algo == "dqn-mc":
        run = dqn_mc_train(task, m, cfg, rng)
    elif algo == "dqn-td":
        run = dqn_td_train(task, m, cfg, rng)
    else:
        solved = _solved_artifacts(out_dir, task.initial)
        config["subtasks"] = sorted(solved)
        run = dqn_mc_bootstrap_train(task, m, solved, cfg, rng)
    save_policy(target, task, run.net, config=config, report=run.report)
    (out_dir / f"{task.initial}.report.json").write_text(json.dumps(run.report, indent=1))
    last = run.report[-1]["eval_mean_I"] if run.report else float("nan")
    note = f"final eval mean questions {last:.3f}"
    if algo == "dqn-mc-boot":
        note += f", {len(config['subtasks'])} subtasks"
    return note, run.diverged


@main.command("train")
@click.option("--kb", "kb_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--models", "models_path", type=click.Path(exists=True, dir_okay=False),
              help="Fitted model bundle; omitted, marginals are used independently.")
@click.option("--task", "task_code", help="Initial symptom of the task to train.")
@click.option("--all", "train_all", is_flag=True, help="Train every task, smallest first.")
@click.option("--algo", type=click.Choice(sorted(_TRAIN_DEFAULTS)), required=True)
@click.option("--iters", type=int, help="Training iterations (reinforce: episodes).")
@click.option("--lr0", type=float, help="Initial learning rate.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def train(kb_path, models_path, task_code, train_all, algo, iters, lr0, seed, out):
    """Solve or train a policy per task and write policy artifacts."""
    if bool(task_code) == train_all:
        raise click.ClickException("pass exactly one of --task and --all")
    base = _load_kb_checked(kb_path)
    env_of = _env_builder(base, models_path)
    default_iters, default_lr0 = _TRAIN_DEFAULTS[algo]
    iters = default_iters if iters is None else iters
    lr0 = default_lr0 if lr0 is None else lr0
    if task_code:
        try:
            tasks = [relevant_set(base, task_code)]
        except RaredxError as exc:
            raise click.ClickException(str(exc)) from exc
    else:
        tasks = build_tasks(base)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    diverged = []
    for t in tasks:
        try:
            note, bad = _train_one(t, env_of, algo, iters, lr0, seed, out_dir)
        except RaredxError as exc:
            if train_all:
                click.echo(f"skip {t.initial} (dim {t.dim}): {exc}", err=True)
                continue
            raise click.ClickException(str(exc)) from exc
        flag = " DIVERGED" if bad else ""
        click.echo(f"{t.initial} (dim {t.dim}): {note}{flag}")
        if bad:
            diverged.append(t.initial)
    if diverged:
        raise click.ClickException(f"training diverged for: {', '.join(diverged)}")


@main.command("eval")
@click.option("--policy", "policy_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--kb", "kb_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--models", "models_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--games", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def eval_policy(policy_path, kb_path, models_path, games, seed):
    """Play evaluation games with a stored policy and report question counts."""
    try:
        art = load_policy(policy_path)
    except RaredxError as exc:
        raise click.ClickException(str(exc)) from exc
    base = _load_kb_checked(kb_path)
    try:
        task = relevant_set(base, art.task.initial)
    except RaredxError as exc:
        raise click.ClickException(str(exc)) from exc
    if task != art.task:
        raise click.ClickException(
            f"{policy_path} was trained for a different task layout of "
            f"{art.task.initial!r}; evaluate against its own knowledge base")
    m = _env_builder(base, models_path)(task.initial)
    players = {"tabular": tabular_policy, "qnet": qnet_policy, "energy": energy_policy}
    try:
        res = evaluate_policy(players[art.kind](art.policy), task, m,
                              games, np.random.default_rng(seed))
    except RaredxError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"mean questions {res.mean_i:.3f} (std error {res.std_error:.3f}, "
               f"{res.n_games} games)")
    click.echo("histogram: " + " ".join(f"{k}:{v}" for k, v in res.histogram.items()))


@main.command("serve")
@click.option("--kb", "kb_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--models", "models_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--policies", "policies_path", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(kb_path, models_path, policies_path, host, port):
    """Serve consultation sessions over HTTP."""
    import uvicorn

    base = _load_kb_checked(kb_path)
    models = load_models(models_path) if models_path else None
    try:
        bundle = load_bundle(policies_path)
    except RaredxError as exc:
        raise click.ClickException(str(exc)) from exc
    kb_id = Path(kb_path).stem
    policy_id = Path(policies_path).name or "default"
    svc = ConsultationService()
    svc.register_kb(kb_id, base, models)
    svc.register_bundle(policy_id, bundle)
    click.echo(f"kb {kb_id!r} with policy bundle {policy_id!r} "
               f"({len(bundle)} tasks) on {host}:{port}")
    uvicorn.run(http_app(svc), host=host, port=port)
