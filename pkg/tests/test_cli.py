"""End-to-end checks of the command-line front end via click's runner."""

from __future__ import annotations

import json

import pytest
from click.testing import CliRunner
from conftest import make_task_kb

from raredx.artifacts import load_models, load_policy
from raredx.cli import main
from raredx.kb import load_kb, save_kb


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def task_kb_file(tmp_path):
    path = tmp_path / "kb.json"
    save_kb(make_task_kb(0, 5), path)
    return path


class TestKbCommands:
    def test_synth_then_validate(self, runner, tmp_path):
        out = tmp_path / "synth.json"
        res = runner.invoke(main, ["kb", "synth", "--seed", "3", "--diseases", "4",
                                   "--symptoms", "30", "--out", str(out)])
        assert res.exit_code == 0, res.output
        assert load_kb(out).disease_ids
        res = runner.invoke(main, ["kb", "validate", str(out)])
        assert res.exit_code == 0, res.output
        assert res.output.startswith("ok: 4 diseases")
        assert "tasks" in res.output

    def test_validate_rejects_broken_file(self, runner, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"diseases": []}')
        res = runner.invoke(main, ["kb", "validate", str(bad)])
        assert res.exit_code != 0
        assert "ontology" in res.output


class TestModelFit:
    def test_expert_only_bundle(self, runner, tmp_path, task_kb_file):
        res = runner.invoke(main, ["model", "fit", "--kb", str(task_kb_file),
                                   "--out", str(tmp_path / "m")])
        assert res.exit_code == 0, res.output
        assert "direct, 0 rows" in res.output
        models = load_models(tmp_path / "m" / "models.json")
        assert set(models) == set(load_kb(task_kb_file).disease_ids)

    def test_observation_rows_are_matched_per_disease(self, runner, tmp_path, task_kb_file):
        base = load_kb(task_kb_file)
        d = base.diseases[0]
        codes = sorted(base.base_codes())
        obs = tmp_path / "obs.csv"
        complete = {c: "1" if c in d.codes else "0" for c in codes}
        partial = dict(complete, **{d.codes[0]: "NA"})
        obs.write_text(
            ",".join(codes) + "\n"
            + ",".join(complete[c] for c in codes) + "\n"
            + ",".join(partial[c] for c in codes) + "\n"
        )
        res = runner.invoke(main, ["model", "fit", "--kb", str(task_kb_file),
                                   "--obs", str(obs), "--out", str(tmp_path / "m")])
        assert res.exit_code == 0, res.output
        # the NA row only drops out for diseases whose codes it leaves unexamined
        assert f"{d.id}: {len(d.codes)} symptoms, direct, 1 rows" in res.output

    def test_bad_cell_is_located(self, runner, tmp_path, task_kb_file):
        obs = tmp_path / "obs.csv"
        obs.write_text("t01,t02\n1,maybe\n")
        res = runner.invoke(main, ["model", "fit", "--kb", str(task_kb_file),
                                   "--obs", str(obs), "--out", str(tmp_path / "m")])
        assert res.exit_code != 0
        assert "obs.csv:2" in res.output and "maybe" in res.output


class TestTrain:
    def test_vi_artifact_then_eval(self, runner, tmp_path, task_kb_file):
        out = tmp_path / "pol"
        res = runner.invoke(main, ["train", "--kb", str(task_kb_file), "--task", "t00",
                                   "--algo", "vi", "--out", str(out)])
        assert res.exit_code == 0, res.output
        assert "optimal mean questions" in res.output
        art = load_policy(out / "t00.json")
        assert art.kind == "tabular" and art.config["algo"] == "vi"
        res = runner.invoke(main, ["eval", "--policy", str(out / "t00.json"),
                                   "--kb", str(task_kb_file), "--games", "50"])
        assert res.exit_code == 0, res.output
        assert "mean questions" in res.output and "histogram:" in res.output

    def test_dqn_writes_artifact_and_report(self, runner, tmp_path, task_kb_file):
        out = tmp_path / "pol"
        res = runner.invoke(main, ["train", "--kb", str(task_kb_file), "--task", "t00",
                                   "--algo", "dqn-mc", "--iters", "2", "--out", str(out)])
        assert res.exit_code == 0, res.output
        art = load_policy(out / "t00.json")
        assert art.kind == "qnet" and art.config["iters"] == 2
        report = json.loads((out / "t00.report.json").read_text())
        assert [r["iter"] for r in report] == [1, 2]
        assert all({"eval_mean_I", "eval_var", "lr"} <= set(r) for r in report)

    def test_reinforce_artifact_evaluates(self, runner, tmp_path, task_kb_file):
        out = tmp_path / "pol"
        res = runner.invoke(main, ["train", "--kb", str(task_kb_file), "--task", "t00",
                                   "--algo", "reinforce", "--iters", "5", "--out", str(out)])
        assert res.exit_code == 0, res.output
        assert load_policy(out / "t00.json").kind == "energy"
        res = runner.invoke(main, ["eval", "--policy", str(out / "t00.json"),
                                   "--kb", str(task_kb_file), "--games", "20"])
        assert res.exit_code == 0, res.output

    def test_bootstrap_picks_up_prior_artifacts(self, runner, tmp_path, task_kb_file):
        out = tmp_path / "pol"
        res = runner.invoke(main, ["train", "--kb", str(task_kb_file), "--all",
                                   "--algo", "vi", "--out", str(out)])
        assert res.exit_code == 0, res.output
        res = runner.invoke(main, ["train", "--kb", str(task_kb_file), "--task", "t00",
                                   "--algo", "dqn-mc-boot", "--iters", "2", "--out", str(out)])
        assert res.exit_code == 0, res.output
        art = load_policy(out / "t00.json")
        assert art.config["subtasks"], "expected solved subtasks from the vi pass"
        assert "t00" not in art.config["subtasks"]

    def test_all_skips_oversized_tasks(self, runner, tmp_path):
        path = tmp_path / "kb.json"
        save_kb(make_task_kb(3, 12), path)
        out = tmp_path / "pol"
        res = runner.invoke(main, ["train", "--kb", str(path), "--all",
                                   "--algo", "vi", "--out", str(out)])
        assert res.exit_code == 0, res.output
        assert "skip t00 (dim 12)" in res.output
        assert list(out.glob("*.json")), "small tasks should still be solved"

    def test_task_and_all_are_exclusive(self, runner, task_kb_file, tmp_path):
        res = runner.invoke(main, ["train", "--kb", str(task_kb_file), "--task", "t00",
                                   "--all", "--algo", "vi", "--out", str(tmp_path)])
        assert res.exit_code != 0
        assert "exactly one" in res.output


class TestEval:
    def test_foreign_knowledge_base_is_rejected(self, runner, tmp_path, task_kb_file):
        out = tmp_path / "pol"
        runner.invoke(main, ["train", "--kb", str(task_kb_file), "--task", "t00",
                             "--algo", "vi", "--out", str(out)])
        other = tmp_path / "other.json"
        save_kb(make_task_kb(0, 7), other)
        res = runner.invoke(main, ["eval", "--policy", str(out / "t00.json"),
                                   "--kb", str(other), "--games", "10"])
        assert res.exit_code != 0
        assert "different task layout" in res.output


class TestServe:
    def test_empty_policy_directory_is_reported(self, runner, tmp_path, task_kb_file):
        empty = tmp_path / "pol"
        empty.mkdir()
        res = runner.invoke(main, ["serve", "--kb", str(task_kb_file),
                                   "--policies", str(empty)])
        assert res.exit_code != 0
        assert "no policy artifacts" in res.output
