import csv
import io

import pytest

from renq import bvc
from renq.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, EXIT_USAGE, main

from conftest import TINY


def tiny_sets(**extra):
    values = dict(TINY)
    values.update({"train.steps": "80", "bvc.transitions": "60"})
    values.update({k.replace("__", "."): str(v) for k, v in extra.items()})
    out = []
    for k, v in values.items():
        out += ["--set", f"{k}={v}"]
    return out


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    paths = []
    for seed in (0, 1):
        out = root / f"seed{seed}"
        assert main(["train", "--out", str(out), "--quiet"] + tiny_sets(train__seed=seed)) == EXIT_OK
        paths.append(out)
    return paths


class TestExitCodes:
    def test_unknown_command(self):
        with pytest.raises(SystemExit) as e:
            main(["fly"])
        assert e.value.code == EXIT_USAGE

    def test_unknown_key(self, capsys):
        assert main(["dump-config", "--set", "agent.colour=red"]) == EXIT_CONFIG
        assert "agent.colour" in capsys.readouterr().err

    def test_malformed_set(self):
        assert main(["dump-config", "--set", "agent.members"]) == EXIT_USAGE

    def test_config_and_preset_conflict(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("agent.members = 3\n")
        assert main(["dump-config", "--config", str(path), "--preset", "paper"]) == EXIT_USAGE

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", str(tmp_path / "nothing.renq")]) == EXIT_CONFIG

    def test_unknown_lab_suite(self, capsys):
        assert main(["lab", "thm9"]) == EXIT_USAGE
        assert "thm1" in capsys.readouterr().err


class TestDumpConfig:
    def test_paper_preset(self, capsys):
        assert main(["dump-config", "--preset", "paper"]) == EXIT_OK
        assert "agent.n_step = 20" in capsys.readouterr().out

    def test_config_file(self, tmp_path, capsys):
        path = tmp_path / "c.txt"
        path.write_text("# mine\nagent.members = 3\n")
        assert main(["dump-config", "--config", str(path), "--set", "agent.batch=8"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "agent.members = 3" in out and "agent.batch = 8" in out


class TestRuns:
    def test_train_artifacts(self, runs):
        names = {p.name for p in runs[0].iterdir()}
        assert names == {"config.txt", "episodes.csv", "updates.csv", "checkpoint.renq"}

    def test_resume_finished_run_is_noop(self, runs, tmp_path):
        ckpt = runs[0] / "checkpoint.renq"
        assert main(["train", "--out", str(tmp_path), "--resume", str(ckpt), "--quiet"]) == EXIT_OK
        assert (tmp_path / "updates.csv").read_text() == (runs[0] / "updates.csv").read_text()

    def test_resume_mismatch(self, runs, tmp_path):
        args = ["train", "--out", str(tmp_path), "--resume", str(runs[0] / "checkpoint.renq"), "--quiet"]
        assert main(args + tiny_sets(optim__lr=0.5)) == EXIT_CONFIG

    def test_eval_with_given_baselines(self, runs, capsys):
        code = main(["eval", str(runs[0]), "--episodes", "2", "--random", "0", "--scripted", "10"])
        assert code == EXIT_OK
        assert "normalized mean %" in capsys.readouterr().out

    def test_measure_bvc_table(self, runs, tmp_path, capsys):
        out = tmp_path / "bvc.csv"
        assert main(["measure-bvc", str(runs[0]), str(runs[1]), "--out", str(out)]) == EXIT_OK
        rows = list(csv.reader(io.StringIO(out.read_text())))
        assert rows[0] == bvc.TABLE_COLUMNS and len(rows) == 2
        values = dict(zip(rows[0], rows[1]))
        assert float(values[bvc.TABLE_COLUMNS[-1]]) > 0

    def test_measure_bvc_identical_runs(self, runs, capsys):
        from renq.cli import measure_runs

        avg, _ = measure_runs([runs[0], runs[0]], transitions=40)
        assert avg["var"] == 0.0 and avg["cov"] == 0.0

    def test_measure_bvc_needs_two(self, runs):
        assert main(["measure-bvc", str(runs[0])]) == EXIT_CONFIG

    def test_measure_bvc_heterogeneous(self, runs, tmp_path, capsys):
        other = tmp_path / "other"
        assert main(["train", "--out", str(other), "--quiet"] + tiny_sets(optim__lr=0.001)) == EXIT_OK
        assert main(["measure-bvc", str(runs[0]), str(other)]) == EXIT_CONFIG
        assert "optim.lr" in capsys.readouterr().err


def test_lab_prop1(capsys):
    assert main(["lab", "prop1", "--datasets", "6", "--seeds", "5"]) == EXIT_OK
    assert "[PASS] prop1" in capsys.readouterr().out


def test_lab_failure_exit_code(monkeypatch):
    from renq import lab

    monkeypatch.setattr(lab.Lab, "run", lambda self, suite: [lab.Check(suite, "forced", False, "")])
    assert main(["lab", "thm1"]) == EXIT_CHECK
