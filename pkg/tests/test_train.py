import csv
import io

import numpy as np
import pytest

from renq.config import ConfigError
from renq.train import Trainer, aux_columns, baseline_returns, evaluate_agent, normalized_score

from conftest import tiny_config


def header(text: str) -> list[str]:
    return next(csv.reader(io.StringIO(text)))


class TestDeterminism:
    @pytest.mark.parametrize("mode", ["rainbow", "renault"])
    def test_same_seed_byte_identical(self, mode):
        cfg = tiny_config(agent__mode=mode, train__steps=150)
        a, b = Trainer(cfg), Trainer(cfg)
        a.run()
        b.run()
        assert a.updates_csv() == b.updates_csv()
        assert a.episodes_csv() == b.episodes_csv()

    def test_seed_changes_run(self):
        a = Trainer(tiny_config(train__steps=150))
        b = Trainer(tiny_config(train__steps=150, train__seed=1))
        a.run()
        b.run()
        assert a.updates_csv() != b.updates_csv()


def test_single_member_ren_equals_rainbow():
    ren = Trainer(tiny_config(agent__mode="ren", agent__members=1, train__steps=200))
    rainbow = Trainer(tiny_config(agent__mode="rainbow", train__steps=200))
    ren.run()
    rainbow.run()
    assert ren.updates_csv() == rainbow.updates_csv()
    assert ren.episodes_csv() == rainbow.episodes_csv()


class TestMetricColumns:
    def test_renault_unique_one_aux_column_per_member(self):
        tr = Trainer(tiny_config(agent__mode="renault", train__steps=60))
        tr.run()
        groups = aux_columns(header(tr.updates_csv()))
        assert sorted(groups) == list(range(5))
        assert all(len(cols) == 1 for cols in groups.values())
        row = tr.updates[-1]
        assert all(np.isfinite(row[c[0]]) for c in groups.values())

    def test_renault_all_columns(self):
        tr = Trainer(tiny_config(agent__mode="renault-all", agent__members=2, train__steps=10))
        assert all(len(c) == 5 for c in aux_columns(tr.metric_columns()).values())

    def test_joint_mode_single_loss(self):
        cols = Trainer(tiny_config(agent__mode="ren-j", train__steps=10)).metric_columns()
        assert "loss.joint" in cols and "loss.m0" not in cols

    def test_windows_follow_log_every(self):
        tr = Trainer(tiny_config(train__steps=100))
        tr.run()
        assert [r["step"] for r in tr.updates] == [25, 50, 75, 100]
        # 3-step returns reach the 20-transition minimum at step 22; then every second step learns
        assert tr.updates[-1]["updates"] == len(range(22, 101, 2))


class TestResume:
    def test_mismatched_config(self, tmp_path):
        tr = Trainer(tiny_config(train__steps=50))
        tr.run(30)
        tr.save(tmp_path / "c.renq")
        with pytest.raises(ConfigError, match="does not match"):
            Trainer.resume(tmp_path / "c.renq", tiny_config(train__steps=50, optim__lr=0.01))

    def test_resume_without_config_uses_snapshot(self, tmp_path):
        tr = Trainer(tiny_config(train__steps=50))
        tr.run(30)
        tr.save(tmp_path / "c.renq")
        again = Trainer.resume(tmp_path / "c.renq")
        assert again.step == 30 and again.cfg.to_text() == tr.cfg.to_text()

    def test_lives_flag_enforced(self):
        with pytest.raises(ConfigError, match="terminal_on_loss_of_life"):
            Trainer(tiny_config(env__terminal_on_loss_of_life="false"))


class TestScores:
    @pytest.mark.parametrize("method,expected", [(3.0, 0.0), (23.0, 100.0), (13.0, 50.0)])
    def test_endpoints(self, method, expected):
        assert normalized_score(method, 3.0, 23.0) == pytest.approx(expected)

    def test_linear_formula(self):
        assert normalized_score(50, 0, 100) == 50.0

    def test_degenerate_baseline(self):
        with pytest.raises(ValueError):
            normalized_score(1.0, 2.0, 2.0)

    def test_baselines_order(self):
        b = baseline_returns(tiny_config(env__max_steps=200), 5, seed=1)
        assert b["scripted"].mean() > b["random"].mean()

    def test_eval_is_deterministic(self):
        tr = Trainer(tiny_config(train__steps=40))
        tr.run()
        a = evaluate_agent(tr.agent, tr.cfg, 3, 9)
        np.testing.assert_array_equal(a, evaluate_agent(tr.agent, tr.cfg, 3, 9))
