from pathlib import Path

import pytest

from renq import aux_tasks as X
from renq.config import SCHEMA, ConfigError, RunConfig, parse_tasks

GOLDEN = Path(__file__).parent / "golden" / "paper_preset.txt"


def golden_lines():
    out = []
    for raw in GOLDEN.read_text().splitlines():
        if raw and not raw.startswith("#"):
            out.append(raw.split(" | ")[0])
    return out


@pytest.mark.parametrize("line", golden_lines())
def test_paper_preset_snapshot(line):
    assert line in RunConfig.from_preset("paper").to_text().splitlines()


class TestRoundTrip:
    @pytest.mark.parametrize("preset", ["desk", "paper"])
    def test_text_round_trip(self, preset):
        cfg = RunConfig.from_preset(preset, {"agent.mode": "renault", "train.seed": "9"})
        again = RunConfig.from_text(cfg.to_text())
        assert again.values == cfg.values and again.preset == preset
        assert again.to_text() == cfg.to_text()

    def test_every_key_written(self):
        text = RunConfig.from_preset("desk").to_text()
        assert all(f"\n{k} = " in text for k in SCHEMA)

    def test_comments_and_blank_lines(self):
        cfg = RunConfig.from_text("# a note\n\nagent.members = 3   # fewer\n")
        assert cfg["agent.members"] == 3


class TestErrors:
    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="agent.membres"):
            RunConfig.from_preset("desk", {"agent.membres": "3"})

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="agent.members"):
            RunConfig.from_preset("desk", {"agent.members": "five"})

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="preset"):
            RunConfig.from_preset("cluster")

    def test_line_without_equals(self):
        with pytest.raises(ConfigError, match="line 2"):
            RunConfig.from_text("agent.members = 3\nagent.batch 32\n")

    @pytest.mark.parametrize("key,value", [("agent.mode", "dqn"), ("agent.members", "0"),
                                           ("net.kernels", "3"), ("replay.memory", "1000"),
                                           ("net.precision", "float16")])
    def test_invalid_values(self, key, value):
        with pytest.raises(ConfigError):
            RunConfig.from_preset("desk", {key: value})

    def test_unique_needs_five_members(self):
        with pytest.raises(ConfigError, match="M == 5"):
            RunConfig.from_preset("desk", {"agent.mode": "renault", "agent.members": "3"})


class TestAssignment:
    def test_rainbow_is_one_plain_member(self):
        cfg = RunConfig.from_preset("desk", {"agent.mode": "rainbow"})
        ac = cfg.agent_config()
        assert ac.members == 1 and ac.mode == "ren" and not ac.assignment.used_tasks()

    def test_renault_unique(self):
        a = RunConfig.from_preset("desk", {"agent.mode": "renault"}).assignment()
        assert [list(t) for t in a.tasks] == [[t] for t in X.TASKS]

    def test_strength_override(self):
        a = RunConfig.from_preset("desk", {"agent.mode": "renault-all", "agent.strength": "0.5"}).assignment()
        assert all(v == 0.5 for ts in a.tasks for v in ts.values())

    def test_custom(self):
        cfg = RunConfig.from_preset("desk", {"agent.mode": "custom", "agent.members": "3",
                                             "agent.tasks": "0:reward=0.5; 2:moment_change"})
        a = cfg.assignment()
        assert a.tasks[0] == {"reward": 0.5} and a.tasks[1] == {} and a.tasks[2] == {"moment_change": 1.0}

    def test_custom_unknown_task(self):
        with pytest.raises(ConfigError):
            RunConfig.from_preset("desk", {"agent.mode": "custom", "agent.tasks": "0:colour=1"})

    def test_joint_mode(self):
        assert RunConfig.from_preset("desk", {"agent.mode": "ren-j"}).agent_config().mode == "ren-j"


class TestParseTasks:
    def test_parse(self):
        assert parse_tasks("1:reward=2,inverse_dynamics", 2) == [{}, {"reward": 2.0, "inverse_dynamics": 1.0}]

    @pytest.mark.parametrize("text", ["reward=1", "5:reward=1"])
    def test_reject(self, text):
        with pytest.raises(ValueError):
            parse_tasks(text, 2)
