import pytest

from renq.config import RunConfig

# a network small enough for training-loop tests to finish in seconds
TINY = {
    "net.channels": "4,8", "net.hidden": "16", "net.aux_hidden": "16", "net.intensity_bins": "8",
    "agent.batch": "4", "agent.n_step": "3", "agent.target_period": "5",
    "replay.min_size": "20", "replay.period": "2", "train.log_every": "25", "env.max_steps": "60",
}


def tiny_config(**overrides) -> RunConfig:
    values = dict(TINY)
    values.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
    return RunConfig.from_preset("desk", values)


@pytest.fixture
def tiny():
    return tiny_config


_VERDICTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    """Remember an acceptance verdict for the end-of-run summary."""
    _VERDICTS[criterion] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        passed, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
