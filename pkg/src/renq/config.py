"""Run configuration: ``section.key = value`` text files with desk and paper presets."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import aux_tasks as X
from .agent import AgentConfig, NetConfig


class ConfigError(ValueError):
    """Invalid configuration key or value (CLI exit code 2)."""


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("none", "unbounded") else int(text)


def _size(text: str) -> tuple[int, int] | None:
    if text.strip().lower() == "none":
        return None
    h, w = text.lower().split("x")
    return int(h), int(w)


PARSERS = {"int": int, "float": float, "str": str, "bool": _bool, "ints": _ints,
           "opt_int": _opt_int, "size": _size}

# key -> (parser, desk default)
SCHEMA: dict[str, tuple[str, object]] = {
    "env.id": ("str", "crossing"),
    "env.width": ("int", 16),
    "env.height": ("int", 16),
    "env.max_steps": ("int", 500),
    "env.terminal_on_loss_of_life": ("bool", True),
    "preprocess.grey_scaling": ("bool", True),
    "preprocess.downsample": ("size", None),
    "preprocess.frames_stacked": ("int", 4),
    "preprocess.action_repetitions": ("int", 1),
    "preprocess.max_pool": ("bool", True),
    "preprocess.reward_clip": ("float", 1.0),
    "agent.mode": ("str", "ren"),
    "agent.members": ("int", 5),
    "agent.tasks": ("str", ""),
    "agent.strength": ("float", -1.0),
    "agent.update": ("str", "distributional double q"),
    "agent.v_min": ("float", -10.0),
    "agent.v_max": ("float", 10.0),
    "agent.atoms": ("int", 51),
    "agent.gamma": ("float", 0.99),
    "agent.n_step": ("int", 20),
    "agent.batch": ("int", 32),
    "agent.target_period": ("int", 250),
    "agent.noisy_sigma0": ("float", 0.1),
    "optim.name": ("str", "adam"),
    "optim.lr": ("float", 1e-4),
    "optim.beta1": ("float", 0.9),
    "optim.beta2": ("float", 0.999),
    "optim.eps": ("float", 1.5e-4),
    "optim.max_grad_norm": ("float", 10.0),
    "net.channels": ("ints", (16, 32)),
    "net.kernels": ("ints", (3, 3)),
    "net.strides": ("ints", (2, 2)),
    "net.hidden": ("int", 128),
    "net.aux_hidden": ("int", 128),
    "net.intensity_bins": ("int", 84),
    "net.intensity_ratio": ("float", 0.5),
    "net.precision": ("str", "float32"),
    "replay.omega": ("float", 0.5),
    "replay.beta_start": ("float", 0.4),
    "replay.beta_end": ("float", 1.0),
    "replay.min_size": ("int", 400),
    "replay.memory": ("opt_int", None),
    "replay.period": ("int", 8),
    "train.steps": ("int", 30000),
    "train.seed": ("int", 0),
    "train.log_every": ("int", 1000),
    "train.checkpoint_every": ("int", 0),
    "eval.episodes": ("int", 10),
    "eval.epsilon": ("float", 0.001),
    "bvc.transitions": ("int", 1000),
}

# Values that differ from desk defaults in the "paper" preset.
PAPER_PRESET = {
    "env.width": 84,
    "env.height": 84,
    "env.max_steps": 27000,  # 108K frames at 4 repetitions
    "preprocess.downsample": (84, 84),
    "preprocess.action_repetitions": 4,
    "net.channels": (32, 64),
    "net.kernels": (5, 5),
    "net.strides": (5, 5),
    "net.hidden": 256,
    "net.aux_hidden": 256,
    "replay.min_size": 1600,
    "replay.period": 1,
    "agent.target_period": 2000,
    "train.steps": 100000,
}

PRESETS = {"desk": {}, "paper": PAPER_PRESET}

MODES = ("rainbow", "ren", "ren-j", "renault", "renault-all", "custom")


def format_value(key: str, v) -> str:
    if v is None:
        return "unbounded" if key == "replay.memory" else "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        sep = "x" if SCHEMA[key][0] == "size" else ","
        return sep.join(str(i) for i in v)
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    preset: str = "desk"

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def from_preset(cls, preset: str = "desk", overrides: dict | None = None) -> "RunConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values = {k: d for k, (_, d) in SCHEMA.items()}
        values.update(PRESETS[preset])
        cfg = cls(values, preset)
        for k, v in (overrides or {}).items():
            cfg.set(k, v)
        cfg.validate()
        return cfg

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            kind = SCHEMA[key][0]
            try:
                value = PARSERS[kind](value.strip())
            except ValueError as e:
                raise ConfigError(f"bad value for {key!r}: {e}") from None
        self.values[key] = value

    def validate(self) -> None:
        v = self.values
        if v["agent.mode"] not in MODES:
            raise ConfigError(f"agent.mode must be one of {MODES}, got {v['agent.mode']!r}")
        for k in ("agent.members", "agent.batch", "agent.target_period", "agent.n_step",
                  "replay.period", "train.steps", "preprocess.frames_stacked",
                  "preprocess.action_repetitions", "agent.atoms"):
            if v[k] < 1:
                raise ConfigError(f"{k} must be positive")
        if not len(v["net.channels"]) == len(v["net.kernels"]) == len(v["net.strides"]):
            raise ConfigError("net.channels, net.kernels and net.strides must have equal length")
        if v["net.precision"] not in ("float32", "float64"):
            raise ConfigError(f"net.precision must be float32 or float64, got {v['net.precision']!r}")
        if v["replay.memory"] is not None:
            raise ConfigError("only an unbounded replay memory is supported")
        self.assignment()

    # ------------------------------------------------------------- builders

    @property
    def members(self) -> int:
        return 1 if self.values["agent.mode"] == "rainbow" else self.values["agent.members"]

    def assignment(self) -> X.AuxAssignment:
        v = self.values
        mode, M = v["agent.mode"], self.members
        alpha = v["agent.strength"]
        try:
            if mode in ("rainbow", "ren", "ren-j"):
                return X.assign_tasks("none", M)
            if mode == "renault":
                a = X.assign_tasks("unique", M)
                if alpha >= 0:
                    a = X.AuxAssignment([{t: alpha for t in ts} for ts in a.tasks], "unique")
                return a
            if mode == "renault-all":
                a = X.assign_tasks("all", M)
                if alpha >= 0:
                    a = X.AuxAssignment([{t: alpha for t in ts} for ts in a.tasks], "all")
                return a
            return X.assign_tasks("custom", M, strengths=parse_tasks(v["agent.tasks"], M))
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def agent_config(self) -> AgentConfig:
        v = self.values
        net = NetConfig(
            channels=v["net.channels"], kernels=v["net.kernels"], strides=v["net.strides"],
            hidden=v["net.hidden"], sigma0=v["agent.noisy_sigma0"], aux_hidden=v["net.aux_hidden"],
            intensity_bins=v["net.intensity_bins"], intensity_ratio=v["net.intensity_ratio"],
            precision=v["net.precision"],
        )
        return AgentConfig(
            mode="ren-j" if v["agent.mode"] == "ren-j" else "ren",
            members=self.members, v_min=v["agent.v_min"], v_max=v["agent.v_max"], atoms=v["agent.atoms"],
            gamma=v["agent.gamma"], n_step=v["agent.n_step"], batch=v["agent.batch"], lr=v["optim.lr"],
            beta1=v["optim.beta1"], beta2=v["optim.beta2"], adam_eps=v["optim.eps"],
            max_grad_norm=v["optim.max_grad_norm"], target_period=v["agent.target_period"],
            net=net, assignment=self.assignment(),
        )

    # ---------------------------------------------------------------- text

    def to_text(self) -> str:
        lines = [f"# preset: {self.preset}"]
        for k in SCHEMA:
            lines.append(f"{k} = {format_value(k, self.values[k])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        preset = "desk"
        pairs = []
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if line.startswith("# preset:"):
                preset = line.split(":", 1)[1].strip()
                continue
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'section.key = value'")
            k, val = (s.strip() for s in line.split("=", 1))
            if k == "preset":
                preset = val
                continue
            pairs.append((k, val))
        return cls.from_preset(preset, dict(pairs))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())


def parse_tasks(text: str, M: int) -> list[dict[str, float]]:
    """``"0:reward=1,moment_change=0.5; 2:inverse_dynamics=1"`` -> per-member strengths."""
    out: list[dict[str, float]] = [{} for _ in range(M)]
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        if ":" not in chunk:
            raise ValueError(f"bad task spec {chunk!r}; expected 'member:task=alpha,...'")
        m_txt, rest = chunk.split(":", 1)
        m = int(m_txt)
        if not 0 <= m < M:
            raise ValueError(f"task spec names member {m}, ensemble has {M}")
        for item in filter(None, (i.strip() for i in rest.split(","))):
            task, _, a = item.partition("=")
            out[m][task.strip()] = float(a) if a else 1.0
    return out
