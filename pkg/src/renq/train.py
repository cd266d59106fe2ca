"""Training loop, evaluation, metrics CSV and resumable checkpoints."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .agent import EnsembleAgent, derive_seed
from .config import ConfigError, RunConfig
from .distributional import NStepBuffer, NStepItem
from .envs import Preprocessor, make_env, random_policy, rollout_returns, scripted_policy
from .replay import PrioritizedView, TransitionStore, push

EPISODE_FIELDS = ["step", "episode", "return", "length"]


def build_env(cfg: RunConfig):
    v = cfg.values
    if not v["env.terminal_on_loss_of_life"]:
        raise ConfigError("desk environments have a single life; env.terminal_on_loss_of_life must be true")
    try:
        env = make_env(v["env.id"], width=v["env.width"], height=v["env.height"], max_steps=v["env.max_steps"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return Preprocessor(env, repeat=v["preprocess.action_repetitions"], stack=v["preprocess.frames_stacked"],
                        max_pool=v["preprocess.max_pool"], clip=v["preprocess.reward_clip"],
                        resize=v["preprocess.downsample"])


class Trainer:
    """Owns every piece of mutable training state so that it can be checkpointed whole."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        v = cfg.values
        self.seed = v["train.seed"]
        self.pipe = build_env(cfg)
        self.agent = EnsembleAgent(cfg.agent_config(), self.pipe.obs_shape, self.pipe.n_actions, self.seed)
        self.store = TransitionStore(self.pipe.obs_shape)
        self.views = [
            PrioritizedView(self.store, v["replay.omega"], v["replay.beta_start"], v["replay.beta_end"],
                            v["replay.min_size"])
            for _ in range(self.agent.n_views)
        ]
        self.nstep = NStepBuffer(v["agent.n_step"], v["agent.gamma"])
        self.total_steps = v["train.steps"]
        self.step = 0
        self.episode = 0
        self.ep_return = 0.0
        self.ep_length = 0
        self.episodes: list[dict] = []
        self.updates: list[dict] = []
        self._window: list[dict] = []
        self._start_episode()

    # ----------------------------------------------------------------- loop

    def _start_episode(self) -> None:
        obs = self.pipe.reset(derive_seed(self.seed, "episode", self.episode))
        self.obs_idx = self.store.add_obs(obs)
        self.obs = obs

    def beta(self) -> float:
        return self.views[0].anneal_beta(min(1.0, self.step / self.total_steps))

    def env_step(self) -> None:
        a = self.agent.select_action(self.obs, "train")
        obs, r, done, raw = self.pipe.step(a)
        next_idx = self.store.add_obs(obs)
        for t in self.nstep.push(NStepItem(self.obs_idx, a, r, next_idx, done)):
            push(self.store, self.views, t)
        self.ep_return += raw
        self.ep_length += 1
        self.step += 1
        self.obs, self.obs_idx = obs, next_idx
        if done:
            self.episodes.append({"step": self.step, "episode": self.episode,
                                  "return": self.ep_return, "length": self.ep_length})
            self.episode += 1
            self.ep_return, self.ep_length = 0.0, 0
            self._start_episode()

    def learn_step(self) -> None:
        if len(self.store) < self.cfg["replay.min_size"] or self.step % self.cfg["replay.period"]:
            return
        beta = self.beta()
        m = self.agent.train_step(self.store, self.views, beta)
        m["beta"] = beta
        self._window.append(m)

    def run(self, steps: int | None = None) -> None:
        """Advance ``steps`` environment steps (default: to the configured budget)."""
        end = self.total_steps if steps is None else min(self.total_steps, self.step + steps)
        every = self.cfg["train.log_every"]
        while self.step < end:
            self.env_step()
            self.learn_step()
            if self.step % every == 0 or self.step == self.total_steps:
                self._flush_window()

    @property
    def done(self) -> bool:
        return self.step >= self.total_steps

    # -------------------------------------------------------------- metrics

    def metric_columns(self) -> list[str]:
        M = self.agent.M
        cols = ["step", "updates", "beta"]
        cols += [f"loss.m{m}" for m in range(M)] if self.agent.cfg.mode == "ren" else ["loss.joint"]
        for task in self.agent.aux.assignment.used_tasks():
            cols += [f"aux.m{m}.{task}" for m in self.agent.aux.members[task]]
        cols += [f"grad_norm.m{m}" for m in range(M)] if self.agent.cfg.mode == "ren" else ["grad_norm.joint"]
        cols += ["priority.max", "priority.mean"]
        return cols

    def _flush_window(self) -> None:
        if not self._window:
            return
        w = self._window
        row = {"step": self.step, "updates": self.agent.updates, "beta": float(np.mean([m["beta"] for m in w]))}
        # float64 accumulation so a window restored from a checkpoint averages identically
        loss = np.mean([m["loss"] for m in w], axis=0, dtype=np.float64)
        gn = np.mean([m["grad_norm"] for m in w], axis=0, dtype=np.float64)
        if self.agent.cfg.mode == "ren":
            row.update({f"loss.m{m}": loss[m] for m in range(self.agent.M)})
            row.update({f"grad_norm.m{m}": gn[m] for m in range(self.agent.M)})
        else:
            row["loss.joint"], row["grad_norm.joint"] = loss[0], gn[0]
        for task in self.agent.aux.assignment.used_tasks():
            vals = np.mean([m[f"aux.{task}"] for m in w], axis=0, dtype=np.float64)
            for m in self.agent.aux.members[task]:
                row[f"aux.m{m}.{task}"] = vals[m]
        leaves = np.concatenate([v.tree.leaves() for v in self.views])
        row["priority.max"] = float(leaves.max())
        row["priority.mean"] = float(leaves.mean())
        self.updates.append(row)
        self._window = []

    def episodes_csv(self) -> str:
        return _csv(EPISODE_FIELDS, self.episodes)

    def updates_csv(self) -> str:
        return _csv(self.metric_columns(), self.updates)

    def write_metrics(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "episodes.csv").write_text(self.episodes_csv())
        (out / "updates.csv").write_text(self.updates_csv())

    # ---------------------------------------------------------- persistence

    def state(self) -> dict[str, np.ndarray]:
        st = {f"agent/{k}": v for k, v in self.agent.state().items()}
        st.update({f"store/{k}": v for k, v in self.store.state().items()})
        for i, view in enumerate(self.views):
            st.update(view.state(f"view/{i}"))
        st.update({f"env/{k}": v for k, v in self.pipe.get_state().items()})
        rows = self.nstep.state()
        st["nstep"] = np.array(rows, dtype=np.float64).reshape(len(rows), 5)
        st["counters"] = np.array([self.step, self.episode, self.ep_return, self.ep_length, self.obs_idx])
        st["metrics/episodes"] = np.array([[e[k] for k in EPISODE_FIELDS] for e in self.episodes],
                                          dtype=np.float64).reshape(-1, len(EPISODE_FIELDS))
        cols = self.metric_columns()
        st["metrics/updates"] = np.array([[r.get(c, math.nan) for c in cols] for r in self.updates],
                                         dtype=np.float64).reshape(-1, len(cols))
        win = self._window
        if win:
            keys = sorted(win[0])
            st["window/keys"] = np.array([[ord(c) for c in "|".join(keys)]], dtype=np.float64)
            for k in keys:
                rows = np.stack([np.atleast_1d(np.asarray(m[k], dtype=np.float64)) for m in win])
                if k.startswith("aux."):
                    rows = rows[:, self.agent.aux.members[k[4:]]]  # drop the NaN slots of non-owners
                st[f"window/{k}"] = rows
        return st

    def load_state(self, st: dict[str, np.ndarray]) -> None:
        self.agent.load_state({k[6:]: v for k, v in st.items() if k.startswith("agent/")})
        self.store.load_state({k[6:]: v for k, v in st.items() if k.startswith("store/")})
        for i, view in enumerate(self.views):
            view.load_state(f"view/{i}", st)
        self.pipe.set_state({k[4:]: v for k, v in st.items() if k.startswith("env/")})
        self.nstep.load_state(st["nstep"])
        step, episode, ep_return, ep_length, obs_idx = st["counters"]
        self.step, self.episode, self.ep_length = int(step), int(episode), int(ep_length)
        self.ep_return, self.obs_idx = float(ep_return), int(obs_idx)
        self.obs = self.store.obs(self.obs_idx)
        self.episodes = [
            {"step": int(r[0]), "episode": int(r[1]), "return": float(r[2]), "length": int(r[3])}
            for r in st["metrics/episodes"]
        ]
        cols = self.metric_columns()
        self.updates = []
        for r in st["metrics/updates"]:
            row = {c: x for c, x in zip(cols, r) if not math.isnan(x)}
            row["step"], row["updates"] = int(row["step"]), int(row["updates"])
            self.updates.append(row)
        self._window = []
        if "window/keys" in st:
            keys = "".join(chr(int(c)) for c in st["window/keys"][0]).split("|")
            n = len(st[f"window/{keys[0]}"])
            for i in range(n):
                m = {k: st[f"window/{k}"][i].copy() for k in keys}
                for k in keys:
                    if k.startswith("aux."):
                        full = np.full(self.agent.M, np.nan)
                        full[self.agent.aux.members[k[4:]]] = m[k]
                        m[k] = full
                m["beta"] = float(m["beta"][0])
                self._window.append(m)

    def save(self, path) -> None:
        ckpt.save(path, self.cfg.to_text(), self.state())

    @classmethod
    def resume(cls, path, cfg: RunConfig | None = None) -> "Trainer":
        text, arrays = ckpt.load(path)
        saved = RunConfig.from_text(text)
        if cfg is not None and cfg.to_text() != saved.to_text():
            raise ConfigError("resume config does not match the checkpoint's config snapshot")
        tr = cls(saved)
        tr.load_state(arrays)
        return tr


def _csv(fields: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", restval="")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in fields})
    return buf.getvalue()


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


# -------------------------------------------------------------------------
# evaluation


def normalized_score(method: float, random: float, baseline: float) -> float:
    """Percentage of the random-to-baseline gap closed by ``method``."""
    if baseline == random:
        raise ValueError("baseline and random scores coincide; normalization undefined")
    return 100.0 * (method - random) / (baseline - random)


def evaluate_agent(agent: EnsembleAgent, cfg: RunConfig, episodes: int, seed: int) -> np.ndarray:
    """Noise-free greedy returns on fresh episode seeds."""
    pipe = build_env(cfg)
    out = []
    for ep in range(episodes):
        obs = pipe.reset(derive_seed(seed, "eval", ep))
        total, done = 0.0, False
        while not done:
            obs, _, done, raw = pipe.step(agent.select_action(obs, "eval"))
            total += raw
        out.append(total)
    return np.array(out)


def baseline_returns(cfg: RunConfig, episodes: int, seed: int) -> dict[str, np.ndarray]:
    env = build_env(cfg).env
    return {
        "random": rollout_returns(env, random_policy, episodes, seed),
        "scripted": rollout_returns(env, lambda e, _rng: scripted_policy(e), episodes, seed),
    }


def aux_columns(header: list[str]) -> dict[int, list[str]]:
    """Auxiliary-loss CSV columns grouped by member index."""
    out: dict[int, list[str]] = {}
    for c in header:
        if c.startswith("aux.m"):
            m = int(c.split(".")[1][1:])
            out.setdefault(m, []).append(c)
    return out


def load_agent(path) -> tuple[EnsembleAgent, RunConfig]:
    """Frozen agent from a checkpoint, without rebuilding its replay memory."""
    text, arrays = ckpt.load(path)
    cfg = RunConfig.from_text(text)
    pipe = build_env(cfg)
    agent = EnsembleAgent(cfg.agent_config(), pipe.obs_shape, pipe.n_actions, cfg["train.seed"])
    agent.load_state({k[6:]: v for k, v in arrays.items() if k.startswith("agent/")})
    return agent, cfg


class StepAdapter:
    """Preprocessed env with the ``step -> (obs, clipped reward, done)`` protocol."""

    def __init__(self, pipe: Preprocessor):
        self.pipe = pipe
        self.n_actions = pipe.n_actions

    def reset(self, seed: int) -> np.ndarray:
        return self.pipe.reset(seed)

    def step(self, action: int):
        obs, r, done, _ = self.pipe.step(action)
        return obs, r, done
