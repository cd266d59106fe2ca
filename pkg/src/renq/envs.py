"""Small deterministic pixel games and the frame preprocessing pipeline.

Frames are single-channel ``[1, H, W]`` arrays indexed ``[c, y, x]`` with
values drawn from a five-level palette, so pixel-sum and moment targets
reflect object layout directly.
"""

from __future__ import annotations

import copy
import hashlib
import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

PALETTE = (0.0, 0.25, 0.5, 0.75, 1.0)


class CrossingEnv:
    """Walk an agent from the bottom row to the top row through traffic.

    Actions: 0 noop, 1 up, 2 down. Reaching row 0 pays 1 and restarts the
    agent at the bottom; a car landing on the agent pushes it back.
    """

    n_actions = 3
    ROAD, CAR, AGENT = 0.25, 0.75, 1.0

    def __init__(self, width: int = 16, height: int = 16, max_steps: int = 500,
                 pushback: int = 3, cars: bool = True, car_len: int = 2, seed: int = 0):
        self.width, self.height = width, height
        self.max_steps = max_steps
        self.pushback = pushback
        self.cars = cars
        self.car_len = car_len
        self.lanes = list(range(3, height - 3)) if cars else []
        self.col = width // 2
        self.reset(seed)

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (1, self.height, self.width)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._seed = int(seed)
        rng = np.random.default_rng(self._seed)
        n = len(self.lanes)
        self.car_x = rng.integers(0, self.width, size=n)
        self.period = rng.integers(1, 4, size=n)
        self.phase = rng.integers(0, 3, size=n)
        self.direction = np.where(np.arange(n) % 2 == 0, 1, -1)
        self.row = self.height - 1
        self.t = 0
        self.crossings = 0
        return self.render()

    def _occupied(self, lane: int, x: int, car_x=None) -> bool:
        cx = (self.car_x if car_x is None else car_x)[lane]
        d = self.direction[lane]
        cells = [(cx - d * k) % self.width for k in range(self.car_len)]
        return x in cells

    def _advance_cars(self, t: int) -> np.ndarray:
        moving = (t + self.phase) % self.period == 0
        return (self.car_x + moving * self.direction) % self.width

    def _lane_of(self, row: int) -> int | None:
        if row in self.lanes:
            return self.lanes.index(row)
        return None

    def step(self, action: int):
        if action not in (0, 1, 2):
            raise ValueError(f"invalid action {action} for CrossingEnv")
        if action == 1:
            self.row -= 1
        elif action == 2:
            self.row = min(self.row + 1, self.height - 1)
        self.t += 1
        self.car_x = self._advance_cars(self.t)
        reward = 0.0
        lane = self._lane_of(self.row)
        if lane is not None and self._occupied(lane, self.col):
            self.row = min(self.row + self.pushback, self.height - 1)
        elif self.row == 0:
            reward = 1.0
            self.crossings += 1
            self.row = self.height - 1
        done = self.t >= self.max_steps
        return self.render(), reward, done

    def render(self) -> np.ndarray:
        f = np.zeros((self.height, self.width))
        for lane, row in enumerate(self.lanes):
            f[row, :] = self.ROAD
            d = self.direction[lane]
            for k in range(self.car_len):
                f[row, (self.car_x[lane] - d * k) % self.width] = self.CAR
        f[self.row, self.col] = self.AGENT
        return f[None]

    def clone(self) -> "CrossingEnv":
        return copy.deepcopy(self)

    def get_state(self) -> dict[str, np.ndarray]:
        return {
            "seed": np.array([self._seed]), "car_x": self.car_x.astype(float),
            "period": self.period.astype(float), "phase": self.phase.astype(float),
            "direction": self.direction.astype(float),
            "scalars": np.array([self.row, self.t, self.crossings], dtype=float),
        }

    def set_state(self, st: dict[str, np.ndarray]) -> None:
        self._seed = int(st["seed"][0])
        self.car_x = st["car_x"].astype(np.int64)
        self.period = st["period"].astype(np.int64)
        self.phase = st["phase"].astype(np.int64)
        self.direction = st["direction"].astype(np.int64)
        self.row, self.t, self.crossings = (int(v) for v in st["scalars"])


class InvadersEnv:
    """Shoot a descending alien formation from the bottom row.

    Actions: 0 left, 1 right, 2 fire, 3 noop. Each destroyed alien pays 1 and
    vanishes. The episode ends when the formation is cleared, a bomb hits the
    agent, the formation reaches the agent's row, or the step cap is hit.
    """

    n_actions = 4
    BOMB, ALIEN, SHOT, AGENT = 0.25, 0.5, 0.75, 1.0

    def __init__(self, width: int = 16, height: int = 16, max_steps: int = 500,
                 alien_rows: int = 2, alien_cols: int = 6, alien_period: int = 4,
                 bomb_prob: float = 0.05, seed: int = 0):
        self.width, self.height = width, height
        self.max_steps = max_steps
        self.alien_rows, self.alien_cols = alien_rows, alien_cols
        self.alien_period = alien_period
        self.bomb_prob = bomb_prob
        self.reset(seed)

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (1, self.height, self.width)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._seed = int(seed)
        self.rng = np.random.default_rng(self._seed)
        self.alive = np.ones((self.alien_rows, self.alien_cols), dtype=bool)
        self.off_x = int(self.rng.integers(0, self.width - 2 * self.alien_cols + 2))
        self.off_y = 1
        self.dx = 1 if self.rng.random() < 0.5 else -1
        self.agent_x = self.width // 2
        self.shot: tuple[int, int] | None = None
        self.bombs: list[tuple[int, int]] = []
        self.t = 0
        self.done = False
        return self.render()

    def alien_cells(self) -> list[tuple[int, int, int, int]]:
        out = []
        for i in range(self.alien_rows):
            for j in range(self.alien_cols):
                if self.alive[i, j]:
                    out.append((self.off_y + 2 * i, self.off_x + 2 * j, i, j))
        return out

    def _hit_alien(self) -> int:
        if self.shot is None:
            return 0
        sy, sx = self.shot
        for y, x, i, j in self.alien_cells():
            if (y, x) == (sy, sx):
                self.alive[i, j] = False
                self.shot = None
                return 1
        return 0

    def step(self, action: int):
        if action not in (0, 1, 2, 3):
            raise ValueError(f"invalid action {action} for InvadersEnv")
        if self.done:
            raise RuntimeError("step after episode end; call reset")
        if action == 0:
            self.agent_x = max(0, self.agent_x - 1)
        elif action == 1:
            self.agent_x = min(self.width - 1, self.agent_x + 1)
        elif action == 2 and self.shot is None:
            self.shot = (self.height - 1, self.agent_x)
        self.t += 1
        kills = 0
        if self.shot is not None:
            sy, sx = self.shot
            self.shot = (sy - 1, sx) if sy - 1 >= 0 else None
            kills += self._hit_alien()
        if self.t % self.alien_period == 0 and self.alive.any():
            cols = np.nonzero(self.alive.any(axis=0))[0]
            left = self.off_x + 2 * cols.min() + self.dx
            right = self.off_x + 2 * cols.max() + self.dx
            if left < 0 or right >= self.width:
                self.dx = -self.dx
                self.off_y += 1
            else:
                self.off_x += self.dx
            kills += self._hit_alien()
        moved = []
        for by, bx in self.bombs:
            ny = by + (1 if self.t % 2 == 0 else 0)
            if ny < self.height:
                moved.append((ny, bx))
        self.bombs = moved
        hit = any(by == self.height - 1 and bx == self.agent_x for by, bx in self.bombs)
        if self.alive.any() and self.rng.random() < self.bomb_prob and not kills:
            cells = self.alien_cells()
            y, x, _, _ = cells[int(self.rng.integers(len(cells)))]
            if not any(b[1] == x and b[0] <= y + 2 for b in self.bombs):
                self.bombs.append((y + 1, x))
        low = max((y for y, *_ in self.alien_cells()), default=0)
        self.done = bool(
            hit or not self.alive.any() or low >= self.height - 2 or self.t >= self.max_steps
        )
        return self.render(), float(kills), self.done

    def render(self) -> np.ndarray:
        f = np.zeros((self.height, self.width))
        for by, bx in self.bombs:
            f[by, bx] = self.BOMB
        for y, x, _, _ in self.alien_cells():
            if 0 <= y < self.height:
                f[y, x] = self.ALIEN
        if self.shot is not None:
            f[self.shot] = self.SHOT
        f[self.height - 1, self.agent_x] = self.AGENT
        return f[None]

    def clone(self) -> "InvadersEnv":
        return copy.deepcopy(self)

    def get_state(self) -> dict[str, np.ndarray]:
        from .checkpoint import rng_to_array

        shot = (-1, -1) if self.shot is None else self.shot
        return {
            "seed": np.array([self._seed]), "alive": self.alive.astype(float).ravel(),
            "scalars": np.array([self.off_x, self.off_y, self.dx, self.agent_x, *shot,
                                 self.t, float(self.done)], dtype=float),
            "bombs": np.array(self.bombs, dtype=float).reshape(-1, 2),
            "rng": rng_to_array(self.rng),
        }

    def set_state(self, st: dict[str, np.ndarray]) -> None:
        from .checkpoint import rng_from_array

        self._seed = int(st["seed"][0])
        self.alive = st["alive"].reshape(self.alien_rows, self.alien_cols) > 0.5
        ox, oy, dx, ax, sy, sx, t, done = (int(v) for v in st["scalars"])
        self.off_x, self.off_y, self.dx, self.agent_x, self.t = ox, oy, dx, ax, t
        self.shot = None if sy < 0 else (sy, sx)
        self.done = bool(done)
        self.bombs = [(int(a), int(b)) for a, b in st["bombs"]]
        self.rng = rng_from_array(st["rng"])


ENVS = {"crossing": CrossingEnv, "invaders": InvadersEnv}


def make_env(name: str, **kwargs):
    try:
        return ENVS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None


# --------------------------------------------------------------------------
# scripted baselines


def scripted_policy(env) -> int:
    """Near-optimal action from full state access."""
    if isinstance(env, CrossingEnv):
        return _crossing_policy(env)
    if isinstance(env, InvadersEnv):
        return _invaders_policy(env)
    raise TypeError(f"no scripted policy for {type(env).__name__}")


def _crossing_policy(env: CrossingEnv) -> int:
    # try up, then wait, then retreat; keep the first move that is not hit
    start = env.row
    for a in (1, 0, 2):
        sim = env.clone()
        sim.step(a)
        expected = start - 1 if a == 1 else (start if a == 0 else min(start + 1, env.height - 1))
        if expected == 0 or sim.row == expected:
            return a
    return 0


def _invaders_policy(env: InvadersEnv) -> int:
    x = env.agent_x
    if any(bx == x and by >= env.height - 4 for by, bx in env.bombs):
        for a, nx in ((0, x - 1), (1, x + 1)):
            if 0 <= nx < env.width and not any(bx == nx and by >= env.height - 4 for by, bx in env.bombs):
                return a
    cells = env.alien_cells()
    if not cells:
        return 3
    if env.shot is None and any(cx == x for _, cx, _, _ in cells):
        return 2
    target = min((abs(cx + env.dx - x), cx + env.dx) for _, cx, _, _ in cells)[1]
    if target < x:
        return 0
    if target > x:
        return 1
    return 2 if env.shot is None else 3


def rollout_returns(env, policy, episodes: int, seed: int) -> np.ndarray:
    """Undiscounted episode returns of ``policy(env, rng)`` on fresh seeds."""
    rng = np.random.default_rng(seed)
    out = []
    for ep in range(episodes):
        env.reset(seed + ep)
        total, done = 0.0, False
        while not done:
            _, r, done = env.step(policy(env, rng))
            total += r
        out.append(total)
    return np.array(out)


def random_policy(env, rng: np.random.Generator) -> int:
    return int(rng.integers(env.n_actions))


# --------------------------------------------------------------------------
# preprocessing


@dataclass
class Preprocessor:
    """Action repeat, max-pool of the last two repeated frames, frame stack, reward clip."""

    env: object
    repeat: int = 1
    stack: int = 4
    max_pool: bool = True
    clip: float = 1.0
    resize: tuple[int, int] | None = None
    frames: deque = field(default_factory=deque)

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        h, w = self.resize or self.env.obs_shape[1:]
        return (self.stack, h, w)

    @property
    def n_actions(self) -> int:
        return self.env.n_actions

    def _frame(self, raw: np.ndarray) -> np.ndarray:
        f = raw.mean(axis=0)
        if self.resize is not None:
            h, w = self.resize
            rows = (np.arange(h) * f.shape[0]) // h
            cols = (np.arange(w) * f.shape[1]) // w
            f = f[rows][:, cols]
        return f

    def reset(self, seed: int | None = None) -> np.ndarray:
        f = self._frame(self.env.reset(seed))
        self.frames = deque([f] * self.stack, maxlen=self.stack)
        return self.observation()

    def observation(self) -> np.ndarray:
        return np.stack(self.frames)

    def step(self, action: int):
        """Returns ``(stacked obs, clipped reward, done, raw reward)``."""
        total = 0.0
        raws = []
        done = False
        for _ in range(self.repeat):
            raw, r, done = self.env.step(action)
            raws.append(raw)
            total += r
            if done:
                break
        frame = pool_last_two(raws) if self.max_pool else raws[-1]
        self.frames.append(self._frame(frame))
        return self.observation(), clip_reward(total, self.clip), done, total

    def get_state(self) -> dict[str, np.ndarray]:
        st = {f"env.{k}": v for k, v in self.env.get_state().items()}
        st["frames"] = np.stack(self.frames)
        return st

    def set_state(self, st: dict[str, np.ndarray]) -> None:
        self.env.set_state({k[4:]: v for k, v in st.items() if k.startswith("env.")})
        self.frames = deque(list(st["frames"]), maxlen=self.stack)


def pool_last_two(raws: list[np.ndarray]) -> np.ndarray:
    if len(raws) == 1:
        return raws[0]
    return np.maximum(raws[-2], raws[-1])


def clip_reward(r: float, bound: float = 1.0) -> float:
    return float(min(max(r, -bound), bound))


def frame_hash(frame: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(frame, dtype=np.float64).tobytes()).hexdigest()[:16]


def dump_trajectory(env, actions, seed: int) -> list[str]:
    """Line-delimited JSON records ``(step, action, reward, done, frame hash)``."""
    env.reset(seed)
    lines = []
    for i, a in enumerate(actions):
        frame, r, done = env.step(int(a))
        lines.append(json.dumps({"step": i, "action": int(a), "reward": r, "done": done,
                                 "frame": frame_hash(frame)}))
        if done:
            break
    return lines
