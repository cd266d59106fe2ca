"""Auxiliary tasks: targets, heads, losses and per-member task assignment.

Five tasks are available. Each task owns one stacked head whose leading axis
runs over the members that were assigned the task, so a member only ever
receives gradient from its own heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

TRANSITION = "latent_transition"
INVERSE = "inverse_dynamics"
REWARD = "reward"
INTENSITY = "intensity_change"
MOMENT = "moment_change"

#: Order used by the unique-per-member strategy (member i gets TASKS[i]).
TASKS = (TRANSITION, INVERSE, REWARD, INTENSITY, MOMENT)


# --------------------------------------------------------------------------
# targets


def distance_grid(height: int, width: int) -> np.ndarray:
    """Euclidean distance of every pixel ``[y, x]`` to the origin pixel."""
    y = np.arange(height, dtype=np.float64)[:, None]
    x = np.arange(width, dtype=np.float64)[None, :]
    return np.sqrt(x * x + y * y)


def moment(s: np.ndarray) -> np.ndarray:
    """Channel-averaged distance-weighted pixel mass; ``s [..., C, H, W]``."""
    s = np.asarray(s, dtype=np.float64)
    C, H, W = s.shape[-3:]
    d = distance_grid(H, W)
    return (s * d).sum(axis=(-1, -2, -3)) / C


def moment_normalizer(height: int, width: int) -> float:
    """Sum of squared per-pixel distances."""
    return float((distance_grid(height, width) ** 2).sum())


def moment_change_target(s: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    H, W = np.shape(s)[-2:]
    return (moment(s_next) - moment(s)) / moment_normalizer(H, W)


def intensity_change_target(s: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    """Frobenius norm of the difference of channel means."""
    diff = np.asarray(s, np.float64).mean(axis=-3) - np.asarray(s_next, np.float64).mean(axis=-3)
    return np.sqrt((diff * diff).sum(axis=(-1, -2)))


@dataclass(frozen=True)
class HistogramTarget:
    lo: float
    hi: float
    K: int
    sigma: float

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.K

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.K + 1)


_erf = np.vectorize(math.erf, otypes=[float])


def histogram_target(val, ht: HistogramTarget) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-smoothed bin masses for ``val``, renormalised over ``[lo, hi]``.

    Returns ``(probs [..., K], clamped flags)``.
    """
    if not ht.sigma > 0:
        raise ValueError("histogram sigma must be positive")
    v = np.asarray(val, dtype=np.float64)
    clamped = (v < ht.lo) | (v > ht.hi)
    v = np.clip(v, ht.lo, ht.hi)
    z = (ht.edges - v[..., None]) / (ht.sigma * math.sqrt(2.0))
    cdf = 0.5 * (1.0 + _erf(z))
    mass = np.diff(cdf, axis=-1)
    total = cdf[..., -1] - cdf[..., 0]
    probs = mass / total[..., None]
    # tiny sigma underflows every bin except the one holding val
    bad = ~np.isfinite(probs).all(axis=-1) | (total <= 0)
    if np.any(bad):
        idx = np.clip(((v - ht.lo) / ht.width).astype(int), 0, ht.K - 1)
        one = np.zeros(probs.shape)
        np.put_along_axis(one, idx[..., None], 1.0, axis=-1)
        probs = np.where(bad[..., None], one, probs)
    return probs, clamped


def reward_histogram() -> HistogramTarget:
    return HistogramTarget(-1.0, 1.0, 3, 0.1)


def intensity_histogram(height: int, width: int, K: int = 84, ratio: float = 0.5) -> HistogramTarget:
    hi = math.sqrt(height * width)
    return HistogramTarget(0.0, hi, K, ratio * hi / K)


# --------------------------------------------------------------------------
# assignment


@dataclass
class AuxAssignment:
    tasks: list[dict[str, float]] = field(default_factory=list)
    strategy: str = "none"

    @property
    def members(self) -> int:
        return len(self.tasks)

    def members_for(self, task: str) -> list[int]:
        return [m for m, ts in enumerate(self.tasks) if task in ts]

    def used_tasks(self) -> list[str]:
        return [t for t in TASKS if self.members_for(t)]


def assign_tasks(strategy: str, M: int, task_ids=TASKS, strengths=None) -> AuxAssignment:
    task_ids = list(task_ids)
    for t in task_ids:
        if t not in TASKS:
            raise ValueError(f"unknown auxiliary task {t!r}")
    if strategy == "none":
        return AuxAssignment([{} for _ in range(M)], "none")
    if strategy == "unique":
        if M != len(task_ids):
            raise ValueError(f"unique assignment needs M == {len(task_ids)} tasks, got M={M}")
        return AuxAssignment([{t: 1.0} for t in task_ids], "unique")
    if strategy == "all":
        a = 1.0 / len(task_ids)
        return AuxAssignment([{t: a for t in task_ids} for _ in range(M)], "all")
    if strategy == "custom":
        if strengths is None or len(strengths) != M:
            raise ValueError("custom assignment needs one task->strength mapping per member")
        out = []
        for ts in strengths:
            for t, a in ts.items():
                if t not in TASKS:
                    raise ValueError(f"unknown auxiliary task {t!r}")
                if a < 0:
                    raise ValueError("auxiliary strengths must be non-negative")
            out.append(dict(ts))
        return AuxAssignment(out, "custom")
    raise ValueError(f"unknown assignment strategy {strategy!r}")


# --------------------------------------------------------------------------
# heads


def _dense(rng, groups, fan_in, fan_out, name):
    W = T.Tensor(T.xavier_uniform(rng, (groups, fan_out, fan_in), fan_in, fan_out), True, f"{name}.W")
    b = T.Tensor(np.zeros((groups, fan_out)), True, f"{name}.b")
    return W, b


def _conv(rng, groups, c_in, c_out, k, name):
    fan_in, fan_out = c_in * k * k, c_out * k * k
    K = T.Tensor(T.xavier_uniform(rng, (groups, c_out, c_in, k, k), fan_in, fan_out), True, f"{name}.K")
    b = T.Tensor(np.zeros((groups, c_out)), True, f"{name}.b")
    return K, b


class AuxHeads:
    """Stacked parameters for every task in use.

    ``latent_shape`` is the trunk's ``(C, h, w)``; ``hidden`` the head width;
    ``w_dim`` the width of the concatenated first dueling layers.
    """

    def __init__(self, assignment: AuxAssignment, latent_shape, n_actions: int, hidden: int,
                 w_dim: int, intensity_bins: int, seed_for):
        self.assignment = assignment
        self.latent_shape = tuple(latent_shape)
        self.n_actions = n_actions
        self.params: dict[str, dict[str, T.Tensor]] = {}
        self.members: dict[str, np.ndarray] = {}
        C, h, w = self.latent_shape
        F = C * h * w
        A = n_actions
        for task in assignment.used_tasks():
            mem = np.array(assignment.members_for(task))
            G = len(mem)
            rng = np.random.default_rng(seed_for(task))
            p: dict[str, T.Tensor] = {}
            if task == TRANSITION:
                p["in.K"], p["in.b"] = _conv(rng, G, C + 1, C, 3, f"{task}.in")
                p["res1.K"], p["res1.b"] = _conv(rng, G, C, C, 3, f"{task}.res1")
                p["res2.K"], p["res2.b"] = _conv(rng, G, C, C, 3, f"{task}.res2")
            elif task == INVERSE:
                p["fc1.W"], p["fc1.b"] = _dense(rng, G, 2 * F, hidden, f"{task}.fc1")
                p["fc2.W"], p["fc2.b"] = _dense(rng, G, hidden, A, f"{task}.fc2")
            elif task == REWARD:
                p["fc.W"], p["fc.b"] = _dense(rng, G, w_dim, A * 3, f"{task}.fc")
            elif task == INTENSITY:
                p["fc1.W"], p["fc1.b"] = _dense(rng, G, F, hidden, f"{task}.fc1")
                p["fc2.W"], p["fc2.b"] = _dense(rng, G, hidden, A * intensity_bins, f"{task}.fc2")
            elif task == MOMENT:
                p["fc1.W"], p["fc1.b"] = _dense(rng, G, F, hidden, f"{task}.fc1")
                p["fc2.W"], p["fc2.b"] = _dense(rng, G, hidden, A, f"{task}.fc2")
            self.params[task] = p
            self.members[task] = mem

    def named_parameters(self) -> dict[str, T.Tensor]:
        return {f"aux.{t}.{k}": v for t, p in self.params.items() for k, v in p.items()}

    def member_map(self) -> dict[str, np.ndarray]:
        return {f"aux.{t}.{k}": self.members[t] for t, p in self.params.items() for k in p}

    def strengths(self, task: str) -> np.ndarray:
        return np.array([self.assignment.tasks[m][task] for m in self.members[task]])


def action_plane(actions: np.ndarray, n_actions: int, h: int, w: int) -> np.ndarray:
    """Action index scaled to [0, 1] as one constant channel: ``[..., 1, h, w]``."""
    a = np.asarray(actions, dtype=np.float64) / max(1, n_actions - 1)
    return np.broadcast_to(a[..., None, None, None], a.shape + (1, h, w)).copy()


def transition_predict(p, z: T.Tensor, actions: np.ndarray, n_actions: int) -> T.Tensor:
    """Next latent from ``z [G, B, C, h, w]`` and actions ``[G, B]``."""
    G, B, C, h, w = z.shape
    plane = T.Tensor(action_plane(actions, n_actions, h, w).astype(z.data.dtype))
    x = T.concat([z, plane], axis=2)
    y = T.relu(T.add(T.conv2d(x, p["in.K"], p["in.b"], padding="same"), z))
    r = T.conv2d(T.relu(T.conv2d(y, p["res1.K"], p["res1.b"], padding="same")), p["res2.K"], p["res2.b"], padding="same")
    return T.add(y, r)


def latent_transition_loss(p, z: T.Tensor, actions, z_next_target: np.ndarray, n_actions: int) -> T.Tensor:
    """Per-member mean smooth-L1 ``[G]``; the target latent carries no gradient."""
    pred = transition_predict(p, z, actions, n_actions)
    G = pred.shape[0]
    per = T.smooth_l1(pred, z_next_target)
    return T.scale(T.sum(T.reshape(per, (G, -1)), axis=1), 1.0 / (per.data.size // G))


def inverse_dynamics_logits(p, z_flat: T.Tensor, z_next_flat: T.Tensor) -> T.Tensor:
    x = T.concat([z_flat, z_next_flat], axis=2)
    h = T.relu(T.linear(x, p["fc1.W"], p["fc1.b"]))
    return T.linear(h, p["fc2.W"], p["fc2.b"])


def inverse_dynamics_loss(p, z_flat, z_next_flat, actions) -> T.Tensor:
    logits = inverse_dynamics_logits(p, z_flat, z_next_flat)
    return T.mean(T.cross_entropy(actions, logits), axis=1)


def reward_loss(p, w: T.Tensor, actions, rewards, n_actions: int) -> T.Tensor:
    G, B, _ = w.shape
    logits = T.reshape(T.linear(w, p["fc.W"], p["fc.b"]), (G, B, n_actions, 3))
    chosen = T.pick(logits, actions, axis=2)
    target, _ = histogram_target(np.broadcast_to(rewards, (G, B)), reward_histogram())
    return T.mean(T.soft_cross_entropy(target, chosen), axis=1)


def intensity_loss(p, z_flat, actions, target_vals, ht: HistogramTarget, n_actions: int) -> T.Tensor:
    G, B, _ = z_flat.shape
    h = T.relu(T.linear(z_flat, p["fc1.W"], p["fc1.b"]))
    logits = T.reshape(T.linear(h, p["fc2.W"], p["fc2.b"]), (G, B, n_actions, ht.K))
    chosen = T.pick(logits, actions, axis=2)
    target, _ = histogram_target(np.broadcast_to(target_vals, (G, B)), ht)
    return T.mean(T.soft_cross_entropy(target, chosen), axis=1)


def moment_loss(p, z_flat, actions, target_vals) -> T.Tensor:
    h = T.relu(T.linear(z_flat, p["fc1.W"], p["fc1.b"]))
    out = T.pick(T.linear(h, p["fc2.W"], p["fc2.b"]), actions, axis=2)
    return T.mean(T.smooth_l1(out, np.broadcast_to(target_vals, out.shape)), axis=1)
