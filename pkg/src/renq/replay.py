"""One shared transition store with independent prioritized views over it."""

from __future__ import annotations

import numpy as np

from .distributional import NStepTransition

PRIORITY_EPS = 1e-6


class SumTree:
    """Array-backed binary sum tree whose leaf count doubles on demand."""

    def __init__(self, capacity: int = 1024):
        cap = 1
        while cap < max(1, capacity):
            cap *= 2
        self.capacity = cap
        self.tree = np.zeros(2 * cap)
        self.size = 0

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def leaves(self) -> np.ndarray:
        return self.tree[self.capacity : self.capacity + self.size]

    def _grow(self) -> None:
        old = self.leaves().copy()
        self.capacity *= 2
        self.tree = np.zeros(2 * self.capacity)
        self.tree[self.capacity : self.capacity + len(old)] = old
        for level_start in self._levels():
            idx = np.arange(level_start, 2 * level_start)
            self.tree[idx] = self.tree[2 * idx] + self.tree[2 * idx + 1]

    def _levels(self):
        start = self.capacity // 2
        while start >= 1:
            yield start
            start //= 2

    def append(self, value: float) -> int:
        if self.size == self.capacity:
            self._grow()
        i = self.size
        self.size += 1
        # single-leaf walk to the root; same sums as update() without the vector overhead
        tree = self.tree
        node = i + self.capacity
        tree[node] = value
        node //= 2
        while node >= 1:
            tree[node] = tree[2 * node] + tree[2 * node + 1]
            node //= 2
        return i

    def update(self, indices: np.ndarray, values: np.ndarray) -> None:
        indices = np.asarray(indices, dtype=np.intp)
        values = np.asarray(values, dtype=np.float64)
        if np.any(indices < 0) or np.any(indices >= self.size):
            raise IndexError("sum-tree index out of range")
        nodes = indices + self.capacity
        self.tree[nodes] = values
        nodes = np.unique(nodes // 2)
        while nodes[0] >= 1:
            self.tree[nodes] = self.tree[2 * nodes] + self.tree[2 * nodes + 1]
            if nodes[0] == 1:
                break
            nodes = np.unique(nodes // 2)

    def find(self, queries: np.ndarray) -> np.ndarray:
        """Leaf index whose prefix-sum interval contains each query."""
        q = np.array(queries, dtype=np.float64)
        node = np.ones(q.shape, dtype=np.intp)
        while node[0] < self.capacity:
            left = 2 * node
            lv = self.tree[left]
            go_right = q >= lv
            q = np.where(go_right, q - lv, q)
            node = np.where(go_right, left + 1, left)
        leaf = node - self.capacity
        # rounding can push a query past the last live leaf
        return np.minimum(leaf, self.size - 1)


class TransitionStore:
    """Append-only storage; observations are kept once and referenced by index."""

    def __init__(self, obs_shape: tuple[int, ...], capacity: int = 1024):
        self.obs_shape = tuple(obs_shape)
        self._obs = np.zeros((capacity,) + self.obs_shape, dtype=np.float32)
        self.n_obs = 0
        self._cols = {
            "obs": np.zeros(capacity, np.int64),
            "action": np.zeros(capacity, np.int64),
            "reward": np.zeros(capacity),
            "next_obs": np.zeros(capacity, np.int64),
            "done": np.zeros(capacity, bool),
            "ret": np.zeros(capacity),
            "nstep_obs": np.zeros(capacity, np.int64),
            "gamma_n": np.zeros(capacity),
            "nstep_done": np.zeros(capacity, bool),
        }
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add_obs(self, obs: np.ndarray) -> int:
        if self.n_obs == len(self._obs):
            grown = np.zeros((2 * len(self._obs),) + self.obs_shape, dtype=np.float32)
            grown[: self.n_obs] = self._obs[: self.n_obs]
            self._obs = grown
        self._obs[self.n_obs] = obs
        self.n_obs += 1
        return self.n_obs - 1

    def obs(self, idx) -> np.ndarray:
        return self._obs[np.asarray(idx)].astype(np.float64)

    def append(self, t: NStepTransition) -> int:
        if self.size == len(self._cols["obs"]):
            for k, v in self._cols.items():
                grown = np.zeros(2 * len(v), v.dtype)
                grown[: self.size] = v[: self.size]
                self._cols[k] = grown
        i = self.size
        for k in self._cols:
            self._cols[k][i] = getattr(t, k)
        self.size += 1
        return i

    def column(self, name: str, idx) -> np.ndarray:
        return self._cols[name][np.asarray(idx)]

    def nbytes(self) -> int:
        return int(self._obs[: self.n_obs].nbytes + sum(v[: self.size].nbytes for v in self._cols.values()))

    def state(self) -> dict[str, np.ndarray]:
        out = {"obs_table": self._obs[: self.n_obs].astype(np.float64)}
        for k, v in self._cols.items():
            out[f"col.{k}"] = v[: self.size].astype(np.float64)
        return out

    def load_state(self, st: dict[str, np.ndarray]) -> None:
        obs = st["obs_table"]
        self.n_obs = len(obs)
        cap = max(1024, 1 << max(0, (self.n_obs - 1).bit_length()))
        self._obs = np.zeros((cap,) + self.obs_shape, dtype=np.float32)
        self._obs[: self.n_obs] = obs
        self.size = len(st["col.obs"])
        cap = max(1024, 1 << max(0, (self.size - 1).bit_length()))
        for k, v in list(self._cols.items()):
            arr = np.zeros(cap, v.dtype)
            arr[: self.size] = st[f"col.{k}"].astype(v.dtype)
            self._cols[k] = arr


class PrioritizedView:
    """Sum-tree priority index over a :class:`TransitionStore`."""

    def __init__(self, store: TransitionStore, omega: float = 0.5,
                 beta_start: float = 0.4, beta_end: float = 1.0, min_size: int = 400):
        self.store = store
        self.omega = omega
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.min_size = min_size
        self.tree = SumTree()
        self.max_priority = 1.0

    def sync(self) -> None:
        """Insert every store index not yet indexed, at the current max priority."""
        while self.tree.size < len(self.store):
            self.tree.append(self.max_priority)

    def anneal_beta(self, frac: float) -> float:
        if not 0.0 <= frac <= 1.0:
            raise ValueError("training fraction must lie in [0, 1]")
        return self.beta_start + (self.beta_end - self.beta_start) * frac

    def sample(self, batch: int, rng: np.random.Generator, beta: float):
        """Stratified proportional sample: ``(indices, IS weights)``."""
        self.sync()
        n = self.tree.size
        if n < self.min_size or n == 0:
            raise RuntimeError(f"cannot sample: {n} transitions stored, need {self.min_size}")
        total = self.tree.total
        seg = total / batch
        queries = (np.arange(batch) + rng.random(batch)) * seg
        idx = self.tree.find(queries)
        probs = self.tree.leaves()[idx] / total
        w = (n * probs) ** (-beta)
        return idx, w / w.max()

    def update_priorities(self, indices, losses) -> None:
        losses = np.asarray(losses, dtype=np.float64)
        if np.any(losses < 0):
            raise ValueError("priority update with negative loss")
        p = (losses + PRIORITY_EPS) ** self.omega
        self.tree.update(np.asarray(indices), p)
        self.max_priority = max(self.max_priority, float(p.max()))

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.leaves": self.tree.leaves().copy(),
                f"{prefix}.max_priority": np.array([self.max_priority])}

    def load_state(self, prefix: str, st: dict[str, np.ndarray]) -> None:
        leaves = st[f"{prefix}.leaves"]
        self.tree = SumTree(max(1024, len(leaves)))
        self.tree.size = len(leaves)
        if len(leaves):
            self.tree.update(np.arange(len(leaves)), leaves)
        self.max_priority = float(st[f"{prefix}.max_priority"][0])


def push(store: TransitionStore, views: list[PrioritizedView], t: NStepTransition) -> int:
    """Append ``t`` once and index it in every view at that view's max priority."""
    i = store.append(t)
    for v in views:
        v.sync()
    return i
