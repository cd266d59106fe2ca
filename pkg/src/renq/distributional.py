"""Categorical value distributions: support, projection, noisy layers, n-step targets."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class Support:
    v_min: float = -10.0
    v_max: float = 10.0
    K: int = 51

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("support needs at least two atoms")
        if not self.v_max > self.v_min:
            raise ValueError("support needs v_max > v_min")

    @property
    def atoms(self) -> np.ndarray:
        return np.linspace(self.v_min, self.v_max, self.K)

    @property
    def delta(self) -> float:
        return (self.v_max - self.v_min) / (self.K - 1)


def _check_dist(p: np.ndarray, atol: float = 1e-9) -> None:
    if p.dtype == np.float32:
        atol = max(atol, T.sum_tolerance(p.dtype))
    if np.any(p < -atol) or not np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=atol):
        raise ValueError("invalid categorical distribution")


def project_categorical(sup: Support, tz: np.ndarray, next_probs: np.ndarray) -> np.ndarray:
    """Project mass ``next_probs[..., k]`` sitting at ``tz[..., k]`` back onto ``sup``.

    Works row-wise over any leading batch shape. Each shifted atom is clamped
    to ``[v_min, v_max]`` and its mass split linearly between the two
    neighbouring support atoms.
    """
    tz = np.asarray(tz, dtype=np.float64)
    p = np.asarray(next_probs)
    if tz.shape != p.shape:
        raise ValueError(f"shifted atoms {tz.shape} and probabilities {p.shape} differ")
    _check_dist(p)
    if p.dtype == np.float32:
        # single-precision rows sum to one only to ~1e-7; renormalise so the target is exact in float64
        p = p.astype(np.float64)
        p = p / p.sum(axis=-1, keepdims=True)
    p = p.astype(np.float64)
    K = sup.K
    b = (np.clip(tz, sup.v_min, sup.v_max) - sup.v_min) / sup.delta
    b = np.clip(b, 0.0, K - 1)
    lo = np.floor(b).astype(np.intp)
    lo = np.minimum(lo, K - 2)
    frac = b - lo
    flat_p = p.reshape(-1, K)
    flat_lo = lo.reshape(-1, K)
    flat_frac = frac.reshape(-1, K)
    rows = flat_p.shape[0]
    out = np.zeros((rows, K))
    offset = (np.arange(rows) * K)[:, None]
    np.add.at(out.reshape(-1), (flat_lo + offset).ravel(), (flat_p * (1.0 - flat_frac)).ravel())
    np.add.at(out.reshape(-1), (flat_lo + 1 + offset).ravel(), (flat_p * flat_frac).ravel())
    return out.reshape(p.shape)


def scalar_q(sup: Support, probs: np.ndarray) -> np.ndarray:
    """Expected value of each categorical row."""
    return np.asarray(probs) @ sup.atoms


def dueling_aggregate(v_logits, adv_logits) -> np.ndarray:
    """Per-action probabilities from value logits ``[K]`` and advantage logits ``[A, K]``."""
    logits = T.dueling(T.as_tensor(v_logits), T.as_tensor(adv_logits))
    return T.softmax(logits).data


# --------------------------------------------------------------------------
# noisy layers


def _f(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.sqrt(np.abs(x))


@dataclass
class NoisyLinearParams:
    """Factorised-Gaussian noisy layer; arrays may carry a leading group axis."""

    mu_w: T.Tensor
    sigma_w: T.Tensor
    mu_b: T.Tensor
    sigma_b: T.Tensor
    sigma0: float = 0.1

    @classmethod
    def init(cls, rng: np.random.Generator, in_features: int, out_features: int,
             sigma0: float = 0.1, groups: int | None = None, name: str = "noisy"):
        lead = () if groups is None else (groups,)
        bound = 1.0 / np.sqrt(in_features)
        s = sigma0 / np.sqrt(in_features)
        return cls(
            mu_w=T.Tensor(rng.uniform(-bound, bound, lead + (out_features, in_features)), True, f"{name}.mu_w"),
            sigma_w=T.Tensor(np.full(lead + (out_features, in_features), s), True, f"{name}.sigma_w"),
            mu_b=T.Tensor(rng.uniform(-bound, bound, lead + (out_features,)), True, f"{name}.mu_b"),
            sigma_b=T.Tensor(np.full(lead + (out_features,), s), True, f"{name}.sigma_b"),
            sigma0=sigma0,
        )

    @property
    def in_features(self) -> int:
        return self.mu_w.shape[-1]

    @property
    def out_features(self) -> int:
        return self.mu_w.shape[-2]

    def parameters(self) -> list[T.Tensor]:
        return [self.mu_w, self.sigma_w, self.mu_b, self.sigma_b]


class FactorisedNoise(NamedTuple):
    """Input and output noise vectors; the weight noise is their outer product."""

    e_in: np.ndarray
    e_out: np.ndarray

    @property
    def weight(self) -> np.ndarray:
        return self.e_out[..., :, None] * self.e_in[..., None, :]


def sample_noise(rng: np.random.Generator, p: NoisyLinearParams, groups: int | None = None) -> FactorisedNoise:
    """Draw factorised noise for one forward pass.

    With ``groups`` set, each group gets its own draw; otherwise one draw is
    made (and later broadcast if the layer is grouped).
    """
    lead = () if groups is None else (groups,)
    e_in = _f(rng.standard_normal(lead + (p.in_features,)))
    e_out = _f(rng.standard_normal(lead + (p.out_features,)))
    return FactorisedNoise(e_in, e_out)


def noisy_linear_forward(p: NoisyLinearParams, x: T.Tensor, noise: FactorisedNoise | None = None) -> T.Tensor:
    """``noise=None`` is the zeroed (evaluation) mode.

    The noisy weight is never built: ``x (sigma * e_out e_in^T)^T`` equals
    ``((x * e_in) sigma^T) * e_out``, a second matmul in place of a
    weight-sized elementwise product.
    """
    if noise is None:
        return T.linear(x, p.mu_w, p.mu_b)
    dtype = p.mu_w.data.dtype
    e_in, e_out = noise.e_in.astype(dtype, copy=False), noise.e_out.astype(dtype, copy=False)
    b = T.add(p.mu_b, T.mul(p.sigma_b, T.Tensor(np.broadcast_to(e_out, p.mu_b.shape))))
    mean = T.linear(x, p.mu_w, b)
    x_in = T.mul(x, T.Tensor(np.broadcast_to(e_in[..., None, :], x.shape)))
    spread = T.linear(x_in, p.sigma_w, T.Tensor(np.zeros(p.mu_b.shape, dtype)))
    return T.add(mean, T.mul(spread, T.Tensor(np.broadcast_to(e_out[..., None, :], spread.shape))))


# --------------------------------------------------------------------------
# n-step returns


@dataclass
class NStepItem:
    obs: int
    action: int
    reward: float
    next_obs: int
    done: bool


@dataclass
class NStepTransition:
    obs: int
    action: int
    reward: float
    next_obs: int
    done: bool
    ret: float
    nstep_obs: int
    gamma_n: float
    nstep_done: bool


@dataclass
class NStepBuffer:
    n: int = 20
    gamma: float = 0.99
    items: deque = field(default_factory=deque)

    def __len__(self) -> int:
        return len(self.items)

    def push(self, item: NStepItem) -> list[NStepTransition]:
        """Add one step; return every transition that became complete."""
        self.items.append(item)
        out = []
        if item.done:
            while self.items:
                out.append(self.emit())
        elif len(self.items) >= self.n:
            out.append(self.emit())
        return out

    def emit(self) -> NStepTransition:
        """Pop the oldest item as an n-step transition."""
        if not self.items:
            raise RuntimeError("emit on empty n-step buffer")
        n_eff = min(self.n, len(self.items))
        seq = list(self.items)[:n_eff]
        ret = 0.0
        disc = 1.0
        for it in seq:
            ret += disc * it.reward
            disc *= self.gamma
        head = self.items.popleft()
        last = seq[-1]
        return NStepTransition(
            obs=head.obs, action=head.action, reward=head.reward, next_obs=head.next_obs,
            done=head.done, ret=ret, nstep_obs=last.next_obs, gamma_n=disc, nstep_done=last.done,
        )

    def state(self) -> list[tuple]:
        return [(i.obs, i.action, i.reward, i.next_obs, i.done) for i in self.items]

    def load_state(self, rows) -> None:
        self.items = deque(NStepItem(int(o), int(a), float(r), int(no), bool(d)) for o, a, r, no, d in rows)


def nstep_emit(rewards, gamma: float, n: int, terminal: bool = False) -> tuple[float, float]:
    """``(R, gamma_eff)`` for the first transition of ``rewards``."""
    buf = NStepBuffer(n=n, gamma=gamma)
    for i, r in enumerate(rewards):
        buf.items.append(NStepItem(i, 0, float(r), i + 1, terminal and i == len(rewards) - 1))
    t = buf.emit()
    return t.ret, t.gamma_n


# --------------------------------------------------------------------------
# targets


def double_dqn_target(sup: Support, online_q: np.ndarray, target_probs: np.ndarray,
                      returns: np.ndarray, gamma_n: np.ndarray, done: np.ndarray) -> np.ndarray:
    """Projected distributional Double-DQN targets.

    ``online_q [B, A]`` scalar values from the online network at the
    bootstrap state, ``target_probs [B, A, K]`` from the target network.
    Terminal rows project the point mass at the return.
    """
    online_q = np.asarray(online_q)
    target_probs = np.asarray(target_probs)
    returns = np.asarray(returns, dtype=np.float64)
    gamma_n = np.asarray(gamma_n, dtype=np.float64)
    done = np.asarray(done, dtype=bool)
    a_star = greedy(online_q)
    next_p = np.take_along_axis(target_probs, a_star[:, None, None], axis=1)[:, 0, :]
    disc = np.where(done, 0.0, gamma_n)
    tz = returns[:, None] + disc[:, None] * sup.atoms[None, :]
    # a terminal row collapses every atom onto the return, i.e. a point mass
    return project_categorical(sup, tz, next_p)


def greedy(q: np.ndarray) -> np.ndarray:
    """Argmax over the last axis, ties to the lowest index."""
    return np.argmax(q, axis=-1)
