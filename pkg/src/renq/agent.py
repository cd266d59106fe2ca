"""Ensemble of distributional Q-networks (independent or jointly trained).

All members share one stacked parameter set with a leading member axis, so a
forward pass evaluates the whole ensemble at once. Member parameters never
mix: every per-member quantity (loss, gradient norm, priority) is reduced
along its own slice.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import aux_tasks as X
from . import tensor as T
from .distributional import (
    NoisyLinearParams,
    Support,
    double_dqn_target,
    greedy,
    noisy_linear_forward,
    FactorisedNoise,
    sample_noise,
)
from .replay import PrioritizedView, TransitionStore

NOISY_LAYERS = ("value1", "value2", "adv1", "adv2")


def derive_seed(master: int, *keys) -> int:
    """Stable 63-bit seed for a named sub-stream of ``master``."""
    text = "/".join(str(k) for k in (master,) + keys)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


@dataclass
class NetConfig:
    channels: tuple[int, ...] = (16, 32)
    kernels: tuple[int, ...] = (3, 3)
    strides: tuple[int, ...] = (2, 2)
    hidden: int = 128
    sigma0: float = 0.1
    aux_hidden: int = 128
    intensity_bins: int = 84
    intensity_ratio: float = 0.5
    precision: str = "float32"


@dataclass
class AgentConfig:
    mode: str = "ren"  # "ren" (independent members) or "ren-j" (joint loss)
    members: int = 5
    v_min: float = -10.0
    v_max: float = 10.0
    atoms: int = 51
    gamma: float = 0.99
    n_step: int = 20
    batch: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1.5e-4
    max_grad_norm: float = 10.0
    target_period: int = 2000
    net: NetConfig = field(default_factory=NetConfig)
    assignment: X.AuxAssignment | None = None

    def __post_init__(self):
        if self.mode not in ("ren", "ren-j"):
            raise ValueError(f"unknown agent mode {self.mode!r}")
        if self.members < 1:
            raise ValueError("ensemble needs at least one member")
        if self.assignment is None:
            self.assignment = X.assign_tasks("none", self.members)
        if self.assignment.members != self.members:
            raise ValueError("auxiliary assignment does not cover every member")
        if self.mode == "ren-j" and self.assignment.used_tasks():
            raise ValueError("auxiliary tasks are only supported with independent members")


def _conv_out(size: int, k: int, s: int) -> int:
    return (size - k) // s + 1


class QNetwork:
    """Stacked dueling, noisy, distributional Q-networks for ``M`` members."""

    def __init__(self, M: int, obs_shape, n_actions: int, support: Support, cfg: NetConfig,
                 member_seeds):
        self.M, self.n_actions, self.support, self.cfg = M, n_actions, support, cfg
        C, H, W = obs_shape
        shapes = []
        c_in, h, w = C, H, W
        for c_out, k, s in zip(cfg.channels, cfg.kernels, cfg.strides):
            shapes.append((c_out, c_in, k))
            c_in, h, w = c_out, _conv_out(h, k, s), _conv_out(w, k, s)
        if h < 1 or w < 1:
            raise ValueError(f"observation {obs_shape} too small for the convolution stack")
        self.latent_shape = (c_in, h, w)
        F = c_in * h * w
        K, A, Hd = support.K, n_actions, cfg.hidden
        dims = {"value1": (F, Hd), "value2": (Hd, K), "adv1": (F, Hd), "adv2": (Hd, A * K)}
        per_member = []
        for m in range(M):
            rng = np.random.default_rng(member_seeds[m])
            arrays = {}
            for i, (c_out, c_in_, k) in enumerate(shapes):
                fan_in, fan_out = c_in_ * k * k, c_out * k * k
                arrays[f"conv{i}.K"] = T.xavier_uniform(rng, (c_out, c_in_, k, k), fan_in, fan_out)
                arrays[f"conv{i}.b"] = np.zeros(c_out)
            for name in NOISY_LAYERS:
                p = NoisyLinearParams.init(rng, *dims[name], sigma0=cfg.sigma0)
                arrays[f"{name}.mu_w"] = p.mu_w.data
                arrays[f"{name}.sigma_w"] = p.sigma_w.data
                arrays[f"{name}.mu_b"] = p.mu_b.data
                arrays[f"{name}.sigma_b"] = p.sigma_b.data
            per_member.append(arrays)
        self.params: dict[str, T.Tensor] = {
            f"q.{k}": T.Tensor(np.stack([pm[k] for pm in per_member]), True, f"q.{k}")
            for k in per_member[0]
        }
        self.n_conv = len(shapes)
        self.noisy = {
            name: NoisyLinearParams(
                self.params[f"q.{name}.mu_w"], self.params[f"q.{name}.sigma_w"],
                self.params[f"q.{name}.mu_b"], self.params[f"q.{name}.sigma_b"], cfg.sigma0,
            )
            for name in NOISY_LAYERS
        }

    def member_map(self) -> dict[str, np.ndarray]:
        return {k: np.arange(self.M) for k in self.params}

    def copy_from(self, other: "QNetwork") -> None:
        for k, p in self.params.items():
            p.data = other.params[k].data.copy()

    def features(self, x: T.Tensor) -> T.Tensor:
        """``x [M, B, C, H, W]`` -> latent ``[M, B, C', h, w]``."""
        dtype = self.params["q.conv0.K"].data.dtype
        if x.data.dtype != dtype:
            x = T.Tensor(x.data.astype(dtype))
        for i in range(self.n_conv):
            x = T.relu(T.conv2d(x, self.params[f"q.conv{i}.K"], self.params[f"q.conv{i}.b"],
                                stride=self.cfg.strides[i]))
        return x

    def flat(self, z: T.Tensor) -> T.Tensor:
        return T.reshape(z, z.shape[:2] + (-1,))

    def head(self, z: T.Tensor, noise=None) -> T.Tensor:
        """Dueling logits ``[M, B, A, K]``; ``noise`` maps layer name to ``(eps_w, eps_b)``."""
        zf = self.flat(z)
        n = noise or {}
        v = T.relu(noisy_linear_forward(self.noisy["value1"], zf, n.get("value1")))
        v = noisy_linear_forward(self.noisy["value2"], v, n.get("value2"))
        a = T.relu(noisy_linear_forward(self.noisy["adv1"], zf, n.get("adv1")))
        a = noisy_linear_forward(self.noisy["adv2"], a, n.get("adv2"))
        M, B = zf.shape[:2]
        adv = T.reshape(a, (M, B, self.n_actions, self.support.K))
        return T.dueling(v, adv)

    def first_hidden(self, zf: T.Tensor, members) -> T.Tensor:
        """Noise-free first dueling layers ``[w_adv, w_value]`` for a member subset."""
        out = []
        for name in ("adv1", "value1"):
            p = self.noisy[name]
            W = T.take(p.mu_w, members, 0)
            b = T.take(p.mu_b, members, 0)
            out.append(T.relu(T.linear(zf, W, b)))
        return T.concat(out, axis=2)

    def probs(self, x: np.ndarray, noise=None) -> np.ndarray:
        """Forward-only member distributions ``[M, B, A, K]`` for ``x [M, B, ...]``."""
        with T.no_grad():
            logits = self.head(self.features(T.Tensor(x)), noise)
            return T.softmax(logits).data

    def member_noise(self, rngs) -> dict:
        """Independent noise for every member (one generator per member)."""
        out = {}
        for name in NOISY_LAYERS:
            draws = [sample_noise(rngs[m], self.noisy[name]) for m in range(self.M)]
            out[name] = FactorisedNoise(np.stack([d.e_in for d in draws]), np.stack([d.e_out for d in draws]))
        return out

    def shared_noise(self, rng) -> dict:
        """One noise draw reused by every member."""
        out = {}
        for name in NOISY_LAYERS:
            out[name] = sample_noise(rng, self.noisy[name])
        return out


class EnsembleAgent:
    def __init__(self, cfg: AgentConfig, obs_shape, n_actions: int, seed: int):
        self.cfg = cfg
        self.M = cfg.members
        self.obs_shape = tuple(obs_shape)
        self.n_actions = n_actions
        self.support = Support(cfg.v_min, cfg.v_max, cfg.atoms)
        seeds = [derive_seed(seed, "member", m) for m in range(self.M)]
        self.online = QNetwork(self.M, obs_shape, n_actions, self.support, cfg.net, seeds)
        self.target = QNetwork(self.M, obs_shape, n_actions, self.support, cfg.net, seeds)
        self.target.copy_from(self.online)
        for p in self.target.params.values():
            p.requires_grad = False
        hd = cfg.net.hidden
        H, W = self.obs_shape[1:]
        self.intensity_hist = X.intensity_histogram(H, W, cfg.net.intensity_bins, cfg.net.intensity_ratio)
        self.aux = X.AuxHeads(cfg.assignment, self.online.latent_shape, n_actions, cfg.net.aux_hidden,
                              2 * hd, cfg.net.intensity_bins, lambda t: derive_seed(seed, "aux", t))
        self.params = {**self.online.params, **self.aux.named_parameters()}
        self.dtype = np.dtype(cfg.net.precision)
        for p in [*self.params.values(), *self.target.params.values()]:
            p.data = p.data.astype(self.dtype)
        self.member_of = {**self.online.member_map(), **self.aux.member_map()}
        self.adam = T.AdamState({k: p.shape for k, p in self.params.items()}, cfg.lr,
                                cfg.beta1, cfg.beta2, cfg.adam_eps, dtype=self.dtype)
        self.noise_rngs = [np.random.default_rng(derive_seed(seed, "noise", m)) for m in range(self.M)]
        n_views = self.M if cfg.mode == "ren" else 1
        self.sample_rngs = [np.random.default_rng(derive_seed(seed, "view", v)) for v in range(n_views)]
        self.act_rng = np.random.default_rng(derive_seed(seed, "act"))
        self.updates = 0

    @property
    def n_views(self) -> int:
        return len(self.sample_rngs)

    # ------------------------------------------------------------------ acting

    def _tile(self, obs: np.ndarray) -> np.ndarray:
        return np.broadcast_to(obs, (self.M,) + obs.shape)

    def ensemble_probs(self, obs: np.ndarray, noise=None, net: QNetwork | None = None) -> np.ndarray:
        """Mixture of member distributions ``[B, A, K]`` for ``obs [B, C, H, W]``."""
        net = net or self.online
        return net.probs(self._tile(obs), noise).mean(axis=0)

    def q_values(self, obs: np.ndarray, noise=None) -> np.ndarray:
        return self.ensemble_probs(obs, noise) @ self.support.atoms

    def member_q_values(self, obs: np.ndarray) -> np.ndarray:
        """Noise-free scalar values per member ``[M, B, A]``."""
        return self.online.probs(self._tile(obs)) @ self.support.atoms

    def select_action(self, obs: np.ndarray, mode: str = "train") -> int:
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown action-selection mode {mode!r}")
        noise = self.online.shared_noise(self.act_rng) if mode == "train" else None
        return int(greedy(self.q_values(obs[None], noise))[0])

    # ---------------------------------------------------------------- learning

    def targets(self, next_obs: np.ndarray, returns, gamma_n, done) -> np.ndarray:
        """Distributional Double-DQN targets from the ensemble ``[N, K]``."""
        online_q = self.ensemble_probs(next_obs) @ self.support.atoms
        target_p = self.ensemble_probs(next_obs, net=self.target)
        return double_dqn_target(self.support, online_q, target_p, returns, gamma_n, done)

    def sample(self, views: list[PrioritizedView], beta: float):
        B = self.cfg.batch
        if self.cfg.mode == "ren":
            draws = [views[m].sample(B, self.sample_rngs[m], beta) for m in range(self.M)]
            return np.stack([d[0] for d in draws]), np.stack([d[1] for d in draws])
        idx, w = views[0].sample(B, self.sample_rngs[0], beta)
        return idx, w

    def train_step(self, store: TransitionStore, views: list[PrioritizedView], beta: float) -> dict:
        idx, weights = self.sample(views, beta)
        batch = gather(store, idx)
        metrics = self.learn(batch, weights)
        per_sample = metrics.pop("per_sample")
        if self.cfg.mode == "ren":
            for m in range(self.M):
                views[m].update_priorities(idx[m], per_sample[m])
        else:
            views[0].update_priorities(idx, per_sample)
        return metrics

    def learn(self, batch: dict, weights: np.ndarray) -> dict:
        """One optimisation step on a gathered batch; returns metrics incl. per-sample losses."""
        cfg = self.cfg
        M, K = self.M, self.support.K
        if cfg.mode == "ren":
            B = batch["action"].shape[1]
            g = self.targets(batch["nstep_obs"].reshape((M * B,) + self.obs_shape),
                             batch["ret"].ravel(), batch["gamma_n"].ravel(), batch["nstep_done"].ravel())
            g = g.reshape(M, B, K)
            loss, metrics = self._independent_loss(batch, weights, g)
        else:
            B = batch["action"].shape[0]
            g = self.targets(batch["nstep_obs"], batch["ret"], batch["gamma_n"], batch["nstep_done"])
            loss, metrics = self._joint_loss(batch, weights, g)
        names = list(self.params)
        grads = dict(zip(names, T.grad(loss, [self.params[k] for k in names])))
        if cfg.mode == "ren":
            grads, norms = clip_per_member(grads, self.member_of, M, cfg.max_grad_norm)
        else:
            norm = T.global_norm(grads.values())
            clipped = T.clip_global_norm(list(grads.values()), cfg.max_grad_norm)
            grads, norms = dict(zip(names, clipped)), np.array([norm])
        T.adam_step({k: self.params[k].data for k in names}, grads, self.adam)
        self.updates += 1
        if self.updates % cfg.target_period == 0:
            self.sync_target()
        metrics["grad_norm"] = norms
        return metrics

    def _independent_loss(self, batch, weights, g):
        M = self.M
        s = T.Tensor(batch["obs"])
        B = s.shape[1]
        noise = self.online.member_noise(self.noise_rngs)
        z = self.online.features(s)
        logits = self.online.head(z, noise)
        chosen = T.pick(logits, batch["action"], axis=2)
        kl = T.kl_categorical(g, chosen)
        member_loss = T.scale(T.sum(T.mul(kl, T.Tensor(weights.astype(self.dtype))), axis=1), 1.0 / B)
        total = T.sum(member_loss)
        metrics = {"loss": member_loss.data.copy(), "per_sample": kl.data.copy()}
        aux_total, aux_metrics = self._aux_losses(batch, z)
        if aux_total is not None:
            total = T.add(total, aux_total)
        metrics.update(aux_metrics)
        return total, metrics

    def _joint_loss(self, batch, weights, g):
        M = self.M
        B = batch["action"].shape[0]
        s = T.Tensor(self._tile(batch["obs"]))
        noise = self.online.member_noise(self.noise_rngs)
        logits = self.online.head(self.online.features(s), noise)
        probs = T.softmax(T.pick(logits, np.broadcast_to(batch["action"], (M, B)), axis=2))
        mix = T.mean(probs, axis=0)
        kl = T.kl_probs(g, mix)
        loss = T.scale(T.sum(T.mul(kl, T.Tensor(weights.astype(self.dtype)))), 1.0 / B)
        return loss, {"loss": np.array([float(loss.data)]), "per_sample": kl.data.copy()}

    def _aux_losses(self, batch, z):
        tasks = self.aux.assignment.used_tasks()
        if not tasks:
            return None, {}
        A = self.n_actions
        s, s1 = batch["obs"], batch["next_obs"]
        a = batch["action"]
        need_grad_next = X.INVERSE in tasks
        if need_grad_next:
            z1 = self.online.features(T.Tensor(s1))
        else:
            with T.no_grad():
                z1 = self.online.features(T.Tensor(s1))
        zf = self.online.flat(z)
        terms = []
        metrics = {}
        for task in tasks:
            mem = self.aux.members[task]
            p = self.aux.params[task]
            a_t = a[mem]
            if task == X.TRANSITION:
                L = X.latent_transition_loss(p, T.take(z, mem, 0), a_t, z1.data[mem], A)
            elif task == X.INVERSE:
                L = X.inverse_dynamics_loss(p, T.take(zf, mem, 0), T.take(self.online.flat(z1), mem, 0), a_t)
            elif task == X.REWARD:
                w = self.online.first_hidden(T.take(zf, mem, 0), mem)
                L = X.reward_loss(p, w, a_t, batch["reward"][mem], A)
            elif task == X.INTENSITY:
                tv = X.intensity_change_target(s[mem], s1[mem])
                L = X.intensity_loss(p, T.take(zf, mem, 0), a_t, tv, self.intensity_hist, A)
            else:
                tv = X.moment_change_target(s[mem], s1[mem])
                L = X.moment_loss(p, T.take(zf, mem, 0), a_t, tv)
            alpha = self.aux.strengths(task)
            terms.append(T.sum(T.mul(L, T.Tensor(alpha.astype(L.data.dtype)))))
            vals = np.full(self.M, np.nan)
            vals[mem] = L.data
            metrics[f"aux.{task}"] = vals
        total = terms[0]
        for t in terms[1:]:
            total = T.add(total, t)
        return total, metrics

    def sync_target(self) -> None:
        self.target.copy_from(self.online)

    # ------------------------------------------------------------ persistence

    def state(self) -> dict[str, np.ndarray]:
        from .checkpoint import rng_to_array

        st = {f"param/{k}": p.data for k, p in self.params.items()}
        st.update({f"target/{k}": p.data for k, p in self.target.params.items()})
        st.update({f"adam/m/{k}": v for k, v in self.adam.m.items()})
        st.update({f"adam/v/{k}": v for k, v in self.adam.v.items()})
        st["counter/adam_step"] = np.array([self.adam.step])
        st["counter/updates"] = np.array([self.updates])
        for m, r in enumerate(self.noise_rngs):
            st[f"rng/noise/{m}"] = rng_to_array(r)
        for v, r in enumerate(self.sample_rngs):
            st[f"rng/view/{v}"] = rng_to_array(r)
        st["rng/act"] = rng_to_array(self.act_rng)
        return st

    def load_state(self, st: dict[str, np.ndarray]) -> None:
        from .checkpoint import rng_from_array

        dt = self.dtype
        for k, p in self.params.items():
            p.data = _conform(st[f"param/{k}"], p.shape, k, dt)
        for k, p in self.target.params.items():
            p.data = _conform(st[f"target/{k}"], p.shape, k, dt)
        for k in self.adam.m:
            self.adam.m[k] = _conform(st[f"adam/m/{k}"], self.adam.m[k].shape, k, dt)
            self.adam.v[k] = _conform(st[f"adam/v/{k}"], self.adam.v[k].shape, k, dt)
        self.adam.step = int(st["counter/adam_step"][0])
        self.updates = int(st["counter/updates"][0])
        self.noise_rngs = [rng_from_array(st[f"rng/noise/{m}"]) for m in range(self.M)]
        self.sample_rngs = [rng_from_array(st[f"rng/view/{v}"]) for v in range(self.n_views)]
        self.act_rng = rng_from_array(st["rng/act"])


def _conform(arr: np.ndarray, shape, name: str, dtype) -> np.ndarray:
    if arr.shape != tuple(shape):
        raise ValueError(f"checkpoint entry {name!r} has shape {arr.shape}, expected {tuple(shape)}")
    return arr.astype(dtype)


def gather(store: TransitionStore, idx: np.ndarray) -> dict[str, np.ndarray]:
    """Materialise transitions at ``idx`` (any shape) as arrays with that leading shape."""
    out = {k: store.column(k, idx) for k in ("action", "reward", "done", "ret", "gamma_n", "nstep_done")}
    for k in ("obs", "next_obs", "nstep_obs"):
        out[k] = store.obs(store.column(k, idx))
    return out


def clip_per_member(grads: dict[str, np.ndarray], member_of: dict[str, np.ndarray], M: int,
                    max_norm: float):
    """Rescale each member's gradient slice to global norm ``<= max_norm``."""
    sq = np.zeros(M)
    for k, g in grads.items():
        mem = member_of[k]
        per = (g.reshape(len(mem), -1) ** 2).sum(axis=1)
        np.add.at(sq, mem, per)
    norms = np.sqrt(sq)
    factor = np.where(norms > max_norm, max_norm / np.maximum(norms, 1e-300), 1.0)
    if np.all(factor == 1.0):
        return grads, norms
    out = {}
    for k, g in grads.items():
        f = factor[member_of[k]]
        out[k] = g * f.reshape((-1,) + (1,) * (g.ndim - 1))
    return out, norms
