"""Monte-Carlo bias / variance / covariance laboratory for randomized learners.

A *grid* holds the test-point predictions of ``D x S`` trained predictors:
``D`` datasets drawn from a synthetic task and ``S`` independent seeds of the
learning algorithm on each dataset. Every estimate below is a deterministic
reduction of such grids. Standard errors come from a delete-one-dataset
jackknife, because predictors sharing a dataset are correlated.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .agent import derive_seed

# --------------------------------------------------------------------------
# synthetic tasks


@dataclass(frozen=True)
class SyntheticTask:
    name: str
    dim: int
    n_train: int
    sigma2: float
    kind: str  # "linear", "quadratic" or "linear10"

    def f_star(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            return 1.5 * x[..., 0] - 0.5
        if self.kind == "quadratic":
            return x[..., 0] ** 2
        w = np.linspace(-1.0, 1.0, self.dim)
        return x @ w

    def sample_x(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "linear10":
            return rng.standard_normal((n, self.dim))
        return rng.uniform(-1.0, 1.0, (n, self.dim))

    def sample(self, rng: np.random.Generator, n: int):
        x = self.sample_x(rng, n)
        return x, self.f_star(x) + np.sqrt(self.sigma2) * rng.standard_normal(n)


TASKS = {
    "linear": SyntheticTask("linear", 1, 20, 0.25, "linear"),
    "quadratic": SyntheticTask("quadratic", 1, 30, 0.01, "quadratic"),
    "mlp10": SyntheticTask("mlp10", 10, 40, 0.25, "linear10"),
}


# --------------------------------------------------------------------------
# learners: ``fit(x, y, seeds) -> predictor state``, ``predict(state, x) -> [S, T]``


class ConstantLearner:
    def __init__(self, value: float = 0.0):
        self.value = value

    def fit(self, x, y, seeds):
        return len(seeds)

    def predict(self, state, x):
        return np.full((state, len(x)), self.value)


def _features(x: np.ndarray, degree: int) -> np.ndarray:
    cols = [np.ones(len(x))]
    for d in range(1, degree + 1):
        cols.extend((x**d).T)
    return np.stack(cols, axis=1)


class RidgeLearner:
    """Closed-form ridge regression; ignores its seed (a convex, deterministic learner)."""

    def __init__(self, lam: float = 0.0, degree: int = 1):
        self.lam, self.degree = lam, degree

    def fit(self, x, y, seeds):
        F = _features(x, self.degree)
        A = F.T @ F + self.lam * np.eye(F.shape[1])
        w = np.linalg.solve(A, F.T @ y)
        return np.broadcast_to(w, (len(seeds), len(w)))

    def predict(self, state, x):
        return state @ _features(x, self.degree).T


class SGDLinearLearner:
    """Linear model from a random start, a few epochs of seeded minibatch SGD."""

    def __init__(self, epochs: int = 3, lr: float = 0.1, batch: int = 4, init_scale: float = 1.0,
                 l2: float = 0.0, degree: int = 1):
        self.epochs, self.lr, self.batch = epochs, lr, batch
        self.init_scale, self.l2, self.degree = init_scale, l2, degree

    def fit(self, x, y, seeds):
        F = _features(x, self.degree)
        N, P = F.shape
        S = len(seeds)
        rngs = [np.random.default_rng(s) for s in seeds]
        w = np.stack([r.standard_normal(P) * self.init_scale for r in rngs])
        for _ in range(self.epochs):
            order = np.stack([r.permutation(N) for r in rngs])
            for start in range(0, N, self.batch):
                idx = order[:, start : start + self.batch]
                Fb = F[idx]  # [S, b, P]
                resid = np.einsum("sbp,sp->sb", Fb, w) - y[idx]
                g = np.einsum("sb,sbp->sp", resid, Fb) / idx.shape[1] + self.l2 * w
                w = w - self.lr * g
        return w

    def predict(self, state, x):
        return state @ _features(x, self.degree).T


class MLPLearner:
    """One-hidden-layer ReLU net, random init, full-batch gradient descent.

    All seeds of one dataset train together as a grouped network.
    """

    def __init__(self, hidden: int = 8, steps: int = 100, lr: float = 0.05, init_scale: float = 1.0):
        self.hidden, self.steps, self.lr, self.init_scale = hidden, steps, lr, init_scale

    def fit(self, x, y, seeds):
        S, (N, I), H = len(seeds), x.shape, self.hidden
        rngs = [np.random.default_rng(s) for s in seeds]
        c1 = self.init_scale / np.sqrt(I)
        c2 = self.init_scale / np.sqrt(H)
        W1 = T.Tensor(np.stack([r.standard_normal((H, I)) * c1 for r in rngs]), True)
        W2 = T.Tensor(np.stack([r.standard_normal((1, H)) * c2 for r in rngs]), True)
        b1 = T.Tensor(np.zeros((S, H)), True)
        b2 = T.Tensor(np.zeros((S, 1)), True)
        params = [W1, b1, W2, b2]
        xs = T.Tensor(np.broadcast_to(x, (S, N, I)))
        target = np.broadcast_to(y[None, :, None], (S, N, 1))
        for _ in range(self.steps):
            out = T.linear(T.relu(T.linear(xs, W1, b1)), W2, b2)
            err = T.sub(out, T.Tensor(target))
            # mean over samples of each seed's squared error, summed over seeds
            loss = T.scale(T.sum(T.mul(err, err)), 1.0 / N)
            for p, g in zip(params, T.grad(loss, params)):
                p.data = p.data - self.lr * g
        return tuple(p.data for p in params)

    def predict(self, state, x):
        W1, b1, W2, b2 = state
        h = np.maximum(np.einsum("ti,shi->sth", x, W1) + b1[:, None, :], 0.0)
        return np.einsum("sth,soh->sto", h, W2)[..., 0] + b2


DEFAULT_LEARNERS = {
    "linear": lambda: SGDLinearLearner(epochs=3, lr=0.1, batch=4, init_scale=1.0),
    "quadratic": lambda: RidgeLearner(lam=0.1, degree=1),
    "mlp10": lambda: MLPLearner(hidden=8, steps=100, lr=0.05, init_scale=1.5),
}


# --------------------------------------------------------------------------
# trial grids


@dataclass
class TrialGrid:
    preds: np.ndarray  # [D, S, T]
    x_test: np.ndarray
    f_test: np.ndarray  # f* at test points
    y_noisy: np.ndarray  # [D, S, T] fresh noisy labels, one per predictor and point
    sigma2: float

    @property
    def D(self) -> int:
        return self.preds.shape[0]

    @property
    def S(self) -> int:
        return self.preds.shape[1]


class NondeterminismError(RuntimeError):
    pass


def run_trials(learner, task: SyntheticTask, D: int, S: int, n_test: int = 100, seed: int = 0,
               check_cells: int = 2) -> TrialGrid:
    """Train ``D * S`` predictors and cache their test predictions.

    Dataset ``d`` uses generator ``hash(seed, "dataset", d)``; seed ``s`` on
    dataset ``d`` is ``hash(seed, "learner", d, s)``. A few datasets are
    retrained and must reproduce bit-exactly.
    """
    x_test = task.sample_x(np.random.default_rng(derive_seed(seed, "test")), n_test)
    f_test = task.f_star(x_test)
    preds = np.empty((D, S, n_test))
    data = []
    for d in range(D):
        x, y = task.sample(np.random.default_rng(derive_seed(seed, "dataset", d)), task.n_train)
        seeds = [derive_seed(seed, "learner", d, s) for s in range(S)]
        preds[d] = learner.predict(learner.fit(x, y, seeds), x_test)
        data.append((x, y, seeds))
    for d in sorted({0, D - 1})[:check_cells]:
        x, y, seeds = data[d]
        again = learner.predict(learner.fit(x, y, seeds), x_test)
        if not np.array_equal(again, preds[d]):
            raise NondeterminismError(f"learner is not deterministic: dataset {d} retrained differently")
    noise_rng = np.random.default_rng(derive_seed(seed, "label-noise"))
    y_noisy = f_test + np.sqrt(task.sigma2) * noise_rng.standard_normal((D, S, n_test))
    return TrialGrid(preds, x_test, f_test, y_noisy, task.sigma2)


# --------------------------------------------------------------------------
# estimators


def _jackknife(stat, D: int) -> tuple[float, float]:
    """``(estimate, delete-one-dataset standard error)`` of ``stat(mask)``."""
    full = stat(np.ones(D, bool))
    if D < 2:
        return full, float("nan")
    loo = np.empty(D)
    for d in range(D):
        mask = np.ones(D, bool)
        mask[d] = False
        loo[d] = stat(mask)
    se = np.sqrt((D - 1) / D * np.sum((loo - loo.mean()) ** 2))
    return full, float(se)


@dataclass
class BvcReport:
    M: int
    bias2: float
    var: float
    cov: float
    sigma2: float
    ge_direct: float
    ge_decomposed: float
    se: dict = field(default_factory=dict)
    per_point: dict = field(default_factory=dict)
    ge_single: float = float("nan")

    def rows(self, config: str) -> list[dict]:
        out = []
        for comp in ("bias2", "var", "cov", "sigma2", "ge_direct", "ge_decomposed", "ge_single"):
            val = getattr(self, comp)
            if comp == "cov" and self.M < 2:
                continue
            if comp == "ge_single" and np.isnan(val):
                continue
            out.append({"config": config, "component": comp, "value": val,
                        "stderr": self.se.get(comp, float("nan"))})
        return out


class _DatasetSums:
    """Per-dataset sufficient statistics of member predictions ``[M, D, G, T]``.

    Any subset of datasets can then be reduced in ``O(M^2 D T)``, which keeps
    the delete-one-dataset jackknife cheap.
    """

    def __init__(self, members: np.ndarray, f_test: np.ndarray, y_noisy: np.ndarray):
        self.M, self.D, self.G, _ = members.shape
        self.f_test = f_test
        self.s1 = members.sum(axis=2)  # [M, D, T]
        self.s2 = np.einsum("adgt,bdgt->abdt", members, members)  # [M, M, D, T]
        ens = members.mean(axis=0)
        self.sq_err = ((y_noisy - ens) ** 2).sum(axis=1)  # [D, T]

    def stats(self, mask: np.ndarray):
        """Member biases ``[M, T]`` and unbiased covariance matrix ``[M, M, T]``."""
        n = self.G * int(mask.sum())
        mean = self.s1[:, mask].sum(axis=1) / n
        cov = (self.s2[:, :, mask].sum(axis=2) - n * mean[:, None] * mean[None, :]) / (n - 1)
        return mean - self.f_test, cov

    def parts(self, mask: np.ndarray):
        bias, cov = self.stats(mask)
        var = np.einsum("aat->at", cov)
        off = ~np.eye(self.M, dtype=bool)
        cov_bar = cov[off].mean(axis=0) if self.M > 1 else np.zeros(cov.shape[-1])
        return bias, var, cov, bias.mean(axis=0), var.mean(axis=0), cov_bar

    def direct(self, mask: np.ndarray) -> float:
        return float(self.sq_err[mask].sum() / (self.G * int(mask.sum()) * self.sq_err.shape[1]))


def ensemble_members(grid: TrialGrid, M: int) -> np.ndarray:
    """Regroup seeds into ensembles: ``[M, D, S // M, T]``; member ``m`` is seed slot ``m``."""
    if M > grid.S:
        raise ValueError(f"ensemble size M={M} exceeds the {grid.S} seeds per dataset")
    G = grid.S // M
    P = grid.preds[:, : G * M].reshape(grid.D, G, M, -1)
    return P.transpose(2, 0, 1, 3)


def estimate_ensemble_from_members(members: np.ndarray, f_test: np.ndarray, y_noisy: np.ndarray,
                                   sigma2: float) -> BvcReport:
    """Decomposition for ensembles given member predictions ``[M, D, G, T]``.

    ``y_noisy [D, G, T]`` are labels for the direct error of the averaged predictor.
    """
    M, D = members.shape[:2]
    sums = _DatasetSums(members, f_test, y_noisy)

    def decomposed(mask):
        _, _, _, b, v, c = sums.parts(mask)
        return float(np.mean(b**2 + v / M + (1 - 1 / M) * c) + sigma2)

    def single(mask):
        bias, var, _, _, _, _ = sums.parts(mask)
        return float(np.mean(var + bias**2) + sigma2)

    def mean_of(i):
        return lambda mask: float(np.mean(sums.parts(mask)[i]))

    def cov_minus_var(mask):
        p = sums.parts(mask)
        return float(np.mean(p[5] - p[4]))

    est = {
        "bias2": _jackknife(lambda m: float(np.mean(sums.parts(m)[3] ** 2)), D),
        "var": _jackknife(mean_of(4), D),
        "cov": _jackknife(mean_of(5), D) if M > 1 else (0.0, 0.0),
        "ge_direct": _jackknife(sums.direct, D),
        "ge_decomposed": _jackknife(decomposed, D),
        "ge_single": _jackknife(single, D),
        "cov_minus_var": _jackknife(cov_minus_var, D),
        "ens_minus_single": _jackknife(lambda m: decomposed(m) - single(m), D),
        "direct_minus_decomposed": _jackknife(lambda m: sums.direct(m) - decomposed(m), D),
    }
    bias, var, cov, b, v, c = sums.parts(np.ones(D, bool))
    se = {k: s for k, (_, s) in est.items()}
    se["sigma2"] = 0.0
    return BvcReport(
        M=M, bias2=est["bias2"][0], var=est["var"][0], cov=est["cov"][0], sigma2=sigma2,
        ge_direct=est["ge_direct"][0], ge_decomposed=est["ge_decomposed"][0],
        ge_single=est["ge_single"][0], se=se,
        per_point={"bias": b, "var": v, "cov": c, "member_bias": bias, "member_var": var, "member_cov": cov},
    )


def estimate_single_bvc(grid: TrialGrid) -> BvcReport:
    """Single-predictor decomposition over all ``D * S`` cells."""
    members = grid.preds[None]
    return estimate_ensemble_from_members(members, grid.f_test, grid.y_noisy, grid.sigma2)


def estimate_ensemble_bvc(grid: TrialGrid, M: int) -> BvcReport:
    """Ensembles of ``M`` seeds on a shared dataset."""
    members = ensemble_members(grid, M)
    G = members.shape[2]
    return estimate_ensemble_from_members(members, grid.f_test, grid.y_noisy[:, :G], grid.sigma2)


def combined_se(report: BvcReport) -> float:
    """Standard error of ``GE_direct - GE_decomposed``."""
    return report.se["direct_minus_decomposed"]


def identity_gap(report: BvcReport) -> tuple[float, float]:
    """``(|GE_direct - GE_decomposed|, combined SE)``."""
    return abs(report.ge_direct - report.ge_decomposed), combined_se(report)


def decompose_bias_cobias(member_bias: np.ndarray):
    """Co-bias expansion of the squared ensemble bias.

    ``member_bias [M, ...]``; returns ``(bias_bar^2, expansion, cob [M, M, ...])``.
    """
    b = np.asarray(member_bias, dtype=np.float64)
    M = b.shape[0]
    cob = b[:, None] * b[None, :]
    diag = np.einsum("mm...->m...", cob)
    off = cob.sum(axis=(0, 1)) - diag.sum(axis=0)
    expansion = (diag.sum(axis=0) + off) / M**2
    return b.mean(axis=0) ** 2, expansion, cob


def covariance_via_conditional_means(members: np.ndarray, m: int, mp: int):
    """Member covariance from per-dataset seed averages.

    ``members [M, D, G, T]``. Returns ``(conditional-mean estimate, direct
    pairwise estimate, SE of their difference)``, each averaged over test points.
    """
    M, D, G, Tn = members.shape

    def cond(mask):
        # same pooled normaliser as the direct estimate, so the two differ
        # only by the zero-mean within-dataset cross products
        A, B = members[m, mask], members[mp, mask]
        n = A.shape[0] * G
        ma, mb = A.mean(axis=(0, 1)), B.mean(axis=(0, 1))
        ca, cb = A.mean(axis=1), B.mean(axis=1)
        return float(np.mean(G * ((ca - ma) * (cb - mb)).sum(axis=0) / (n - 1)))

    def direct(mask):
        A = members[m, mask].reshape(-1, Tn)
        B = members[mp, mask].reshape(-1, Tn)
        return float(np.mean(((A - A.mean(0)) * (B - B.mean(0))).sum(axis=0) / (len(A) - 1)))

    c, _ = _jackknife(cond, D)
    d, _ = _jackknife(direct, D)
    _, se = _jackknife(lambda mask: cond(mask) - direct(mask), D)
    return c, d, se


@dataclass
class InequalityCheck:
    cov_le_var: bool
    ens_le_single: bool
    cov_minus_var: float
    ens_minus_single: float
    slack_cov: float
    slack_ge: float

    @property
    def passed(self) -> bool:
        return self.cov_le_var and self.ens_le_single


def check_inequalities(report: BvcReport, k: float = 2.0) -> InequalityCheck:
    """Cov̄ <= Var̄ and GE(ensemble) <= GE(single), each up to ``k`` standard errors."""
    dcv = report.cov - report.var
    dge = report.ge_decomposed - report.ge_single
    s_cov = k * report.se.get("cov_minus_var", 0.0)
    s_ge = k * report.se.get("ens_minus_single", 0.0)
    return InequalityCheck(dcv <= s_cov, dge <= s_ge, dcv, dge, s_cov, s_ge)


# --------------------------------------------------------------------------
# proxy bias for value functions


@dataclass
class Transitions:
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray


def collect_transitions(env, q_fn, n: int, epsilon: float, seed: int) -> Transitions:
    """Roll ``n`` fresh transitions with the epsilon-greedy policy of ``q_fn``.

    ``env`` exposes ``reset(seed) -> obs``, ``step(a) -> (obs, reward, done)``
    and ``n_actions``; ``q_fn(obs [B, ...]) -> [B, A]``.
    """
    rng = np.random.default_rng(derive_seed(seed, "collect"))
    episode = 0
    obs = env.reset(derive_seed(seed, "episode", episode))
    rows = []
    for _ in range(n):
        if rng.random() < epsilon:
            a = int(rng.integers(env.n_actions))
        else:
            a = int(np.argmax(q_fn(obs[None])[0]))
        nxt, r, done = env.step(a)
        rows.append((obs, a, r, nxt, done))
        obs = nxt
        if done:
            episode += 1
            obs = env.reset(derive_seed(seed, "episode", episode))
    o, a, r, nx, d = zip(*rows)
    return Transitions(np.stack(o), np.array(a), np.array(r, float), np.stack(nx), np.array(d, bool))


def merge_transitions(parts: list[Transitions]) -> Transitions:
    return Transitions(*(np.concatenate([getattr(p, f) for p in parts])
                         for f in ("obs", "action", "reward", "next_obs", "done")))


def proxy_bvc(member_q: list, tr: Transitions, gamma: float, batch: int = 256) -> dict:
    """Proxy decomposition over runs.

    ``member_q[j](obs [B, ...]) -> [M, B, A]`` are the frozen member values
    of run ``j``. The run-averaged TD target
    ``G = E_runs[r + gamma * max_a' Q_ens(s', a')]`` replaces the unknown
    optimal value; member bias is ``E_runs[Q_m(s, a)] - G``. Variances and
    covariances are taken across runs (unbiased), then everything is
    averaged over transitions.
    """
    R = len(member_q)
    if R < 2:
        raise ValueError("proxy measurement needs at least two independent runs")
    n = len(tr.action)
    q_sa, y = [], []
    for fn in member_q:
        qs, ys = [], []
        for i in range(0, n, batch):
            sl = slice(i, i + batch)
            q = fn(tr.obs[sl])  # [M, b, A]
            qs.append(np.take_along_axis(q, tr.action[sl][None, :, None], axis=2)[..., 0])
            qn = fn(tr.next_obs[sl]).mean(axis=0).max(axis=1)
            ys.append(tr.reward[sl] + gamma * np.where(tr.done[sl], 0.0, qn))
        q_sa.append(np.concatenate(qs, axis=1))
        y.append(np.concatenate(ys))
    Q = np.stack(q_sa)  # [R, M, n]
    Y = np.stack(y)  # [R, n]
    M = Q.shape[1]
    G = Y.mean(axis=0)
    member_bias = Q.mean(axis=0) - G  # [M, n]
    bias_bar = member_bias.mean(axis=0)
    dev = Q - Q.mean(axis=0)
    cov = np.einsum("ran,rbn->abn", dev, dev) / (R - 1)
    var_bar = np.einsum("aan->an", cov).mean(axis=0)
    off = ~np.eye(M, dtype=bool)
    cov_bar = cov[off].mean(axis=0) if M > 1 else None
    sigma2 = Y.var(axis=0, ddof=1)
    out = {
        "M": M,
        "bias": float(bias_bar.mean()),
        "bias2": float(np.mean(bias_bar**2)),
        "var": float(var_bar.mean()),
        "cov": float(cov_bar.mean()) if cov_bar is not None else float("nan"),
        "sigma2": float(sigma2.mean()),
    }
    c = out["cov"] if M > 1 else 0.0
    out["ge"] = out["bias2"] + out["var"] / M + (1 - 1 / M) * c + out["sigma2"]
    return out


TABLE_COLUMNS = ["config", "Bias^2", "Var", "Cov", "sigma^2", "GE"]


def measurement_table(rows: dict[str, dict]) -> str:
    """Table-shaped CSV: one row per configuration."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for name, r in rows.items():
        cov = "" if r["M"] < 2 else repr(r["cov"])
        w.writerow([name, repr(r["bias2"]), repr(r["var"]), cov, repr(r["sigma2"]), repr(r["ge"])])
    return buf.getvalue()


def average_measurements(per_env: list[dict]) -> dict:
    """Average proxy measurements over environments."""
    out = {"M": per_env[0]["M"]}
    for k in ("bias", "bias2", "var", "cov", "sigma2", "ge"):
        out[k] = float(np.mean([r[k] for r in per_env]))
    return out


# --------------------------------------------------------------------------
# reports


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["config", "component", "value", "stderr"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "value": repr(float(r["value"])), "stderr": repr(float(r["stderr"]))})
    return buf.getvalue()


def format_table(rows: list[dict]) -> str:
    lines = [f"{'config':<28}{'component':<16}{'value':>14}{'stderr':>14}"]
    for r in rows:
        lines.append(f"{r['config']:<28}{r['component']:<16}{r['value']:>14.6g}{r['stderr']:>14.3g}")
    return "\n".join(lines)
