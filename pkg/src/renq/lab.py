"""Numeric checks of the ensemble bias / variance / covariance results on synthetic tasks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bvc
from .agent import derive_seed

SUITES = ("thm1", "thm2", "thm3", "prop1", "prop2")


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.suite}: {self.name}  {self.detail}"


class Lab:
    """Lazily built trial grids shared by every suite of one invocation."""

    def __init__(self, seed: int = 1, D: int = 100, S: int = 100, M: int = 5, n_test: int = 100,
                 tasks=None):
        self.seed, self.D, self.S, self.M, self.n_test = seed, D, S, M, n_test
        self.tasks = list(tasks or bvc.TASKS)
        self._grids: dict[str, bvc.TrialGrid] = {}
        self._reports: dict[tuple[str, int], bvc.BvcReport] = {}

    def grid(self, task: str) -> bvc.TrialGrid:
        if task not in self._grids:
            learner = bvc.DEFAULT_LEARNERS[task]()
            self._grids[task] = bvc.run_trials(learner, bvc.TASKS[task], self.D, self.S, self.n_test, self.seed)
        return self._grids[task]

    def report(self, task: str, M: int) -> bvc.BvcReport:
        key = (task, M)
        if key not in self._reports:
            g = self.grid(task)
            self._reports[key] = bvc.estimate_single_bvc(g) if M == 1 else bvc.estimate_ensemble_bvc(g, M)
        return self._reports[key]

    def run(self, suite: str) -> list[Check]:
        if suite == "all":
            return [c for s in SUITES for c in self.run(s)]
        if suite not in SUITES:
            raise KeyError(f"unknown suite {suite!r}; available: {', '.join(SUITES + ('all',))}")
        return getattr(self, "_" + suite)()

    def table_rows(self) -> list[dict]:
        rows = []
        for (task, M), rep in sorted(self._reports.items()):
            rows += rep.rows(f"{task}/M={M}")
        return rows

    # --------------------------------------------------------------- suites

    def _identity(self, suite: str, M: int) -> list[Check]:
        out = []
        for task in self.tasks:
            gap, se = bvc.identity_gap(self.report(task, M))
            out.append(Check(suite, f"{task} M={M} direct vs decomposed", gap <= 3 * se,
                             f"|gap|={gap:.3g} <= 3*SE={3 * se:.3g}"))
        return out

    def _thm1(self):
        return self._identity("thm1", 1)

    def _thm2(self):
        return self._identity("thm2", self.M)

    def _thm3(self):
        out = []
        for task in self.tasks:
            chk = bvc.check_inequalities(self.report(task, self.M), k=2.0)
            out.append(Check("thm3", f"{task} Cov <= Var", chk.cov_le_var,
                             f"Cov-Var={chk.cov_minus_var:.3g} <= {chk.slack_cov:.3g}"))
            out.append(Check("thm3", f"{task} GE(ens) <= GE(single)", chk.ens_le_single,
                             f"diff={chk.ens_minus_single:.3g} <= {chk.slack_ge:.3g}"))
            rep = self._identical_members(task)
            dcv = abs(rep.cov - rep.var)
            dge = abs(rep.ge_decomposed - rep.ge_single)
            out.append(Check("thm3", f"{task} equality case (identical members)", max(dcv, dge) <= 1e-12,
                             f"|Cov-Var|={dcv:.2g} |GE(ens)-GE(single)|={dge:.2g}"))
        return out

    def _identical_members(self, task: str) -> bvc.BvcReport:
        # every member reuses seed slot 0: identical predictors on each dataset
        g = self.grid(task)
        members = np.broadcast_to(g.preds[None, :, :1], (self.M, self.D, 1, g.preds.shape[2]))
        return bvc.estimate_ensemble_from_members(np.ascontiguousarray(members), g.f_test,
                                                  g.y_noisy[:, :1], g.sigma2)

    def _prop1(self):
        rng = np.random.default_rng(derive_seed(self.seed, "prop1"))
        worst = 0.0
        for _ in range(1000):
            M = int(rng.integers(1, 12))
            b = rng.standard_normal((M, int(rng.integers(1, 20)))) * rng.uniform(0.01, 10)
            sq, expansion, _ = bvc.decompose_bias_cobias(b)
            worst = max(worst, float(np.max(np.abs(sq - expansion))))
        out = [Check("prop1", "random bias vectors (1000)", worst <= 1e-12, f"max err={worst:.2g}")]
        for task in self.tasks:
            mb = self.report(task, self.M).per_point["member_bias"]
            sq, expansion, _ = bvc.decompose_bias_cobias(mb)
            err = float(np.max(np.abs(sq - expansion)))
            out.append(Check("prop1", f"{task} measured member biases", err <= 1e-12, f"max err={err:.2g}"))
        return out

    def _prop2(self):
        out = []
        for task in self.tasks:
            members = bvc.ensemble_members(self.grid(task), self.M)
            c, d, se = bvc.covariance_via_conditional_means(members, 0, 1)
            out.append(Check("prop2", f"{task} conditional-mean vs direct covariance", abs(c - d) <= 3 * se,
                             f"cond={c:.5g} direct={d:.5g} |diff|={abs(c - d):.3g} <= {3 * se:.3g}"))
            rep = self._identical_members(task)
            out.append(Check("prop2", f"{task} shared-seed members", rep.cov == rep.var,
                             f"Cov={rep.cov:.6g} Var={rep.var:.6g}"))
        return out
