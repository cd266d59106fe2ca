import math

import numpy as np
import pytest
from scipy import integrate, stats

from renq import aux_tasks as X

FRAMES = 1000


def moment_oracle(s):
    """Direct enumeration over channels and pixels."""
    C, H, W = s.shape
    total = 0.0
    for c in range(C):
        for y in range(H):
            for x in range(W):
                total += s[c, y, x] * math.sqrt(x * x + y * y)
    return total / C


def normalizer_oracle(H, W):
    return float(sum(x * x + y * y for y in range(H) for x in range(W)))


@pytest.fixture(scope="module")
def frame_pairs():
    rng = np.random.default_rng(11)
    shapes = [(4, 16, 16), (1, 5, 7), (2, 3, 3)]
    out = []
    for i in range(FRAMES):
        C, H, W = shapes[i % 3]
        out.append((rng.choice([0, 0.25, 0.5, 0.75, 1.0], (C, H, W)), rng.uniform(0, 1, (C, H, W))))
    return out


class TestTargets:
    def test_moment(self, frame_pairs):
        worst = max(abs(X.moment(s) - moment_oracle(s)) / max(1.0, abs(moment_oracle(s))) for s, _ in frame_pairs)
        assert worst <= 1e-12

    def test_moment_change(self, frame_pairs):
        worst = 0.0
        for s, s1 in frame_pairs:
            ref = (moment_oracle(s1) - moment_oracle(s)) / normalizer_oracle(*s.shape[1:])
            worst = max(worst, abs(float(X.moment_change_target(s, s1)) - ref))
        assert worst <= 1e-12

    def test_intensity_change_matches_norm(self, frame_pairs):
        worst = 0.0
        for s, s1 in frame_pairs:
            ref = np.linalg.norm(s.mean(axis=0) - s1.mean(axis=0), ord="fro")
            worst = max(worst, abs(float(X.intensity_change_target(s, s1)) - ref))
        assert worst <= 1e-12

    def test_batched_targets(self, frame_pairs):
        s = np.stack([p[0] for p in frame_pairs[::3][:10]])
        s1 = np.stack([p[1] for p in frame_pairs[::3][:10]])
        np.testing.assert_allclose(X.moment_change_target(s, s1),
                                   [X.moment_change_target(a, b) for a, b in zip(s, s1)], atol=1e-15)

    def test_moment_of_origin_pixel_is_zero(self):
        s = np.zeros((1, 4, 4))
        s[0, 0, 0] = 1.0
        assert X.moment(s) == 0.0


def quadrature_histogram(val, ht):
    """Bin masses of N(clip(val), sigma^2) restricted to [lo, hi], by numerical integration."""
    v = min(max(val, ht.lo), ht.hi)
    pdf = stats.norm(v, ht.sigma).pdf
    edges = ht.edges
    mass = np.array([integrate.quad(pdf, edges[k], edges[k + 1], epsabs=1e-14, epsrel=1e-13)[0]
                     for k in range(ht.K)])
    return mass / mass.sum()


class TestHistogram:
    @pytest.mark.parametrize("ht", [X.reward_histogram(), X.intensity_histogram(16, 16),
                                    X.HistogramTarget(-2.0, 5.0, 9, 0.7)], ids=["reward", "intensity", "wide"])
    def test_matches_quadrature(self, ht):
        rng = np.random.default_rng(3)
        vals = np.concatenate([rng.uniform(ht.lo, ht.hi, 40), [ht.lo, ht.hi, ht.lo - 1, ht.hi + 3]])
        got, clamped = X.histogram_target(vals, ht)
        for v, row in zip(vals, got):
            np.testing.assert_allclose(row, quadrature_histogram(v, ht), rtol=0, atol=1e-9)
        np.testing.assert_array_equal(clamped, (vals < ht.lo) | (vals > ht.hi))

    def test_tiny_sigma_is_one_hot(self):
        ht = X.HistogramTarget(0.0, 1.0, 4, 1e-300)
        got, _ = X.histogram_target(np.array([0.6]), ht)
        np.testing.assert_array_equal(got[0], [0, 0, 1, 0])

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            X.histogram_target(0.0, X.HistogramTarget(0.0, 1.0, 3, 0.0))

    def test_intensity_histogram_ratio(self):
        ht = X.intensity_histogram(16, 16, K=84, ratio=0.5)
        assert ht.hi == 16.0 and ht.sigma == pytest.approx(0.5 * ht.width)


class TestAssignment:
    def test_unique_gives_one_task_each(self):
        a = X.assign_tasks("unique", 5)
        assert [list(t) for t in a.tasks] == [[t] for t in X.TASKS]

    def test_unique_needs_five_members(self):
        with pytest.raises(ValueError, match="M == 5"):
            X.assign_tasks("unique", 3)

    def test_all_shares_strength(self):
        a = X.assign_tasks("all", 2)
        assert all(v == pytest.approx(0.2) for ts in a.tasks for v in ts.values())
        assert a.used_tasks() == list(X.TASKS)

    def test_custom(self):
        a = X.assign_tasks("custom", 2, strengths=[{"reward": 0.5}, {}])
        assert a.members_for("reward") == [0]

    @pytest.mark.parametrize("bad", [[{"bogus": 1.0}], [{"reward": -1.0}]])
    def test_custom_rejects(self, bad):
        with pytest.raises(ValueError):
            X.assign_tasks("custom", 1, strengths=bad)

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            X.assign_tasks("round-robin", 5)


def test_action_plane_scaling():
    plane = X.action_plane(np.array([[0, 3]]), 4, 2, 2)
    assert plane.shape == (1, 2, 1, 2, 2)
    assert plane[0, 1].max() == 1.0 and plane[0, 0].max() == 0.0
