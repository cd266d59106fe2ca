from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from renq import tensor as T
from renq.distributional import (
    NoisyLinearParams,
    NStepBuffer,
    NStepItem,
    Support,
    double_dqn_target,
    dueling_aggregate,
    greedy,
    noisy_linear_forward,
    nstep_emit,
    project_categorical,
    sample_noise,
    scalar_q,
)


def exact_projection(sup: Support, tz, probs):
    """Rational-arithmetic interpolation onto the support atoms."""
    v_min, v_max = Fraction(sup.v_min), Fraction(sup.v_max)
    delta = (v_max - v_min) / (sup.K - 1)
    out = [Fraction(0)] * sup.K
    for z, p in zip(tz, probs):
        z = min(max(Fraction(float(z)), v_min), v_max)
        p = Fraction(float(p))
        b = (z - v_min) / delta
        lo = min(int(b), sup.K - 2)  # b >= 0, so int() is floor
        frac = b - lo
        out[lo] += p * (1 - frac)
        out[lo + 1] += p * frac
    return np.array([float(v) for v in out])


def random_case(rng, sup):
    p = rng.dirichlet(np.full(sup.K, 0.3))
    r = rng.uniform(-3, 3)
    g = rng.choice([0.0, 0.5, 0.99, 1.0])
    tz = r + g * sup.atoms
    # occasionally spread atoms well past both ends of the support
    if rng.random() < 0.2:
        tz = rng.uniform(2 * sup.v_min, 2 * sup.v_max, sup.K)
    return tz, p


class TestProjection:
    def test_matches_exact_oracle_on_1000_cases(self):
        rng = np.random.default_rng(2024)
        worst = worst_mass = 0.0
        for i in range(1000):
            sup = Support(*[(-10.0, 10.0, 51), (-1.0, 3.0, 7), (0.0, 1.0, 2)][i % 3])
            tz, p = random_case(rng, sup)
            got = project_categorical(sup, tz, p)
            worst = max(worst, float(np.max(np.abs(got - exact_projection(sup, tz, p)))))
            worst_mass = max(worst_mass, abs(got.sum() - 1.0))
        assert worst <= 1e-12
        assert worst_mass <= 1e-12

    def test_identity_on_support(self):
        sup = Support()
        p = np.random.default_rng(0).dirichlet(np.ones(sup.K))
        np.testing.assert_allclose(project_categorical(sup, sup.atoms, p), p, rtol=0, atol=1e-15)

    def test_midpoint_splits_evenly(self):
        sup = Support(0.0, 2.0, 3)
        got = project_categorical(sup, np.array([0.5, 2.0, 2.0]), np.array([1.0, 0.0, 0.0]))
        np.testing.assert_array_equal(got, [0.5, 0.5, 0.0])

    def test_out_of_range_clamps(self):
        sup = Support(-1.0, 1.0, 5)
        got = project_categorical(sup, np.full(5, 7.0), np.full(5, 0.2))
        np.testing.assert_allclose(got, [0, 0, 0, 0, 1.0])

    def test_batch_rows_independent(self):
        sup = Support(-2.0, 2.0, 5)
        rng = np.random.default_rng(1)
        tz = rng.uniform(-3, 3, (4, 3, 5))
        p = rng.dirichlet(np.ones(5), (4, 3))
        got = project_categorical(sup, tz, p)
        for i in np.ndindex(4, 3):
            np.testing.assert_allclose(got[i], project_categorical(sup, tz[i], p[i]), atol=1e-15)

    def test_rejects_non_distribution(self):
        with pytest.raises(ValueError):
            project_categorical(Support(), np.zeros(51), np.full(51, 0.1))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            project_categorical(Support(), np.zeros(50), np.full(51, 1 / 51))

    @pytest.mark.parametrize("args", [(0.0, 1.0, 1), (1.0, 1.0, 5), (2.0, -1.0, 5)])
    def test_bad_support(self, args):
        with pytest.raises(ValueError):
            Support(*args)


@settings(max_examples=200, deadline=None)
@given(
    r=st.floats(-4, 4),
    g=st.floats(0, 1),
    w=arrays(np.float64, 11, elements=st.floats(0.01, 1.0)),
)
def test_projection_preserves_mass_and_mean_inside_support(r, g, w):
    # shifted atoms stay inside [-10, 10] when |r| + 5g <= 10
    sup = Support(-10.0, 10.0, 11)
    p = w / w.sum()
    tz = r + g * sup.atoms * 0.5
    out = project_categorical(sup, tz, p)
    assert abs(out.sum() - 1.0) <= 1e-12
    assert np.all(out >= 0)
    assert abs(scalar_q(sup, out) - float(p @ tz)) <= 1e-9


class TestDoubleDQNTarget:
    def test_terminal_is_point_mass_at_return(self):
        sup = Support(-2.0, 2.0, 5)
        probs = np.full((1, 2, 5), 0.2)
        tgt = double_dqn_target(sup, np.zeros((1, 2)), probs, np.array([1.0]), np.array([0.9]), np.array([True]))
        np.testing.assert_allclose(tgt[0], [0, 0, 0, 1, 0])

    def test_action_chosen_by_online_evaluated_by_target(self):
        sup = Support(-2.0, 2.0, 5)
        probs = np.zeros((1, 2, 5))
        probs[0, 0, 0] = 1.0  # target net thinks action 0 is bad
        probs[0, 1, 4] = 1.0  # and action 1 good
        online = np.array([[5.0, -5.0]])  # online picks action 0
        tgt = double_dqn_target(sup, online, probs, np.array([0.0]), np.array([1.0]), np.array([False]))
        np.testing.assert_allclose(tgt[0], [1, 0, 0, 0, 0])

    def test_greedy_ties_to_lowest(self):
        np.testing.assert_array_equal(greedy(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])), [0, 1])


class TestNStep:
    def test_hand_computed_return(self):
        R, g = nstep_emit([1.0, 0.0, 2.0], gamma=0.5, n=3)
        assert R == 1.0 + 0.25 * 2.0
        assert g == 0.125

    def test_truncated_by_terminal(self):
        buf = NStepBuffer(n=20, gamma=0.99)
        out = []
        for i, r in enumerate([1.0, 1.0, 1.0]):
            out += buf.push(NStepItem(i, 0, r, i + 1, done=(i == 2)))
        assert [t.obs for t in out] == [0, 1, 2]
        assert out[0].ret == pytest.approx(1 + 0.99 + 0.99**2, abs=1e-15)
        assert all(t.nstep_done and t.nstep_obs == 3 for t in out)
        assert len(buf) == 0

    def test_emits_after_n_steps(self):
        buf = NStepBuffer(n=3, gamma=0.9)
        emitted = [len(buf.push(NStepItem(i, 0, 0.0, i + 1, False))) for i in range(5)]
        assert emitted == [0, 0, 1, 1, 1]

    def test_state_round_trip(self):
        buf = NStepBuffer(n=4, gamma=0.9)
        for i in range(3):
            buf.push(NStepItem(i, i % 2, 0.5 * i, i + 1, False))
        other = NStepBuffer(n=4, gamma=0.9)
        other.load_state(buf.state())
        assert other.state() == buf.state()

    def test_emit_empty(self):
        with pytest.raises(RuntimeError):
            NStepBuffer().emit()


class TestNoisy:
    def test_zero_noise_is_mean_layer(self):
        rng = np.random.default_rng(0)
        p = NoisyLinearParams.init(rng, 6, 3)
        x = T.Tensor(rng.standard_normal((4, 6)))
        y = noisy_linear_forward(p, x, None).data
        np.testing.assert_allclose(y, x.data @ p.mu_w.data.T + p.mu_b.data)

    @pytest.mark.parametrize("groups", [None, 3])
    def test_factorised_forward_matches_explicit_weight(self, groups):
        rng = np.random.default_rng(5)
        p = NoisyLinearParams.init(rng, 6, 4, groups=groups)
        p.sigma_w.data[...] = rng.uniform(0, 1, p.sigma_w.shape)
        lead = () if groups is None else (groups,)
        x = T.Tensor(rng.standard_normal(lead + (5, 6)))
        noise = sample_noise(rng, p, groups)
        W = p.mu_w.data + p.sigma_w.data * noise.weight
        b = p.mu_b.data + p.sigma_b.data * noise.e_out
        ref = np.matmul(x.data, np.swapaxes(W, -1, -2)) + b[..., None, :]
        np.testing.assert_allclose(noisy_linear_forward(p, x, noise).data, ref, rtol=1e-12, atol=1e-12)

    def test_sigma_init(self):
        p = NoisyLinearParams.init(np.random.default_rng(0), 16, 2, sigma0=0.1)
        np.testing.assert_allclose(p.sigma_w.data, 0.1 / 4)

    def test_factorised_noise_statistics(self):
        # E[f(e_i) f(e_j)] = 0 for i != j and E[f(e)^2] = E|e| = sqrt(2/pi)
        p = NoisyLinearParams.init(np.random.default_rng(0), 2, 1)
        rng = np.random.default_rng(1)
        w = np.array([sample_noise(rng, p).weight[0, 0] for _ in range(20000)])
        assert abs(w.mean()) < 0.02
        assert w.var() == pytest.approx(2 / np.pi, rel=0.05)

    def test_grouped_draws_differ(self):
        p = NoisyLinearParams.init(np.random.default_rng(0), 3, 2, groups=4)
        noise = sample_noise(np.random.default_rng(2), p, groups=4)
        ew, eb = noise.weight, noise.e_out
        assert ew.shape == (4, 2, 3) and eb.shape == (4, 2)
        assert not np.allclose(ew[0], ew[1])


def test_dueling_aggregate_rows_are_distributions():
    rng = np.random.default_rng(0)
    p = dueling_aggregate(rng.standard_normal(7), rng.standard_normal((3, 7)))
    assert p.shape == (3, 7)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-15)
