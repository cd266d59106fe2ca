import hashlib

import numpy as np
import pytest

from renq import aux_tasks as X
from renq.agent import AgentConfig, EnsembleAgent, NetConfig, clip_per_member, derive_seed

OBS = (4, 16, 16)
A = 3
SMALL = NetConfig(channels=(4, 8), hidden=16, aux_hidden=16, intensity_bins=8)


def make_agent(mode="ren", M=5, assignment=None, seed=0, **kw):
    cfg = AgentConfig(mode=mode, members=M, batch=4, net=SMALL, assignment=assignment, **kw)
    return EnsembleAgent(cfg, OBS, A, seed)


def random_batch(rng, lead):
    def frames():
        return rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], lead + OBS)

    return {
        "obs": frames(), "next_obs": frames(), "nstep_obs": frames(),
        "action": rng.integers(0, A, lead), "reward": rng.choice([0.0, 1.0], lead),
        "done": np.zeros(lead, bool), "ret": rng.uniform(0, 2, lead),
        "gamma_n": np.full(lead, 0.99**20), "nstep_done": rng.random(lead) < 0.2,
    }


def q_params(agent):
    return {k: v.data.copy() for k, v in agent.online.params.items()}


def test_derive_seed_oracle():
    digest = hashlib.sha256(b"7/member/2").digest()
    assert derive_seed(7, "member", 2) == int.from_bytes(digest[:8], "little") >> 1
    assert derive_seed(7, "member", 2) != derive_seed(7, "member", 3)
    assert 0 <= derive_seed(123, "x") < 2**63


class TestEnsemble:
    def test_members_initialised_differently(self):
        ag = make_agent()
        W = ag.online.params["q.adv2.mu_w"].data
        assert not np.allclose(W[0], W[1])

    def test_member_init_depends_only_on_its_seed(self):
        a, b = make_agent(M=5), make_agent(M=2)
        for k, p in b.online.params.items():
            np.testing.assert_array_equal(p.data, a.online.params[k].data[:2])

    def test_members_learn_independently(self):
        rng = np.random.default_rng(0)
        batch = random_batch(rng, (5, 4))
        other = {k: v.copy() for k, v in batch.items()}
        other["ret"][1] += 1.0  # only member 1's samples change
        other["action"][1] = (other["action"][1] + 1) % A
        a, b = make_agent(), make_agent()
        a.learn(batch, np.ones((5, 4)))
        b.learn(other, np.ones((5, 4)))
        pa, pb = q_params(a), q_params(b)
        for k in pa:
            np.testing.assert_array_equal(pa[k][[0, 2, 3, 4]], pb[k][[0, 2, 3, 4]])
        assert not np.array_equal(pa["q.adv2.mu_w"][1], pb["q.adv2.mu_w"][1])

    def test_views_per_mode(self):
        assert make_agent("ren").n_views == 5
        assert make_agent("ren-j").n_views == 1

    def test_joint_mode_rejects_aux(self):
        with pytest.raises(ValueError):
            make_agent("ren-j", assignment=X.assign_tasks("unique", 5))

    def test_eval_action_is_noise_free_and_deterministic(self):
        ag = make_agent()
        obs = np.random.default_rng(1).choice([0.0, 0.5, 1.0], OBS)
        acts = {ag.select_action(obs, "eval") for _ in range(5)}
        assert acts == {int(np.argmax(ag.q_values(obs[None])[0]))}

    def test_target_sync_period(self):
        ag = make_agent(target_period=2)
        rng = np.random.default_rng(2)
        before = ag.target.params["q.value2.mu_w"].data.copy()
        ag.learn(random_batch(rng, (5, 4)), np.ones((5, 4)))
        np.testing.assert_array_equal(ag.target.params["q.value2.mu_w"].data, before)
        ag.learn(random_batch(rng, (5, 4)), np.ones((5, 4)))
        np.testing.assert_array_equal(ag.target.params["q.value2.mu_w"].data,
                                      ag.online.params["q.value2.mu_w"].data)

    def test_joint_loss_metrics(self):
        ag = make_agent("ren-j")
        m = ag.learn(random_batch(np.random.default_rng(3), (4,)), np.ones(4))
        assert m["loss"].shape == (1,) and m["per_sample"].shape == (4,)


def test_zero_strength_auxiliary_equals_plain_ensemble():
    """RENAULT with every alpha = 0 follows REN bit for bit on a fixed batch sequence."""
    zero = X.AuxAssignment([{t: 0.0} for t in X.TASKS], "unique")
    ren, renault = make_agent(), make_agent(assignment=zero)
    rng = np.random.default_rng(4)
    for _ in range(5):
        batch = random_batch(rng, (5, 4))
        w = rng.uniform(0.2, 1.0, (5, 4))
        m1 = ren.learn(batch, w)
        m2 = renault.learn(batch, w)
        np.testing.assert_array_equal(m1["loss"], m2["loss"])
    p1, p2 = q_params(ren), q_params(renault)
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])


class TestAuxiliary:
    def test_unique_assignment_metrics(self):
        ag = make_agent(assignment=X.assign_tasks("unique", 5))
        m = ag.learn(random_batch(np.random.default_rng(5), (5, 4)), np.ones((5, 4)))
        for i, task in enumerate(X.TASKS):
            vals = m[f"aux.{task}"]
            assert np.isfinite(vals[i]) and np.isnan(np.delete(vals, i)).all()

    def test_heads_only_touch_their_member(self):
        ag = make_agent(assignment=X.assign_tasks("unique", 5))
        for task in X.TASKS:
            mem = ag.aux.members[task]
            assert list(mem) == [X.TASKS.index(task)]
            for p in ag.aux.params[task].values():
                assert p.shape[0] == 1

    def test_all_assignment_stacks_every_member(self):
        ag = make_agent(assignment=X.assign_tasks("all", 5))
        assert all(list(ag.aux.members[t]) == list(range(5)) for t in X.TASKS)
        np.testing.assert_allclose(ag.aux.strengths(X.REWARD), 0.2)


class TestClipping:
    def test_per_member_norms(self):
        grads = {"a": np.array([[3.0, 4.0], [0.3, 0.4]]), "b": np.array([[0.0], [0.0]])}
        member_of = {"a": np.array([0, 1]), "b": np.array([0, 1])}
        out, norms = clip_per_member(grads, member_of, 2, 1.0)
        np.testing.assert_allclose(norms, [5.0, 0.5])
        np.testing.assert_allclose(out["a"], [[0.6, 0.8], [0.3, 0.4]])

    def test_heads_count_toward_owner(self):
        grads = {"q": np.ones((2, 1)), "aux": np.full((1, 1), 2.0)}
        member_of = {"q": np.array([0, 1]), "aux": np.array([1])}
        _, norms = clip_per_member(grads, member_of, 2, 100.0)
        np.testing.assert_allclose(norms, [1.0, np.sqrt(5.0)])


def test_state_round_trip():
    a = make_agent(assignment=X.assign_tasks("unique", 5))
    rng = np.random.default_rng(6)
    a.learn(random_batch(rng, (5, 4)), np.ones((5, 4)))
    b = make_agent(assignment=X.assign_tasks("unique", 5), seed=99)
    b.load_state(a.state())
    batch = random_batch(rng, (5, 4))
    m1, m2 = a.learn(batch, np.ones((5, 4))), b.learn(batch, np.ones((5, 4)))
    np.testing.assert_array_equal(m1["loss"], m2["loss"])
    for k, v in a.state().items():
        np.testing.assert_array_equal(b.state()[k], v)


@pytest.mark.parametrize("precision", ["float32", "float64"])
def test_precision_is_kept_through_updates(precision):
    net = NetConfig(channels=(4, 8), hidden=16, aux_hidden=16, intensity_bins=8, precision=precision)
    ag = EnsembleAgent(AgentConfig(members=5, batch=4, net=net, assignment=X.assign_tasks("unique", 5)), OBS, A, 0)
    m = ag.learn(random_batch(np.random.default_rng(7), (5, 4)), np.ones((5, 4)))
    assert {p.data.dtype for p in ag.params.values()} == {np.dtype(precision)}
    assert {v.dtype for v in ag.adam.m.values()} == {np.dtype(precision)}
    assert m["loss"].dtype == np.dtype(precision)
