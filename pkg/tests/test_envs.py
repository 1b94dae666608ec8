import numpy as np
import pytest

from interpole import UnknownEnvironment, belief_trajectory, belief_update, generate_dataset, \
    make_adni_like, make_bias, make_decision_tree_example, make_diag, make_env
from interpole.envs import A_EQ, A_NEG, A_POS, S_NEG, S_POS, Z_NEG, EnvironmentSpec, adni_observation_index
from interpole.policy import boundary_crossing_1d


def test_diag_parameters():
    env = make_diag()
    p = env.true_params
    np.testing.assert_array_equal(p.transition, np.repeat(np.eye(2)[:, None, :], 3, axis=1))
    assert p.observation[A_EQ, S_POS, Z_NEG] == 0.4
    assert p.observation[A_EQ, S_NEG, 1] == 0.4
    assert p.initial[S_POS] == 0.5
    assert env.agent_params is p or np.array_equal(env.agent_params.observation, p.observation)
    assert env.behavior.eta == 10.0
    assert env.stop_actions == {A_NEG, A_POS}
    assert env.max_horizon == 50
    assert boundary_crossing_1d(env.behavior, A_EQ, A_POS, state=S_POS) == pytest.approx(0.9)


def test_bias_parameters():
    env = make_bias()
    assert env.agent_params.observation[A_EQ, S_POS, Z_NEG] == pytest.approx(0.2)
    assert env.true_params.observation[A_EQ, S_POS, Z_NEG] == pytest.approx(0.4)
    b_agent = b_true = np.array([0.5, 0.5])
    for _ in range(2):
        b_agent = belief_update(b_agent, A_EQ, Z_NEG, env.agent_params)
        b_true = belief_update(b_true, A_EQ, Z_NEG, env.true_params)
    assert b_agent[S_POS] == pytest.approx(0.10)
    assert b_true[S_POS] == pytest.approx(0.16 / 0.52)


def test_adni_like_structure():
    env = make_adni_like(3)
    p = env.true_params
    assert (p.n_states, p.n_actions, p.n_observations) == (3, 2, 12)
    assert env.behavior.eta == 1.0 and not env.stop_actions and env.max_horizon == 6
    no_mri = [adni_observation_index(0, c) for c in range(3)]
    np.testing.assert_allclose(p.observation[0][:, no_mri].sum(axis=1), 1.0)
    # progression only: no transitions back to a milder state
    assert np.all(np.tril(p.transition[:, 0, :], -1) == 0)
    again = make_adni_like(3).true_params
    np.testing.assert_array_equal(again.transition, p.transition)
    assert not np.array_equal(make_adni_like(4).true_params.transition, p.transition)


def test_tree():
    env = make_decision_tree_example(prevalence=0.3)
    p = env.true_params
    assert p.initial[0] == 1.0
    # risk after the disease test, before the outcome is seen
    b = belief_update(p.initial, 0, 0, p, observed=False)
    assert b[2] == pytest.approx(0.3)
    assert set(np.flatnonzero(b)) == {1, 2}
    # observing "pos" leaves only disease
    b = belief_update(p.initial, 0, 1, p)
    np.testing.assert_allclose(b, np.eye(5)[2])
    assert np.all((p.observation == 0) | (p.observation == 1))


def test_make_env():
    assert make_env("diag").name == "diag"
    with pytest.raises(UnknownEnvironment):
        make_env("nope")


def test_generate_rejects_empty():
    with pytest.raises(ValueError):
        generate_dataset(make_diag(), 0)


def test_generation_reproducible():
    a, ta = generate_dataset(make_diag(), 100, seed=5)
    b, tb = generate_dataset(make_diag(), 100, seed=5)
    assert [len(t) for t in a.trajectories] == [len(t) for t in b.trajectories]
    assert np.mean([len(t) for t in a.trajectories]) == np.mean([len(t) for t in b.trajectories])
    for x, y in zip(ta.records, tb.records):
        np.testing.assert_array_equal(x.beliefs, y.beliefs)


def test_diag_positive_patients_are_declared_positive():
    ds, truth = generate_dataset(make_diag(), 600, seed=1000)
    ends = [(tr.actions[-1], rec.states[0]) for tr, rec in zip(ds.trajectories, truth.records)]
    pos = [a for a, s in ends if s == S_POS]
    assert np.mean(np.array(pos) == A_POS) > 0.8


@pytest.mark.parametrize("make", [make_diag, make_bias, lambda: make_adni_like(0),
                                  make_decision_tree_example])
def test_trajectories_end_properly(make):
    env = make()
    ds, truth = generate_dataset(env, 80, seed=7)
    for tr, rec in zip(ds.trajectories, truth.records):
        assert len(tr) <= env.max_horizon
        assert tr.terminal == (tr.actions[-1] in env.stop_actions)
        if not tr.terminal:
            assert len(tr) == env.max_horizon
        assert not np.any(np.isin(tr.actions[:-1], list(env.stop_actions)))
        assert rec.beliefs.shape == (len(tr) + 1, env.true_params.n_states)
        np.testing.assert_allclose(rec.action_probs.sum(axis=1), 1.0)


def test_unbiased_truth_is_exact_filtering():
    env = make_diag()
    ds, truth = generate_dataset(env, 50, seed=3)
    for tr, rec in zip(ds.trajectories, truth.records):
        beliefs, _ = belief_trajectory(tr, env.true_params)
        np.testing.assert_allclose(rec.beliefs, beliefs, atol=1e-14)


def test_bias_truth_differs_after_negative():
    env = make_bias()
    ds, truth = generate_dataset(env, 100, seed=3)
    for tr, rec in zip(ds.trajectories, truth.records):
        filt, _ = belief_trajectory(tr, env.true_params)
        seen = (tr.actions == A_EQ) & (tr.observations == Z_NEG) & tr.observed
        if seen.any():
            k = int(np.argmax(seen)) + 1
            assert not np.allclose(rec.beliefs[k], filt[k])


def test_env_validation_and_roundtrip():
    env = make_bias()
    back = EnvironmentSpec.from_dict(env.to_dict())
    np.testing.assert_array_equal(back.agent_params.observation, env.agent_params.observation)
    assert back.stop_actions == env.stop_actions and back.test_action == env.test_action
    with pytest.raises(ValueError):
        EnvironmentSpec(env.true_params, env.agent_params, env.behavior, max_horizon=0)
    with pytest.raises(ValueError):
        EnvironmentSpec(env.true_params, env.agent_params, env.behavior, frozenset({7}))
