import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from interpole import Dataset, IohmmParams, Spaces, Trajectory, ZeroLikelihood, belief_trajectory, \
    belief_update, make_bias, make_decision_tree_example, make_diag, sample_step
from interpole.envs import A_EQ, S_POS, Z_NEG
from interpole.iohmm import observation_probabilities

from oracles import random_params


def test_diag_single_update():
    b = belief_update([0.5, 0.5], A_EQ, Z_NEG, make_diag().true_params)
    np.testing.assert_allclose(b, [0.6, 0.4], atol=1e-12)


def test_uniform_observation_leaves_belief():
    T = np.repeat(np.eye(3)[:, None, :], 2, axis=1)
    O = np.full((2, 3, 4), 0.25)
    p = IohmmParams(T, O, [0.2, 0.3, 0.5])
    for b in ([0.2, 0.3, 0.5], [1, 0, 0], [0.1, 0.1, 0.8]):
        np.testing.assert_allclose(belief_update(b, 1, 3, p), b, atol=1e-15)


def test_bias_agent_two_negatives():
    agent = make_bias().agent_params
    b = belief_update([0.5, 0.5], A_EQ, Z_NEG, agent)
    assert b[S_POS] == pytest.approx(0.25, abs=1e-12)
    b = belief_update(b, A_EQ, Z_NEG, agent)
    assert b[S_POS] == pytest.approx(0.10, abs=1e-12)


def test_diag_trajectory():
    traj = Trajectory([[A_EQ, Z_NEG], [A_EQ, Z_NEG]])
    beliefs, incs = belief_trajectory(traj, make_diag().true_params)
    np.testing.assert_allclose(beliefs[:, S_POS], [0.5, 0.4, 0.16 / 0.52], atol=1e-12)
    # Pr(z-) = 0.5 then 0.6*0.6 + 0.4*0.4
    np.testing.assert_allclose(incs, np.log([0.5, 0.52]), atol=1e-12)
    assert beliefs[2, S_POS] == pytest.approx(0.3077, abs=5e-5)


def test_first_belief_is_initial():
    p = random_params(np.random.default_rng(0), 3, 2, 2)
    beliefs, _ = belief_trajectory(Trajectory([[0, 1]]), p)
    np.testing.assert_array_equal(beliefs[0], p.initial)


def test_tree_support_after_disease_test():
    env = make_decision_tree_example()
    b = belief_update(env.true_params.initial, 0, 0, env.true_params, observed=False)
    assert set(np.flatnonzero(b > 0)) == {1, 2}


def test_zero_likelihood():
    p = make_decision_tree_example().true_params
    with pytest.raises(ZeroLikelihood):
        belief_update(np.eye(5)[1], 0, 1, p)   # healthy patient cannot test positive
    with pytest.raises(ZeroLikelihood) as info:
        belief_trajectory(Trajectory([[0, 0], [0, 1]]), p)
    assert info.value.step == 1


def test_terminal_step_ignores_observation():
    p = make_diag().true_params
    beliefs, incs = belief_trajectory(Trajectory([[0, 0], [1, 1]], terminal=True), p)
    np.testing.assert_allclose(beliefs[2], beliefs[1])
    assert incs[1] == 0.0


def test_sample_step_deterministic_transition():
    p = make_diag().true_params
    rng = np.random.default_rng(3)
    for s in (0, 1):
        for _ in range(50):
            assert sample_step(s, A_EQ, p, rng)[0] == s


def test_sample_step_frequency():
    p = make_diag().true_params
    rng = np.random.default_rng(11)
    zs = np.array([sample_step(S_POS, A_EQ, p, rng)[1] for _ in range(100_000)])
    assert abs(np.mean(zs == Z_NEG) - 0.4) < 0.01


def test_sample_step_reproducible():
    p = random_params(np.random.default_rng(1), 3, 2, 3)
    a = [sample_step(0, 1, p, np.random.default_rng(5)) for _ in range(3)]
    assert a[0] == a[1] == a[2]
    with pytest.raises(IndexError):
        sample_step(3, 0, p, np.random.default_rng(0))


def test_single_state():
    p = IohmmParams(np.ones((1, 2, 1)), np.ones((2, 1, 1)), [1.0])
    assert belief_update([1.0], 1, 0, p).tolist() == [1.0]


@pytest.mark.parametrize("bad", [
    dict(transition=np.full((2, 1, 2), 0.6)),
    dict(observation=np.full((1, 2, 2), -0.1)),
    dict(initial=[0.7, 0.7]),
    dict(transition=np.ones((2, 1, 3)) / 3),
])
def test_param_validation(bad):
    kw = dict(transition=np.full((2, 1, 2), 0.5), observation=np.full((1, 2, 2), 0.5),
              initial=[0.5, 0.5])
    kw.update(bad)
    with pytest.raises(ValueError):
        IohmmParams(**kw)


def test_dataset_validation():
    sp = Spaces(2, 3, 2)
    with pytest.raises(ValueError):
        Dataset(sp, ())
    with pytest.raises(ValueError):
        Dataset(sp, (Trajectory([[3, 0]]),))
    with pytest.raises(ValueError):
        Dataset(sp, (Trajectory([[0, 2]]),))
    with pytest.raises(ValueError):
        Trajectory(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        Spaces(2, 2, 2, state_labels=("x", "x"))


def test_params_roundtrip():
    p = make_decision_tree_example().true_params
    doc = json.loads(json.dumps(p.to_dict()))
    q = IohmmParams.from_dict(doc)
    np.testing.assert_array_equal(q.transition, p.transition)
    np.testing.assert_array_equal(q.observation, p.observation)
    assert q.spaces == p.spaces
    assert doc["labels"]["states"][0] == "ini"
    assert np.array(doc["transition"]).shape == (5, 5, 5)


@st.composite
def instances(draw):
    S = draw(st.integers(1, 4))
    A = draw(st.integers(1, 3))
    Z = draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    p = random_params(rng, S, A, Z, low=0.0)
    b = rng.dirichlet(np.ones(S))
    return p, b, int(rng.integers(A))


@given(instances(), st.integers(0, 3))
def test_update_stays_on_simplex(inst, z):
    p, b, a = inst
    z = z % p.n_observations
    try:
        out = belief_update(b, a, z, p)
    except ZeroLikelihood:
        return
    assert np.all(out >= 0)
    assert abs(out.sum() - 1) < 1e-9


@given(instances())
def test_martingale(inst):
    p, b, a = inst
    probs = observation_probabilities(b, a, p)
    total = np.zeros(p.n_states)
    for z, pz in enumerate(probs):
        if pz > 1e-300:
            total += pz * belief_update(b, a, z, p)
    np.testing.assert_allclose(total, b @ p.transition[:, a, :], atol=1e-10)


@given(st.integers(0, 2**31), hnp.arrays(np.int64, st.integers(1, 8), elements=st.integers(0, 5)))
def test_trajectory_is_a_fold(seed, raw):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 3, 2, 3)
    steps = np.stack([raw % 2, raw % 3], axis=1)
    beliefs, _ = belief_trajectory(Trajectory(steps), p)
    b = p.initial
    for t, (a, z) in enumerate(steps):
        b = belief_update(b, a, z, p)
        np.testing.assert_array_equal(beliefs[t + 1], b)
