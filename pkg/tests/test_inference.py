import numpy as np
import pytest
from hypothesis import given, strategies as st

from interpole import Dataset, IohmmParams, Spaces, Trajectory, ZeroLikelihood, belief_trajectory, \
    e_step, posteriors
from interpole.inference import backward_messages, forward_messages, messages, observation_loglik, \
    state_marginals, transition_marginals

import oracles


def _instance(seed, S=2, A=2, Z=2, tau=2, terminal=None):
    rng = np.random.default_rng(seed)
    return oracles.random_params(rng, S, A, Z), oracles.random_trajectory(rng, A, Z, tau, terminal)


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_enumeration(seed, backend):
    p, tr = _instance(seed)
    msgs = forward_messages(tr, p, backend)
    np.testing.assert_allclose(msgs.alpha, oracles.beliefs(tr, p), atol=1e-12)
    np.testing.assert_array_equal(msgs.alpha[0], p.initial)
    assert msgs.log_likelihood == pytest.approx(oracles.observation_loglik(tr, p), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_enumeration(seed, backend):
    p, tr = _instance(seed)
    beta = backward_messages(tr, p, backend)
    np.testing.assert_allclose(beta[-1], 1.0)
    ref = oracles.backward(tr, p)
    np.testing.assert_allclose(beta[:-1] / beta[:-1].sum(axis=1, keepdims=True), ref[:-1], atol=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_posteriors_match_enumeration(seed, backend):
    rng = np.random.default_rng(seed)
    S = int(rng.integers(2, 4))
    p, tr = _instance(seed, S=S, A=3, Z=2, tau=int(rng.integers(1, 5)))
    post = posteriors(tr, p, backend)
    gamma, xi = oracles.posteriors(tr, p)
    np.testing.assert_allclose(post.gamma, gamma, atol=1e-12)
    np.testing.assert_allclose(post.xi, xi, atol=1e-12)


def test_batch_matches_single(backend):
    rng = np.random.default_rng(4)
    p = oracles.random_params(rng, 3, 2, 3)
    trajs = [oracles.random_trajectory(rng, 2, 3, int(k)) for k in rng.integers(1, 7, size=6)]
    ds = Dataset(Spaces(3, 2, 3), tuple(trajs))
    batch = e_step(ds, p, backend)
    ll = observation_loglik(ds, p, backend)
    for i, tr in enumerate(trajs):
        one = batch.trajectory(i, len(tr))
        ref = posteriors(tr, p, backend)
        np.testing.assert_allclose(one.gamma, ref.gamma, atol=1e-14)
        np.testing.assert_allclose(one.xi, ref.xi, atol=1e-14)
        assert ll[i] == pytest.approx(oracles.observation_loglik(tr, p), abs=1e-12)


def test_uninformative_observations():
    T = np.repeat(np.eye(2)[:, None, :], 2, axis=1)
    p = IohmmParams(T, np.full((2, 2, 3), 1 / 3), [0.3, 0.7])
    tr = Trajectory([[0, 1], [1, 2], [0, 0]])
    msgs = messages(tr, p)
    np.testing.assert_allclose(msgs.alpha, np.tile([0.3, 0.7], (4, 1)), atol=1e-15)
    np.testing.assert_allclose(msgs.beta / msgs.beta[:, :1], 1.0, atol=1e-15)
    np.testing.assert_allclose(state_marginals(msgs)[-1], msgs.alpha[-1])


def test_deterministic_path():
    S = 3
    T = np.zeros((S, 1, S))
    for s in range(S):
        T[s, 0, (s + 1) % S] = 1.0
    p = IohmmParams(T, np.full((1, S, 2), 0.5), [0, 1, 0])
    post = posteriors(Trajectory([[0, 0]] * 4), p)
    np.testing.assert_array_equal(post.gamma.argmax(axis=1), [1, 2, 0, 1, 2])
    np.testing.assert_allclose(post.gamma.max(axis=1), 1.0)


def test_zero_likelihood_reports_step(backend):
    T = np.repeat(np.eye(2)[:, None, :], 1, axis=1)
    O = np.array([[[1.0, 0.0], [1.0, 0.0]]])
    p = IohmmParams(T, O, [0.5, 0.5])
    with pytest.raises(ZeroLikelihood) as info:
        forward_messages(Trajectory([[0, 0], [0, 1]]), p, backend)
    assert info.value.step == 1


def test_long_trajectory_no_underflow(backend):
    rng = np.random.default_rng(0)
    p = oracles.random_params(rng, 3, 2, 4)
    tr = oracles.random_trajectory(rng, 2, 4, 800, terminal=False)
    msgs = forward_messages(tr, p, backend)
    assert np.isfinite(msgs.log_likelihood) and msgs.log_likelihood < -500
    post = posteriors(tr, p, backend)
    assert np.all(np.isfinite(post.gamma))


@given(st.integers(0, 2**31), st.integers(1, 8), st.integers(1, 4), st.booleans())
def test_marginal_identities(seed, tau, S, terminal):
    p, tr = _instance(seed, S=S, A=2, Z=3, tau=tau, terminal=terminal)
    post = posteriors(tr, p)
    np.testing.assert_allclose(post.xi.sum(axis=2), post.gamma[:-1], atol=1e-10)
    np.testing.assert_allclose(post.xi.sum(axis=1), post.gamma[1:], atol=1e-10)
    np.testing.assert_allclose(post.gamma.sum(axis=1), 1.0, atol=1e-10)
    assert np.all(post.xi >= 0)


@given(st.integers(0, 2**31), st.integers(1, 10), st.booleans())
def test_loglik_two_routes(seed, tau, terminal):
    p, tr = _instance(seed, S=3, A=2, Z=3, tau=tau, terminal=terminal)
    _, incs = belief_trajectory(tr, p)
    assert forward_messages(tr, p).log_likelihood == pytest.approx(incs.sum(), abs=1e-10)


def test_transition_marginals_direct():
    p, tr = _instance(9, S=3, A=2, Z=2, tau=3)
    msgs = messages(tr, p)
    np.testing.assert_allclose(transition_marginals(msgs, tr, p), oracles.posteriors(tr, p)[1], atol=1e-12)
