import numpy as np
import pytest
from hypothesis import given, strategies as st

from interpole import BoundaryPolicy, Dataset, IohmmParams, NonFiniteValue, Spaces, ThetaEstimate, \
    Trajectory, e_step, expected_log_likelihood, grad_Q
from interpole.gradient import belief_jacobians, chain_jacobian, grad_Q_unrolled, parse_blocks
from interpole.iohmm import belief_trajectory

import oracles


def _problem(seed, S=3, A=3, Z=2, n=3, max_tau=5, frozen=()):
    rng = np.random.default_rng(seed)
    theta = oracles.random_theta(rng, S, A, Z, frozen)
    trajs = tuple(oracles.random_trajectory(rng, A, Z, int(rng.integers(1, max_tau + 1))) for _ in range(n))
    ds = Dataset(Spaces(S, A, Z), trajs)
    hat = oracles.random_theta(rng, S, A, Z)
    return theta, hat, ds, rng


@pytest.mark.parametrize("seed", range(4))
def test_q_matches_enumeration(seed, backend):
    theta, hat, ds, _ = _problem(seed, S=2, max_tau=3)
    post = e_step(ds, hat, backend)
    got = expected_log_likelihood(theta, post, ds, backend)
    assert got == pytest.approx(oracles.q_value(ds.trajectories, theta, hat), abs=1e-10)


def test_q_deterministic_uniform_policy():
    T = np.repeat(np.eye(2)[:, None, :], 3, axis=1)
    O = np.zeros((3, 2, 2))
    O[:, 0, 0] = O[:, 1, 1] = 1.0
    theta = ThetaEstimate(IohmmParams(T, O, [1, 0]), BoundaryPolicy(0.0, np.full((3, 2), 0.5)))
    ds = Dataset(Spaces(2, 3, 2), (Trajectory([[0, 0], [2, 0], [1, 0], [1, 0]]),))
    post = e_step(ds, theta)
    assert expected_log_likelihood(theta, post, ds) == pytest.approx(4 * np.log(1 / 3), abs=1e-12)


def test_q_positive_weight_on_zero_parameter():
    theta, hat, ds, _ = _problem(1)
    post = e_step(ds, hat)
    O = np.array(theta.params.observation)
    a, z = ds.trajectories[0].steps[0]
    O[a, 0, z] = 0.0
    O[a] /= O[a].sum(axis=1, keepdims=True)
    bad = theta.replace(params=theta.params.replace(observation=O))
    with pytest.raises(NonFiniteValue):
        expected_log_likelihood(bad, post, ds)


@pytest.mark.parametrize("seed", range(6))
def test_gradient_matches_finite_differences(seed, backend):
    theta, hat, ds, rng = _problem(seed)
    post = e_step(ds, hat, backend)
    bad = [(name, a, n) for name, a, n in oracles.fd_gradient_check(theta, ds, post, rng, backend)
           if not oracles.fd_agrees(a, n)]
    assert not bad, bad[:5]


@pytest.mark.parametrize("seed", range(4))
def test_terminal_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    theta = oracles.random_theta(rng, 2, 3, 2)
    trajs = tuple(oracles.random_trajectory(rng, 3, 2, 4, terminal=True) for _ in range(3))
    ds = Dataset(Spaces(2, 3, 2), trajs)
    post = e_step(ds, oracles.random_theta(rng, 2, 3, 2))
    checks = oracles.fd_gradient_check(theta, ds, post, rng)
    assert all(oracles.fd_agrees(a, n) for _, a, n in checks)


@pytest.mark.parametrize("seed", range(5))
def test_reverse_pass_matches_unrolled_products(seed, backend):
    theta, hat, ds, _ = _problem(seed, n=4, max_tau=6)
    post = e_step(ds, hat, backend)
    fast = grad_Q(theta, post, ds, backend)
    slow = grad_Q_unrolled(theta, post, ds)
    for name in ("T", "O", "b1", "means"):
        np.testing.assert_allclose(fast.block(name), slow.block(name), rtol=1e-10, atol=1e-10)
    assert fast.d_eta == pytest.approx(slow.d_eta, rel=1e-10, abs=1e-10)


def test_frozen_blocks_are_zero():
    theta, hat, ds, _ = _problem(2, frozen=("T", "eta"))
    g = grad_Q(theta, e_step(ds, hat), ds)
    assert not np.any(g.d_transition) and g.d_eta == 0.0
    assert np.any(g.d_observation)


def test_zero_eta_means_gradient():
    theta, hat, ds, _ = _problem(3)
    theta = theta.replace(policy=theta.policy.replace(eta=0.0))
    g = grad_Q(theta, e_step(ds, hat), ds)
    assert not np.any(g.d_means)


def test_eta_gradient_sign_when_all_actions_nearest():
    # every action is a= and a= is nearest everywhere, so sharpening helps
    T = np.repeat(np.eye(2)[:, None, :], 3, axis=1)
    O = np.full((3, 2, 2), 0.5)
    O[0] = [[0.6, 0.4], [0.4, 0.6]]
    pol = BoundaryPolicy(10.0, [[0.5, 0.5], [1.3, -0.3], [-0.3, 1.3]])
    theta = ThetaEstimate(IohmmParams(T, O, [0.5, 0.5]), pol)
    ds = Dataset(Spaces(2, 3, 2), (Trajectory([[0, 0], [0, 1], [0, 1]]),))
    post = e_step(ds, theta)
    g = grad_Q(theta, post, ds)
    beliefs, _ = belief_trajectory(ds.trajectories[0], theta.params)
    expected = 0.0
    for b in beliefs[:-1]:
        d = ((b - pol.means) ** 2).sum(axis=1)
        pi = np.exp(-10 * d) / np.exp(-10 * d).sum()
        expected += sum(pi[a] * (d[a] - d[0]) for a in (1, 2))
    assert g.d_eta == pytest.approx(expected, rel=1e-10)
    assert g.d_eta > 0


def test_tangent_projection_sums_to_zero():
    theta, hat, ds, _ = _problem(4)
    g = grad_Q(theta, e_step(ds, hat), ds).tangent()
    for name in ("T", "O", "b1", "means"):
        np.testing.assert_allclose(g.block(name).sum(axis=-1), 0.0, atol=1e-10)


def test_jacobian_identity_case():
    T = np.repeat(np.eye(3)[:, None, :], 1, axis=1)
    p = IohmmParams(T, np.full((1, 3, 2), 0.5), [0.2, 0.3, 0.5])
    tr = Trajectory([[0, 1], [0, 0]])
    beliefs, _ = belief_trajectory(tr, p)
    jac = belief_jacobians(beliefs, tr, p)
    v = np.array([0.1, -0.3, 0.2])
    np.testing.assert_allclose(jac[0] @ v, v, atol=1e-14)
    np.testing.assert_array_equal(chain_jacobian(jac, 1, 1), np.eye(3))


@given(st.integers(0, 2**31))
def test_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = oracles.random_params(rng, 3, 2, 2)
    tr = oracles.random_trajectory(rng, 2, 2, 3, terminal=False)
    beliefs, _ = belief_trajectory(tr, p)
    jac = belief_jacobians(beliefs, tr, p)
    h = 1e-6
    for t, (a, z) in enumerate(tr.steps):
        d = rng.normal(size=3)
        d -= d.mean()

        def step(b, a=a, z=z):
            x = (b @ p.transition[:, a, :]) * p.observation[a, :, z]
            return x / x.sum()
        fd = (step(beliefs[t] + h * d) - step(beliefs[t] - h * d)) / (2 * h)
        np.testing.assert_allclose(jac[t] @ d, fd, rtol=1e-5, atol=1e-8)


def test_parse_blocks():
    assert parse_blocks("T, eta") == frozenset({"T", "eta"})
    assert parse_blocks(None) == frozenset()
    with pytest.raises(ValueError):
        parse_blocks("T,Q")


def test_theta_roundtrip():
    theta, _, _, _ = _problem(5, frozen=("b1",))
    back = ThetaEstimate.from_dict(theta.to_dict())
    assert back.frozen == frozenset({"b1"})
    np.testing.assert_array_equal(back.policy.means, theta.policy.means)
