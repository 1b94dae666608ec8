"""Expected complete-data log-likelihood Q(theta; theta_hat) and its gradient.

Q sums, over trajectories, the action log-likelihoods at the beliefs implied
by ``theta`` plus the posterior-weighted observation terms:

    sum_t log pi(a_t | b_t)
    + sum_s gamma_1(s) log b1(s)
    + sum_t sum_{s,s'} xi_t(s,s') log T(s'|s,a_t)
    + sum_t sum_s' gamma_{t+1}(s') log O(z_t|a_t,s')

The posteriors come from an E-step under ``theta_hat`` and stay fixed; the
beliefs move with ``theta``, so the action terms are differentiated through
the whole belief recursion.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NonFiniteValue, ZeroLikelihood
from .inference import BatchPosteriors, Posteriors
from .iohmm import Dataset, IohmmParams, Trajectory
from .policy import BoundaryPolicy, action_distribution

BLOCKS = ("T", "O", "b1", "eta", "means")
PARAM_FLOOR = 1e-12


def parse_blocks(spec) -> frozenset:
    """Accept ``"T,eta"``, an iterable of names, or None."""
    if spec is None:
        return frozenset()
    if isinstance(spec, str):
        spec = [s for s in spec.replace(" ", "").split(",") if s]
    out = frozenset(spec)
    unknown = out - set(BLOCKS)
    if unknown:
        raise ValueError(f"unknown parameter blocks {sorted(unknown)}; expected {BLOCKS}")
    return out


@dataclass(frozen=True, eq=False)
class ThetaEstimate:
    params: IohmmParams
    policy: BoundaryPolicy
    frozen: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "frozen", parse_blocks(self.frozen))
        if self.policy.means.shape != (self.params.n_actions, self.params.n_states):
            raise ValueError("policy means must have shape (n_actions, n_states)")

    @property
    def arrays(self):
        p = self.params
        return p.transition, p.observation, p.initial, self.policy.eta, self.policy.means

    def replace(self, **changes) -> "ThetaEstimate":
        kw = dict(params=self.params, policy=self.policy, frozen=self.frozen)
        kw.update(changes)
        return ThetaEstimate(**kw)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "policy": self.policy.to_dict(),
            "frozen": {b: (b in self.frozen) for b in BLOCKS},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThetaEstimate":
        frozen = d.get("frozen") or {}
        if isinstance(frozen, dict):
            frozen = [k for k, v in frozen.items() if v]
        return cls(IohmmParams.from_dict(d["params"]), BoundaryPolicy.from_dict(d["policy"]),
                   frozenset(frozen))


@dataclass(frozen=True, eq=False)
class ThetaGradient:
    d_transition: np.ndarray
    d_observation: np.ndarray
    d_initial: np.ndarray
    d_eta: float
    d_means: np.ndarray

    def block(self, name):
        return {"T": self.d_transition, "O": self.d_observation, "b1": self.d_initial,
                "eta": self.d_eta, "means": self.d_means}[name]

    def tangent(self) -> "ThetaGradient":
        """Project each constrained block onto the tangent space of its constraint."""
        def center(g):
            return g - g.mean(axis=-1, keepdims=True)
        return ThetaGradient(center(self.d_transition), center(self.d_observation),
                             center(self.d_initial), self.d_eta, center(self.d_means))


def _as_batch(posteriors, dataset: Dataset) -> BatchPosteriors:
    if isinstance(posteriors, BatchPosteriors):
        return posteriors
    posts = list(posteriors)
    p = dataset.packed
    S = posts[0].gamma.shape[1]
    gamma = np.zeros((p.n, p.max_len + 1, S))
    xi = np.zeros((p.n, p.max_len, S, S))
    for i, post in enumerate(posts):
        k = post.xi.shape[0]
        gamma[i, :k + 1] = post.gamma
        xi[i, :k] = post.xi
    return BatchPosteriors(gamma, xi, None, None)


def q_value_arrays(T, O, b1, eta, means, packed, post: BatchPosteriors, backend=None):
    """Per-trajectory Q contributions for raw parameter arrays.

    Raw arrays need not satisfy the simplex constraints, which lets finite
    difference checks perturb single coordinates.  A trajectory whose belief
    recursion underflows contributes -inf.
    """
    k = kernels.get(backend)
    p = packed
    alpha, _, fail = k.forward(T, O, b1, p.actions, p.obs, p.observed, p.lengths)
    act = k.action_loglik(alpha, float(eta), means, p.actions, p.lengths)
    obs = k.q_obs(T, O, b1, post.gamma, post.xi, p.actions, p.obs, p.observed, p.lengths)
    out = act + obs
    out[fail >= 0] = -np.inf
    return out


def grad_arrays(T, O, b1, eta, means, packed, post: BatchPosteriors, backend=None,
                floor=PARAM_FLOOR, beliefs=None):
    """Gradient blocks ``(dT, dO, db1, deta, dmeans)`` for raw arrays.

    ``beliefs`` may pass a precomputed ``(alpha, scale)`` forward pass under
    the same arrays.
    """
    k = kernels.get(backend)
    p = packed
    if beliefs is None:
        alpha, scale, fail = k.forward(T, O, b1, p.actions, p.obs, p.observed, p.lengths)
        bad = np.flatnonzero(fail >= 0)
        if bad.size:
            raise ZeroLikelihood("belief recursion underflowed", step=int(fail[bad[0]]),
                                 trajectory=int(bad[0]))
    else:
        alpha, scale = beliefs
    return k.grad(T, O, b1, float(eta), means, alpha, scale, post.gamma, post.xi,
                  p.actions, p.obs, p.observed, p.lengths, floor)


def expected_log_likelihood(theta: ThetaEstimate, posteriors, dataset: Dataset, backend=None) -> float:
    post = _as_batch(posteriors, dataset)
    T, O, b1, eta, means = theta.arrays
    q = q_value_arrays(T, O, b1, eta, means, dataset.packed, post, backend)
    total = float(q.sum())
    if not np.isfinite(total):
        bad = int(np.flatnonzero(~np.isfinite(q))[0])
        raise NonFiniteValue(f"Q is not finite (trajectory {bad})")
    return total


def grad_Q(theta: ThetaEstimate, posteriors, dataset: Dataset, backend=None) -> ThetaGradient:
    post = _as_batch(posteriors, dataset)
    T, O, b1, eta, means = theta.arrays
    dT, dO, db1, deta, dmeans = grad_arrays(T, O, b1, eta, means, dataset.packed, post, backend)
    for name, g in (("T", dT), ("O", dO), ("b1", db1), ("eta", deta), ("means", dmeans)):
        if not np.all(np.isfinite(g)):
            raise NonFiniteValue("gradient is not finite", block=name)
    return _masked(ThetaGradient(dT, dO, db1, float(deta), dmeans), theta.frozen)


def _masked(g: ThetaGradient, frozen) -> ThetaGradient:
    z = np.zeros_like
    return ThetaGradient(
        z(g.d_transition) if "T" in frozen else g.d_transition,
        z(g.d_observation) if "O" in frozen else g.d_observation,
        z(g.d_initial) if "b1" in frozen else g.d_initial,
        0.0 if "eta" in frozen else g.d_eta,
        z(g.d_means) if "means" in frozen else g.d_means,
    )


# ---------------------------------------------------------------------------
# Explicit Jacobians.  Used to cross-check the reverse pass of the kernels.

def _step_factors(params, traj, beliefs):
    observed = traj.observed
    S = params.n_states
    for t, (a, z) in enumerate(traj.steps):
        o = params.observation[a, :, z] if observed[t] else np.ones(S)
        pred = beliefs[t] @ params.transition[:, a, :]
        c = float(pred @ o)
        yield t, a, z, observed[t], o, pred, c


def belief_jacobians(beliefs, traj: Trajectory, theta) -> np.ndarray:
    """``J[t][i, j] = d b_{t+1}(i) / d b_t(j)`` for t = 1..tau (0-based rows).

    Quotient rule on b'(i) = T(i|.,a) O(z|a,i) . b / c with
    c = sum_{x,x'} b(x) T(x'|x,a) O(z|a,x'):

        J[i, j] = (T(i|j,a) O(z|a,i) - b'(i) sum_x' T(x'|j,a) O(z|a,x')) / c
    """
    params = theta if isinstance(theta, IohmmParams) else theta.params
    beliefs = np.asarray(beliefs)
    S = params.n_states
    jac = np.empty((len(traj), S, S))
    for t, a, z, _, o, pred, c in _step_factors(params, traj, beliefs):
        if not c > 0:
            raise ZeroLikelihood(step=t)
        M = params.transition[:, a, :].T * o[:, None]        # M[i, j] = T(i|j,a) o_i
        jac[t] = (M - np.outer(beliefs[t + 1], M.sum(axis=0))) / c
    return jac


def chain_jacobian(jacobians, t_from: int, t_to: int) -> np.ndarray:
    """d b_{t_to} / d b_{t_from} (0-based belief indices) as a matrix product."""
    S = jacobians.shape[1]
    out = np.eye(S)
    for t in range(t_from, t_to):
        out = jacobians[t] @ out
    return out


def grad_Q_unrolled(theta: ThetaEstimate, posteriors, dataset: Dataset, floor=PARAM_FLOOR) -> ThetaGradient:
    """Reference gradient that materializes every product of belief Jacobians.

    Quadratic in trajectory length; intended for tests on small instances.
    """
    from .iohmm import belief_trajectory

    post = _as_batch(posteriors, dataset)
    params, pol = theta.params, theta.policy
    T, O, b1 = params.transition, params.observation, params.initial
    S, A, Z = params.n_states, params.n_actions, params.n_observations
    dT = np.zeros_like(T)
    dO = np.zeros_like(O)
    db1 = np.zeros(S)
    deta = 0.0
    dmeans = np.zeros((A, S))
    for n, traj in enumerate(dataset.trajectories):
        tau = len(traj)
        beliefs, _ = belief_trajectory(traj, params)
        jac = belief_jacobians(beliefs, traj, params)
        # per-step parameter Jacobians of b_{t+1}
        jT = np.zeros((tau, S) + T.shape)
        jO = np.zeros((tau, S) + O.shape)
        for t, a, z, obs_t, o, pred, c in _step_factors(params, traj, beliefs):
            for i in range(S):
                for k in range(S):
                    coef = ((i == k) - beliefs[t + 1, i]) / c
                    jT[t, i, :, a, k] = coef * beliefs[t] * o[k]
                    if obs_t:
                        jO[t, i, a, k, z] = coef * pred[k]
        for t in range(tau):
            a_t = traj.actions[t]
            b = beliefs[t]
            pi = action_distribution(b, pol)
            diffs = b - pol.means
            d2 = (diffs ** 2).sum(axis=1)
            g = -2 * pol.eta * diffs[a_t] + 2 * pol.eta * (pi @ diffs)
            deta += -d2[a_t] + pi @ d2
            dmeans += 2 * pol.eta * ((np.arange(A) == a_t) - pi)[:, None] * diffs
            db1 += g @ chain_jacobian(jac, 0, t)
            for tp in range(t):
                row = g @ chain_jacobian(jac, tp + 1, t)
                dT += np.tensordot(row, jT[tp], axes=1)
                dO += np.tensordot(row, jO[tp], axes=1)
        gamma = post.gamma[n]
        xi = post.xi[n]
        db1 += gamma[0] / np.maximum(b1, floor)
        observed = traj.observed
        for t, (a, z) in enumerate(traj.steps):
            dT[:, a, :] += xi[t] / np.maximum(T[:, a, :], floor)
            if observed[t]:
                dO[a, :, z] += gamma[t + 1] / np.maximum(O[a, :, z], floor)
    return _masked(ThetaGradient(dT, dO, db1, float(deta), dmeans), theta.frozen)
