"""Forward-backward smoothing for the decision-dynamics IOHMM.

Action-likelihood factors pi(a_t | b_t) are constants along every hidden
state path, so they cancel from the posteriors and are left out of the
recursions.  Messages are normalized per step; forward normalizers are kept
so the observation log-likelihood can be recovered from them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import ZeroLikelihood
from .iohmm import Dataset, IohmmParams, Trajectory, pack


def _params(theta) -> IohmmParams:
    return theta if isinstance(theta, IohmmParams) else theta.params


def _arrays(params: IohmmParams):
    return params.transition, params.observation, params.initial


@dataclass(frozen=True, eq=False)
class Messages:
    """Per-step normalized messages for one trajectory, indexed t = 1..tau+1."""

    alpha: np.ndarray
    log_scale: np.ndarray
    beta: Optional[np.ndarray] = None

    @property
    def log_likelihood(self) -> float:
        return float(self.log_scale.sum())


@dataclass(frozen=True, eq=False)
class Posteriors:
    """State marginals gamma (tau+1, S) and pair marginals xi (tau, S, S)."""

    gamma: np.ndarray
    xi: np.ndarray


@dataclass(frozen=True, eq=False)
class BatchPosteriors:
    """E-step output for a whole dataset, padded like :class:`Packed`.

    ``alpha`` doubles as the beliefs under the parameters used for the
    E-step and ``scale`` holds the forward normalizers.
    """

    gamma: np.ndarray
    xi: np.ndarray
    alpha: np.ndarray
    scale: np.ndarray

    def trajectory(self, i, length) -> Posteriors:
        return Posteriors(self.gamma[i, :length + 1], self.xi[i, :length])


def _raise_failures(fail, offset=0):
    bad = np.flatnonzero(fail >= 0)
    if bad.size:
        i = int(bad[0])
        raise ZeroLikelihood("forward normalizer underflowed", step=int(fail[i]),
                             trajectory=i + offset)


def forward_messages(traj: Trajectory, theta, backend=None) -> Messages:
    k = kernels.get(backend)
    p = pack([traj])
    T, O, b1 = _arrays(_params(theta))
    alpha, scale, fail = k.forward(T, O, b1, p.actions, p.obs, p.observed, p.lengths)
    if fail[0] >= 0:
        raise ZeroLikelihood("forward normalizer underflowed", step=int(fail[0]))
    return Messages(alpha[0], np.log(scale[0]))


def backward_messages(traj: Trajectory, theta, backend=None) -> np.ndarray:
    """Normalized backward messages ``beta`` (tau+1, S); the last row is all ones."""
    k = kernels.get(backend)
    p = pack([traj])
    T, O, _ = _arrays(_params(theta))
    return k.backward(T, O, p.actions, p.obs, p.observed, p.lengths)[0]


def messages(traj: Trajectory, theta, backend=None) -> Messages:
    fwd = forward_messages(traj, theta, backend)
    return Messages(fwd.alpha, fwd.log_scale, backward_messages(traj, theta, backend))


def state_marginals(msgs: Messages) -> np.ndarray:
    g = msgs.alpha * msgs.beta
    return g / g.sum(axis=1, keepdims=True)


def transition_marginals(msgs: Messages, traj: Trajectory, theta) -> np.ndarray:
    params = _params(theta)
    observed = traj.observed
    tau = len(traj)
    S = params.n_states
    xi = np.empty((tau, S, S))
    for t, (a, z) in enumerate(traj.steps):
        o = params.observation[a, :, z] if observed[t] else np.ones(S)
        x = msgs.alpha[t][:, None] * params.transition[:, a, :] * (o * msgs.beta[t + 1])[None, :]
        xi[t] = x / x.sum()
    return xi


def posteriors(traj: Trajectory, theta, backend=None) -> Posteriors:
    msgs = messages(traj, theta, backend)
    return Posteriors(state_marginals(msgs), transition_marginals(msgs, traj, theta))


def e_step(dataset: Dataset, theta, backend=None) -> BatchPosteriors:
    """Posterior marginals for every trajectory under ``theta``."""
    k = kernels.get(backend)
    p = dataset.packed
    T, O, b1 = _arrays(_params(theta))
    alpha, scale, fail = k.forward(T, O, b1, p.actions, p.obs, p.observed, p.lengths)
    _raise_failures(fail)
    beta = k.backward(T, O, p.actions, p.obs, p.observed, p.lengths)
    gamma, xi = k.posteriors(alpha, beta, T, O, p.actions, p.obs, p.observed, p.lengths)
    return BatchPosteriors(gamma, xi, alpha, scale)


def observation_loglik(dataset: Dataset, theta, backend=None) -> np.ndarray:
    """Per-trajectory log Pr(z_1..z_tau | a_1..a_tau, theta)."""
    k = kernels.get(backend)
    p = dataset.packed
    T, O, b1 = _arrays(_params(theta))
    _, scale, fail = k.forward(T, O, b1, p.actions, p.obs, p.observed, p.lengths)
    _raise_failures(fail)
    return np.log(scale).sum(axis=1)
