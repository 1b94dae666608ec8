"""Numba-compiled kernels; same signatures and results as ``_kernels_numpy``.

Each trajectory is processed independently inside ``prange`` and writes to
its own slot; cross-trajectory sums are done afterwards in index order so
results do not depend on the thread count.
"""
import math

import numba
import numpy as np
from numba import njit, prange

# the bundled TBB is often too old and only produces a warning
numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

ZERO_LIKELIHOOD = 1e-300

_opts = dict(cache=True, nogil=True)


@njit(parallel=True, **_opts)
def forward(T, O, b1, actions, obs, observed, lengths):
    n, L = actions.shape
    S = T.shape[0]
    alpha = np.empty((n, L + 1, S))
    scale = np.ones((n, L))
    fail = np.full(n, -1, dtype=np.int64)
    for i in prange(n):
        for s in range(S):
            alpha[i, 0, s] = b1[s]
        failed = False
        for t in range(L):
            if t >= lengths[i] or failed:
                for s in range(S):
                    alpha[i, t + 1, s] = alpha[i, t, s]
                continue
            a = actions[i, t]
            z = obs[i, t]
            c = 0.0
            for k in range(S):
                acc = 0.0
                for s in range(S):
                    acc += alpha[i, t, s] * T[s, a, k]
                if observed[i, t] > 0:
                    acc *= O[a, k, z]
                alpha[i, t + 1, k] = acc
                c += acc
            if not c > ZERO_LIKELIHOOD:
                fail[i] = t
                failed = True
                for s in range(S):
                    alpha[i, t + 1, s] = alpha[i, t, s]
                continue
            scale[i, t] = c
            for k in range(S):
                alpha[i, t + 1, k] /= c
    return alpha, scale, fail


@njit(parallel=True, **_opts)
def backward(T, O, actions, obs, observed, lengths):
    n, L = actions.shape
    S = T.shape[0]
    beta = np.ones((n, L + 1, S))
    for i in prange(n):
        for t in range(lengths[i] - 1, -1, -1):
            a = actions[i, t]
            z = obs[i, t]
            d = 0.0
            for s in range(S):
                acc = 0.0
                for k in range(S):
                    o = O[a, k, z] if observed[i, t] > 0 else 1.0
                    acc += T[s, a, k] * o * beta[i, t + 1, k]
                beta[i, t, s] = acc
                d += acc
            if d > 0:
                for s in range(S):
                    beta[i, t, s] *= S / d
            else:
                for s in range(S):
                    beta[i, t, s] = 1.0
    return beta


@njit(parallel=True, **_opts)
def posteriors(alpha, beta, T, O, actions, obs, observed, lengths):
    n, L = actions.shape
    S = T.shape[0]
    gamma = np.zeros((n, L + 1, S))
    xi = np.zeros((n, L, S, S))
    for i in prange(n):
        for t in range(lengths[i] + 1):
            tot = 0.0
            for s in range(S):
                gamma[i, t, s] = alpha[i, t, s] * beta[i, t, s]
                tot += gamma[i, t, s]
            if tot > 0:
                for s in range(S):
                    gamma[i, t, s] /= tot
            else:
                for s in range(S):
                    gamma[i, t, s] = 0.0
        for t in range(lengths[i]):
            a = actions[i, t]
            z = obs[i, t]
            tot = 0.0
            for s in range(S):
                for k in range(S):
                    o = O[a, k, z] if observed[i, t] > 0 else 1.0
                    x = alpha[i, t, s] * T[s, a, k] * o * beta[i, t + 1, k]
                    xi[i, t, s, k] = x
                    tot += x
            if tot > 0:
                for s in range(S):
                    for k in range(S):
                        xi[i, t, s, k] /= tot
            else:
                for s in range(S):
                    for k in range(S):
                        xi[i, t, s, k] = 0.0
    return gamma, xi


@njit(**_opts)
def _policy_step(b, eta, means, d2, pi):
    """Fill squared distances and action probabilities at belief ``b``."""
    A, S = means.shape
    mx = -np.inf
    for a in range(A):
        acc = 0.0
        for s in range(S):
            diff = b[s] - means[a, s]
            acc += diff * diff
        d2[a] = acc
        if -eta * acc > mx:
            mx = -eta * acc
    z = 0.0
    for a in range(A):
        pi[a] = math.exp(-eta * d2[a] - mx)
        z += pi[a]
    for a in range(A):
        pi[a] /= z
    return mx + math.log(z)


@njit(parallel=True, **_opts)
def action_loglik(alpha, eta, means, actions, lengths):
    n, L = actions.shape
    A = means.shape[0]
    out = np.zeros(n)
    for i in prange(n):
        d2 = np.empty(A)
        pi = np.empty(A)
        acc = 0.0
        for t in range(lengths[i]):
            logz = _policy_step(alpha[i, t], eta, means, d2, pi)
            acc += -eta * d2[actions[i, t]] - logz
        out[i] = acc
    return out


@njit(**_opts)
def _xlogy(w, p):
    if w == 0.0:
        return 0.0
    if p <= 0.0:
        return -np.inf
    return w * math.log(p)


@njit(parallel=True, **_opts)
def q_obs(T, O, b1, gamma, xi, actions, obs, observed, lengths):
    n, L = actions.shape
    S = T.shape[0]
    out = np.zeros(n)
    for i in prange(n):
        acc = 0.0
        for s in range(S):
            acc += _xlogy(gamma[i, 0, s], b1[s])
        for t in range(lengths[i]):
            a = actions[i, t]
            z = obs[i, t]
            for s in range(S):
                for k in range(S):
                    acc += _xlogy(xi[i, t, s, k], T[s, a, k])
            if observed[i, t] > 0:
                for k in range(S):
                    acc += _xlogy(gamma[i, t + 1, k], O[a, k, z])
        out[i] = acc
    return out


@njit(parallel=True, **_opts)
def _grad_per_traj(T, O, b1, eta, means, alpha, scale, gamma, xi,
                   actions, obs, observed, lengths, floor):
    n, L = actions.shape
    S, A, _ = T.shape
    Z = O.shape[2]
    dT_all = np.zeros((n, S, A, S))
    dO_all = np.zeros((n, A, S, Z))
    db1_all = np.zeros((n, S))
    deta_all = np.zeros(n)
    dmeans_all = np.zeros((n, A, S))
    for i in prange(n):
        w = np.zeros(S)
        w_prev = np.zeros(S)
        v = np.zeros(S)
        o = np.zeros(S)
        d2 = np.empty(A)
        pi = np.empty(A)
        for t in range(lengths[i] - 1, -1, -1):
            a = actions[i, t]
            z = obs[i, t]
            obs_step = observed[i, t] > 0
            for k in range(S):
                o[k] = O[a, k, z] if obs_step else 1.0
            # adjoint through b_{t+1} = normalize(o * (b_t T_a))
            c = scale[i, t]
            wb = 0.0
            for k in range(S):
                wb += w[k] * alpha[i, t + 1, k]
            for k in range(S):
                v[k] = (w[k] - wb) / c
            for s in range(S):
                acc = 0.0
                for k in range(S):
                    dT_all[i, s, a, k] += alpha[i, t, s] * v[k] * o[k]
                    acc += T[s, a, k] * v[k] * o[k]
                w_prev[s] = acc
            if obs_step:
                for k in range(S):
                    pred = 0.0
                    for s in range(S):
                        pred += alpha[i, t, s] * T[s, a, k]
                    dO_all[i, a, k, z] += v[k] * pred
            # action likelihood at b_t
            _policy_step(alpha[i, t], eta, means, d2, pi)
            deta_all[i] += -d2[a]
            for ap in range(A):
                deta_all[i] += pi[ap] * d2[ap]
            for s in range(S):
                g = -2.0 * eta * (alpha[i, t, s] - means[a, s])
                for ap in range(A):
                    diff = alpha[i, t, s] - means[ap, s]
                    g += 2.0 * eta * pi[ap] * diff
                    ind = 1.0 if ap == a else 0.0
                    dmeans_all[i, ap, s] += 2.0 * eta * (ind - pi[ap]) * diff
                w[s] = w_prev[s] + g
            # observation terms from the fixed posteriors
            for s in range(S):
                for k in range(S):
                    dT_all[i, s, a, k] += xi[i, t, s, k] / max(T[s, a, k], floor)
            if obs_step:
                for k in range(S):
                    dO_all[i, a, k, z] += gamma[i, t + 1, k] / max(O[a, k, z], floor)
        for s in range(S):
            db1_all[i, s] = w[s] + gamma[i, 0, s] / max(b1[s], floor)
    return dT_all, dO_all, db1_all, deta_all, dmeans_all


@njit(**_opts)
def _reduce(dT_all, dO_all, db1_all, deta_all, dmeans_all):
    n = dT_all.shape[0]
    dT = np.zeros(dT_all.shape[1:])
    dO = np.zeros(dO_all.shape[1:])
    db1 = np.zeros(db1_all.shape[1:])
    dmeans = np.zeros(dmeans_all.shape[1:])
    deta = 0.0
    for i in range(n):
        dT += dT_all[i]
        dO += dO_all[i]
        db1 += db1_all[i]
        deta += deta_all[i]
        dmeans += dmeans_all[i]
    return dT, dO, db1, deta, dmeans


def grad(T, O, b1, eta, means, alpha, scale, gamma, xi, actions, obs, observed, lengths, floor):
    parts = _grad_per_traj(T, O, b1, float(eta), means, alpha, scale, gamma, xi,
                           actions, obs, observed, lengths, float(floor))
    return _reduce(*parts)
