"""Pure-numpy kernels, vectorized across trajectories, looping over time.

All kernels take the padded arrays of :class:`interpole.iohmm.Packed`.
Steps at or beyond a trajectory's length are ignored: beliefs are carried
forward unchanged and posteriors are zero there.
"""
import numpy as np

ZERO_LIKELIHOOD = 1e-300


def _step_arrays(T, O, actions, obs, observed, t):
    a = actions[:, t]
    Ta = T.transpose(1, 0, 2)[a]                 # (n, S, S): Ta[i, s, s'] = T(s'|s, a_i)
    o = O[a, :, obs[:, t]]                        # (n, S)
    o = np.where(observed[:, t, None] > 0, o, 1.0)
    return a, Ta, o


def forward(T, O, b1, actions, obs, observed, lengths):
    """Scaled forward pass.

    Returns normalized messages ``alpha`` (n, L+1, S) -- equal to the beliefs
    b_1..b_{tau+1} -- the per-step normalizers ``scale`` (n, L) and ``fail``
    (n,), the first step whose normalizer underflowed (-1 when none did).
    """
    n, L = actions.shape
    S = T.shape[0]
    alpha = np.empty((n, L + 1, S))
    scale = np.ones((n, L))
    fail = np.full(n, -1, dtype=np.int64)
    alpha[:, 0] = b1
    for t in range(L):
        _, Ta, o = _step_arrays(T, O, actions, obs, observed, t)
        u = np.einsum("ns,nsk->nk", alpha[:, t], Ta) * o
        c = u.sum(axis=1)
        active = (t < lengths) & (fail < 0)
        bad = active & ~(c > ZERO_LIKELIHOOD)
        fail[bad] = t
        ok = active & ~bad
        safe_c = np.where(ok, c, 1.0)
        alpha[:, t + 1] = np.where(ok[:, None], u / safe_c[:, None], alpha[:, t])
        scale[:, t] = safe_c
    return alpha, scale, fail


def backward(T, O, actions, obs, observed, lengths):
    """Scaled backward pass; ``beta[:, tau]`` is all ones, each stored vector sums to S."""
    n, L = actions.shape
    S = T.shape[0]
    beta = np.ones((n, L + 1, S))
    for t in range(L - 1, -1, -1):
        _, Ta, o = _step_arrays(T, O, actions, obs, observed, t)
        v = np.einsum("nsk,nk->ns", Ta, o * beta[:, t + 1])
        d = v.sum(axis=1)
        active = (t < lengths) & (d > 0)
        safe_d = np.where(active, d, 1.0)
        beta[:, t] = np.where(active[:, None], S * v / safe_d[:, None], 1.0)
    return beta


def posteriors(alpha, beta, T, O, actions, obs, observed, lengths):
    n, L = actions.shape
    S = T.shape[0]
    steps = np.arange(L + 1)
    g = alpha * beta
    g_sum = g.sum(axis=2, keepdims=True)
    gamma = np.where(g_sum > 0, g / np.where(g_sum > 0, g_sum, 1.0), 0.0)
    gamma[steps[None, :] > lengths[:, None]] = 0.0
    xi = np.zeros((n, L, S, S))
    for t in range(L):
        _, Ta, o = _step_arrays(T, O, actions, obs, observed, t)
        x = alpha[:, t, :, None] * Ta * (o * beta[:, t + 1])[:, None, :]
        tot = x.sum(axis=(1, 2))
        active = (t < lengths) & (tot > 0)
        xi[:, t] = np.where(active[:, None, None], x / np.where(active, tot, 1.0)[:, None, None], 0.0)
    return gamma, xi


def _policy_terms(b, eta, means):
    """Squared distances, log pi and pi for beliefs ``b`` of shape (..., S)."""
    diff = b[..., None, :] - means
    d2 = (diff ** 2).sum(axis=-1)
    logits = -eta * d2
    m = logits.max(axis=-1, keepdims=True)
    logz = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    logpi = logits - logz
    return diff, d2, logpi, np.exp(logpi)


def action_loglik(alpha, eta, means, actions, lengths):
    """Per-trajectory sum of log pi(a_t | b_t)."""
    n, L = actions.shape
    _, _, logpi, _ = _policy_terms(alpha[:, :L], eta, means)
    chosen = np.take_along_axis(logpi, actions[..., None], axis=2)[..., 0]
    mask = np.arange(L)[None, :] < lengths[:, None]
    return np.where(mask, chosen, 0.0).sum(axis=1)


def _xlogy(w, p):
    """w * log p with 0 * log 0 = 0 and -inf for positive weight on zero."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = w * np.log(p)
    out = np.where(w == 0, 0.0, out)
    return np.where((w > 0) & (p <= 0), -np.inf, out)


def q_obs(T, O, b1, gamma, xi, actions, obs, observed, lengths):
    """Per-trajectory expected log of the observation likelihood terms."""
    n, L = actions.shape
    total = _xlogy(gamma[:, 0], b1[None, :]).sum(axis=1)
    for t in range(L):
        a = actions[:, t]
        Ta = T.transpose(1, 0, 2)[a]
        valid = t < lengths
        term_T = _xlogy(xi[:, t], Ta).sum(axis=(1, 2))
        o = O[a, :, obs[:, t]]
        term_O = _xlogy(gamma[:, t + 1], o).sum(axis=1)
        total = total + np.where(valid, term_T, 0.0)
        total = total + np.where(valid & (observed[:, t] > 0), term_O, 0.0)
    return total


def grad(T, O, b1, eta, means, alpha, scale, gamma, xi, actions, obs, observed, lengths, floor):
    """Analytic gradient of Q with respect to every parameter block.

    The belief-path contribution of the action likelihoods is accumulated by
    a reverse pass carrying the adjoint of b_{t+1}; the observation terms use
    the fixed posteriors ``gamma``/``xi``.  Contributions are summed over
    trajectories in index order.
    """
    n, L = actions.shape
    S, A, _ = T.shape
    Z = O.shape[2]
    dT_all = np.zeros((n, S, A, S))
    dO_all = np.zeros((n, A, S, Z))
    deta_all = np.zeros(n)
    dmeans_all = np.zeros((n, A, S))
    rows = np.arange(n)

    w = np.zeros((n, S))  # adjoint of b_{t+1}
    for t in range(L - 1, -1, -1):
        valid = t < lengths
        a, Ta, o = _step_arrays(T, O, actions, obs, observed, t)
        b = alpha[:, t]
        bn = alpha[:, t + 1]
        c = scale[:, t]
        v = (w - (w * bn).sum(axis=1, keepdims=True)) / c[:, None]
        v = np.where(valid[:, None], v, 0.0)
        vo = v * o
        pred = np.einsum("ns,nsk->nk", b, Ta)
        dT_all[rows, :, a, :] += b[:, :, None] * vo[:, None, :]
        obs_step = valid & (observed[:, t] > 0)
        z = obs[:, t]
        dO_all[rows, a, :, z] += np.where(obs_step[:, None], v * pred, 0.0)
        w_prev = np.einsum("nsk,nk->ns", Ta, vo)

        diff, d2, _, pi = _policy_terms(b, eta, means)
        chosen = np.eye(A)[a]
        g_b = -2 * eta * diff[rows, a] + 2 * eta * np.einsum("na,nas->ns", pi, diff)
        deta_t = -d2[rows, a] + (pi * d2).sum(axis=1)
        dmu_t = 2 * eta * (chosen - pi)[:, :, None] * diff
        deta_all += np.where(valid, deta_t, 0.0)
        dmeans_all += np.where(valid[:, None, None], dmu_t, 0.0)
        w = np.where(valid[:, None], w_prev + g_b, 0.0)

        # observation-likelihood terms from the fixed posteriors
        dT_all[rows, :, a, :] += np.where(valid[:, None, None], xi[:, t] / np.maximum(Ta, floor), 0.0)
        o_raw = O[a, :, z]
        dO_all[rows, a, :, z] += np.where(obs_step[:, None],
                                          gamma[:, t + 1] / np.maximum(o_raw, floor), 0.0)

    db1_all = w + gamma[:, 0] / np.maximum(b1, floor)
    # fixed-order reduction over trajectories
    dT = np.zeros((S, A, S))
    dO = np.zeros((A, S, Z))
    db1 = np.zeros(S)
    deta = 0.0
    dmeans = np.zeros((A, S))
    for i in range(n):
        dT += dT_all[i]
        dO += dO_all[i]
        db1 += db1_all[i]
        deta += deta_all[i]
        dmeans += dmeans_all[i]
    return dT, dO, db1, deta, dmeans
