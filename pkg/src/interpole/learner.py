"""MAP estimation of decision dynamics and decision boundaries.

Each outer iteration runs an E-step (forward-backward under the current
estimate), takes one Adam-preconditioned gradient step on
``Q(theta; theta_hat) + log prior(theta)``, projects back onto the feasible
set, and accepts the step only if that objective strictly improves.  A
rejected step is retried with half the step size up to ``max_halvings``
times.  Fitting stops after ``patience`` consecutive iterations without an
accepted step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import NonFiniteValue, ZeroLikelihood
from .gradient import BLOCKS, ThetaEstimate, grad_arrays, parse_blocks
from .inference import BatchPosteriors, e_step
from .iohmm import Dataset, IohmmParams, Spaces
from .policy import BoundaryPolicy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Prior:
    """Independent priors on each parameter block.

    Dirichlet concentrations apply to every row of T, O and to b1 (1.0 is
    flat).  ``eta_log_normal`` is ``(mean, sd)`` of log(eta); ``means_normal_sd``
    is the sd of an isotropic zero-mean normal on mean-vector components.
    """

    dirichlet_T: float = 1.0
    dirichlet_O: float = 1.0
    dirichlet_b1: float = 1.0
    eta_log_normal: Optional[tuple] = None
    means_normal_sd: Optional[float] = None

    def __post_init__(self):
        for name in ("dirichlet_T", "dirichlet_O", "dirichlet_b1"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.eta_log_normal is not None and self.eta_log_normal[1] <= 0:
            raise ValueError("eta_log_normal sd must be > 0")
        if self.means_normal_sd is not None and self.means_normal_sd <= 0:
            raise ValueError("means_normal_sd must be > 0")

    def to_dict(self):
        return {"dirichlet_T": self.dirichlet_T, "dirichlet_O": self.dirichlet_O,
                "dirichlet_b1": self.dirichlet_b1,
                "eta_log_normal": list(self.eta_log_normal) if self.eta_log_normal else None,
                "means_normal_sd": self.means_normal_sd}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("eta_log_normal") is not None:
            d["eta_log_normal"] = tuple(d["eta_log_normal"])
        return cls(**d)


@dataclass(frozen=True)
class FitConfig:
    learning_rate: float = 0.001
    max_iterations: int = 20000
    patience: int = 100
    seed: int = 0
    improvement_tolerance: float = 1e-8
    max_halvings: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    probability_floor: float = 1e-10
    workers: Optional[int] = None
    backend: Optional[str] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.improvement_tolerance < 0:
            raise ValueError("improvement_tolerance must be >= 0")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class FitReport:
    estimate: ThetaEstimate
    log_posterior_trace: list
    iterations_run: int
    converged: bool
    seed: int
    accepted_steps: int = 0
    method: str = "joint"
    stage1_trace: list = field(default_factory=list)

    @property
    def log_posterior(self):
        return self.log_posterior_trace[-1]

    def to_dict(self) -> dict:
        d = self.estimate.to_dict()
        d.update({
            "seed": self.seed,
            "method": self.method,
            "iterations_run": self.iterations_run,
            "accepted_steps": self.accepted_steps,
            "converged": self.converged,
            "log_posterior_trace": [float(x) for x in self.log_posterior_trace],
        })
        if self.stage1_trace:
            d["stage1_trace"] = [float(x) for x in self.stage1_trace]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitReport":
        return cls(ThetaEstimate.from_dict(d), list(d.get("log_posterior_trace", [])),
                   int(d.get("iterations_run", 0)), bool(d.get("converged", False)),
                   int(d.get("seed", 0)), int(d.get("accepted_steps", 0)),
                   d.get("method", "joint"), list(d.get("stage1_trace", [])))


# ---------------------------------------------------------------------------
# projection

def project_simplex(v, axis=-1):
    """Euclidean projection of each slice along ``axis`` onto the probability simplex."""
    v = np.moveaxis(np.asarray(v, dtype=float), axis, -1)
    shape = v.shape
    flat = v.reshape(-1, shape[-1])
    u = -np.sort(-flat, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, shape[-1] + 1)
    rho = np.count_nonzero(u - css / ind > 0, axis=1)
    tau = css[np.arange(flat.shape[0]), rho - 1] / rho
    out = np.maximum(flat - tau[:, None], 0.0).reshape(shape)
    return np.moveaxis(out, -1, axis)


def project_simplex_floor(v, floor=0.0, axis=-1):
    """Projection onto ``{x >= floor, sum x = 1}`` (a shrunken simplex)."""
    if floor <= 0:
        return project_simplex(v, axis)
    n = np.shape(v)[axis]
    room = 1.0 - n * floor
    if room <= 0:
        raise ValueError("floor too large for the simplex dimension")
    return project_simplex((np.asarray(v, dtype=float) - floor) / room, axis) * room + floor


def project(raw: dict, init: Optional[ThetaEstimate] = None, floor: float = 0.0) -> ThetaEstimate:
    """Map an unconstrained bundle ``{T, O, b1, eta, means}`` to a feasible estimate.

    T/O rows and b1 go to the simplex, each mean vector to the hyperplane
    ``sum = 1``, eta is clamped at 0.  Blocks frozen in ``init`` are copied
    from it unchanged.  A positive ``floor`` keeps every free probability at
    least that large, so log terms stay finite along the iterates.
    """
    frozen = init.frozen if init is not None else frozenset()

    def pick(name, value):
        if name in frozen:
            return {"T": init.params.transition, "O": init.params.observation,
                    "b1": init.params.initial, "eta": init.policy.eta,
                    "means": init.policy.means}[name]
        return value

    T = pick("T", project_simplex_floor(raw["T"], floor))
    O = pick("O", project_simplex_floor(raw["O"], floor))
    b1 = pick("b1", project_simplex_floor(raw["b1"], floor))
    means = np.asarray(raw["means"], dtype=float)
    means = pick("means", means - (means.sum(axis=1, keepdims=True) - 1.0) / means.shape[1])
    eta = pick("eta", max(float(raw["eta"]), 0.0))
    spaces = init.params.spaces if init is not None else None
    return ThetaEstimate(IohmmParams(T, O, b1, spaces), BoundaryPolicy(eta, means), frozen)


def _raw(theta: ThetaEstimate) -> dict:
    T, O, b1, eta, means = theta.arrays
    return {"T": np.array(T), "O": np.array(O), "b1": np.array(b1),
            "eta": np.array(eta, dtype=float), "means": np.array(means)}


# ---------------------------------------------------------------------------
# prior

def _dirichlet_terms(p, alpha):
    if alpha == 1.0:
        return 0.0, np.zeros_like(p)
    safe = np.maximum(p, 1e-300)
    return float(((alpha - 1.0) * np.log(safe)).sum()), (alpha - 1.0) / np.maximum(p, 1e-12)


def log_prior(theta: ThetaEstimate, prior: Prior) -> float:
    """Log prior density of the unfrozen blocks, dropping theta-free constants."""
    return _prior_terms(theta, prior)[0]


def _prior_terms(theta: ThetaEstimate, prior: Prior):
    T, O, b1, eta, means = theta.arrays
    frozen = theta.frozen
    total = 0.0
    grads = {"T": np.zeros_like(T), "O": np.zeros_like(O), "b1": np.zeros_like(b1),
             "eta": 0.0, "means": np.zeros_like(means)}
    for name, p, alpha in (("T", T, prior.dirichlet_T), ("O", O, prior.dirichlet_O),
                           ("b1", b1, prior.dirichlet_b1)):
        if name in frozen:
            continue
        v, g = _dirichlet_terms(p, alpha)
        total += v
        grads[name] = g
    if prior.eta_log_normal is not None and "eta" not in frozen:
        m, sd = prior.eta_log_normal
        e = max(eta, 1e-300)
        le = np.log(e)
        total += -le - (le - m) ** 2 / (2 * sd ** 2)
        grads["eta"] = -1.0 / e - (le - m) / (sd ** 2 * e)
    if prior.means_normal_sd is not None and "means" not in frozen:
        sd = prior.means_normal_sd
        total += float(-(means ** 2).sum() / (2 * sd ** 2))
        grads["means"] = -means / sd ** 2
    return total, grads


# ---------------------------------------------------------------------------
# objectives

def log_posterior(theta: ThetaEstimate, dataset: Dataset, prior: Prior = Prior(), backend=None) -> float:
    """log Pr(D | theta) + log Pr(theta), up to theta-independent constants.

    The data term is exact: forward-scaled observation log-likelihood plus
    the action log-likelihoods at the implied beliefs.
    """
    k = kernels.get(backend)
    p = dataset.packed
    T, O, b1, eta, means = theta.arrays
    alpha, scale, fail = k.forward(T, O, b1, p.actions, p.obs, p.observed, p.lengths)
    bad = np.flatnonzero(fail >= 0)
    if bad.size:
        raise ZeroLikelihood("forward normalizer underflowed", step=int(fail[bad[0]]),
                             trajectory=int(bad[0]))
    act = k.action_loglik(alpha, float(eta), means, p.actions, p.lengths)
    return float(np.log(scale).sum() + act.sum()) + log_prior(theta, prior)


class _Objective:
    """Q + log prior bookkeeping for one dataset."""

    def __init__(self, dataset: Dataset, prior: Prior, backend):
        self.packed = dataset.packed
        self.prior = prior
        self.k = kernels.get(backend)

    def e_step(self, theta):
        """Posteriors, objective Q(theta; theta) + log prior, and log posterior."""
        k, p = self.k, self.packed
        T, O, b1, eta, means = theta.arrays
        alpha, scale, fail = k.forward(T, O, b1, p.actions, p.obs, p.observed, p.lengths)
        if np.any(fail >= 0):
            i = int(np.flatnonzero(fail >= 0)[0])
            raise ZeroLikelihood("forward normalizer underflowed", step=int(fail[i]), trajectory=i)
        beta = k.backward(T, O, p.actions, p.obs, p.observed, p.lengths)
        gamma, xi = k.posteriors(alpha, beta, T, O, p.actions, p.obs, p.observed, p.lengths)
        post = BatchPosteriors(gamma, xi, alpha, scale)
        act = k.action_loglik(alpha, float(eta), means, p.actions, p.lengths).sum()
        qo = k.q_obs(T, O, b1, gamma, xi, p.actions, p.obs, p.observed, p.lengths).sum()
        lp = log_prior(theta, self.prior)
        return post, float(act + qo) + lp, float(np.log(scale).sum() + act) + lp

    def objective(self, theta, post):
        k, p = self.k, self.packed
        T, O, b1, eta, means = theta.arrays
        alpha, _, fail = k.forward(T, O, b1, p.actions, p.obs, p.observed, p.lengths)
        if np.any(fail >= 0):
            return -np.inf
        act = k.action_loglik(alpha, float(eta), means, p.actions, p.lengths).sum()
        qo = k.q_obs(T, O, b1, post.gamma, post.xi, p.actions, p.obs, p.observed, p.lengths).sum()
        val = float(act + qo)
        if np.isnan(val):
            return -np.inf
        return val + log_prior(theta, self.prior)

    def gradient(self, theta, post, iteration=None):
        T, O, b1, eta, means = theta.arrays
        dT, dO, db1, deta, dmeans = grad_arrays(T, O, b1, eta, means, self.packed, post,
                                                backend=self.k, beliefs=(post.alpha, post.scale))
        _, pg = _prior_terms(theta, self.prior)
        g = {"T": dT + pg["T"], "O": dO + pg["O"], "b1": db1 + pg["b1"],
             "eta": np.array(deta + pg["eta"], dtype=float), "means": dmeans + pg["means"]}
        for name in BLOCKS:
            if name in theta.frozen:
                g[name] = np.zeros_like(g[name])
            elif not np.all(np.isfinite(g[name])):
                raise NonFiniteValue("gradient is not finite", iteration=iteration, block=name)
            elif name != "eta":
                # Adam rescales coordinates separately, so the component normal
                # to the sum constraint must go before it does
                g[name] = g[name] - g[name].mean(axis=-1, keepdims=True)
        return g


class _Adam:
    def __init__(self, config: FitConfig):
        self.c = config
        self.m = None
        self.v = None
        self.k = 0

    def direction(self, g: dict) -> dict:
        c = self.c
        if self.m is None:
            self.m = {n: np.zeros_like(x) for n, x in g.items()}
            self.v = {n: np.zeros_like(x) for n, x in g.items()}
        self.k += 1
        out = {}
        for n, x in g.items():
            self.m[n] = c.beta1 * self.m[n] + (1 - c.beta1) * x
            self.v[n] = c.beta2 * self.v[n] + (1 - c.beta2) * x * x
            mhat = self.m[n] / (1 - c.beta1 ** self.k)
            vhat = self.v[n] / (1 - c.beta2 ** self.k)
            out[n] = mhat / (np.sqrt(vhat) + c.adam_eps)
        return out


def fit(dataset: Dataset, init: ThetaEstimate, prior: Prior = Prior(),
        config: FitConfig = FitConfig(), method: str = "joint") -> FitReport:
    """EM-style MAP fit of every unfrozen block of ``init``."""
    kernels.set_workers(config.workers)
    theta = project(_raw(init), init)
    obj = _Objective(dataset, prior, config.backend)
    post, current, lp = obj.e_step(theta)
    trace = [lp]
    report = FitReport(theta, trace, 0, False, config.seed, 0, method)
    if config.max_iterations == 0 or set(BLOCKS) <= theta.frozen:
        report.converged = True
        return report

    adam = _Adam(config)
    stall = 0
    for it in range(1, config.max_iterations + 1):
        report.iterations_run = it
        g = obj.gradient(theta, post, iteration=it)
        d = adam.direction(g)
        base = _raw(theta)
        step = config.learning_rate
        accepted = None
        for _ in range(config.max_halvings + 1):
            cand = project({n: base[n] + step * d[n] for n in BLOCKS}, theta,
                           config.probability_floor)
            val = obj.objective(cand, post)
            if val > current + config.improvement_tolerance:
                accepted = cand
                break
            step *= 0.5
        if accepted is None:
            stall += 1
            if stall >= config.patience:
                report.converged = True
                break
            continue
        stall = 0
        theta = accepted
        post, current, lp = obj.e_step(theta)
        if not np.isfinite(lp):
            raise NonFiniteValue("log posterior is not finite", iteration=it)
        trace.append(lp)
        report.accepted_steps += 1
        report.estimate = theta
        if it % 500 == 0:
            log.debug("iteration %d: log posterior %.6f", it, lp)
    return report


# ---------------------------------------------------------------------------
# initialization

def init_random(spaces: Spaces, seed: int = 0, freeze=None, known=None) -> ThetaEstimate:
    """Random starting point.

    Rows of T, O and b1 are uniform on the simplex.  Mean vectors are
    ``(1/S + eps) / sum(1/S + eps)`` with ``eps ~ N(0, 0.001^2)``.  eta is 1
    unless ``known`` supplies it.  ``known`` (a :class:`ThetaEstimate` or a
    dict keyed by block name) overrides the drawn value of any block it
    provides; ``freeze`` lists the blocks to hold fixed.
    """
    S, A, Z = spaces.shape
    rng = np.random.default_rng(seed)
    T = rng.dirichlet(np.ones(S), size=(S, A))
    O = rng.dirichlet(np.ones(Z), size=(A, S))
    b1 = rng.dirichlet(np.ones(S))
    eps = rng.normal(0.0, 0.001, size=(A, S))
    means = (1.0 / S + eps) / (1.0 / S + eps).sum(axis=1, keepdims=True)
    values = {"T": T, "O": O, "b1": b1, "eta": 1.0, "means": means}
    if isinstance(known, ThetaEstimate):
        known = {"T": known.params.transition, "O": known.params.observation,
                 "b1": known.params.initial, "eta": known.policy.eta,
                 "means": known.policy.means}
    for name, value in (known or {}).items():
        if name not in values:
            raise ValueError(f"unknown block {name!r}")
        values[name] = value
    params = IohmmParams(values["T"], values["O"], values["b1"], spaces)
    return ThetaEstimate(params, BoundaryPolicy(values["eta"], values["means"]), parse_blocks(freeze))


# ---------------------------------------------------------------------------
# two-stage baseline

def closed_form_dynamics(dataset: Dataset, post: BatchPosteriors, theta: ThetaEstimate,
                         prior: Prior = Prior()) -> ThetaEstimate:
    """Baum-Welch M-step for T, O, b1 from expected counts (MAP under Dirichlet priors).

    Rows without any expected count keep their current value.
    """
    p = dataset.packed
    params = theta.params
    S, A, Z = params.n_states, params.n_actions, params.n_observations
    cT = np.zeros((S, A, S))
    cO = np.zeros((A, S, Z))
    cb = post.gamma[:, 0].sum(axis=0)
    for i in range(p.n):
        for t in range(p.lengths[i]):
            a, z = p.actions[i, t], p.obs[i, t]
            cT[:, a, :] += post.xi[i, t]
            if p.observed[i, t] > 0:
                cO[a, :, z] += post.gamma[i, t + 1]

    def normalize(counts, alpha, current):
        c = np.maximum(counts + (alpha - 1.0), 0.0)
        tot = c.sum(axis=-1, keepdims=True)
        return np.where(tot > 0, c / np.where(tot > 0, tot, 1.0), current)

    frozen = theta.frozen
    T = params.transition if "T" in frozen else normalize(cT, prior.dirichlet_T, params.transition)
    O = params.observation if "O" in frozen else normalize(cO, prior.dirichlet_O, params.observation)
    b1 = params.initial if "b1" in frozen else normalize(cb, prior.dirichlet_b1, params.initial)
    return theta.replace(params=params.replace(transition=T, observation=O, initial=b1))


def _dynamics_log_posterior(theta, dataset, prior, backend):
    k = kernels.get(backend)
    p = dataset.packed
    T, O, b1, _, _ = theta.arrays
    _, scale, fail = k.forward(T, O, b1, p.actions, p.obs, p.observed, p.lengths)
    if np.any(fail >= 0):
        return -np.inf
    lp = 0.0
    for name, arr, alpha in (("T", T, prior.dirichlet_T), ("O", O, prior.dirichlet_O),
                             ("b1", b1, prior.dirichlet_b1)):
        if name not in theta.frozen:
            lp += _dirichlet_terms(arr, alpha)[0]
    return float(np.log(scale).sum()) + lp


def _baum_welch(dataset, theta, prior, config):
    trace = [_dynamics_log_posterior(theta, dataset, prior, config.backend)]
    if not {"T", "O", "b1"} - theta.frozen:
        return theta, trace
    for _ in range(config.max_iterations):
        post = e_step(dataset, theta, config.backend)
        cand = closed_form_dynamics(dataset, post, theta, prior)
        val = _dynamics_log_posterior(cand, dataset, prior, config.backend)
        if not val > trace[-1] + config.improvement_tolerance:
            break
        theta = cand
        trace.append(val)
    return theta, trace


def two_stage_fit(dataset: Dataset, init: ThetaEstimate, prior: Prior = Prior(),
                  config: FitConfig = FitConfig()) -> FitReport:
    """Fit dynamics from observation likelihoods alone, then the policy.

    Stage 1 runs Baum-Welch on T, O, b1 ignoring actions' likelihoods.
    Stage 2 runs :func:`fit` on eta and the means with the dynamics frozen.
    """
    kernels.set_workers(config.workers)
    theta, stage1 = _baum_welch(dataset, project(_raw(init), init), prior, config)
    stage2_init = theta.replace(frozen=theta.frozen | {"T", "O", "b1"})
    report = fit(dataset, stage2_init, prior, config, method="two-stage")
    report.estimate = report.estimate.replace(frozen=init.frozen)
    report.stage1_trace = stage1
    return report


def belief_centroid_means(dataset: Dataset, theta: ThetaEstimate, backend=None) -> np.ndarray:
    """Average belief at which each action was taken, under ``theta``'s dynamics.

    Actions that never occur keep their current mean vector.
    """
    post = e_step(dataset, theta, backend)
    p = dataset.packed
    means = np.array(theta.policy.means)
    mask = np.arange(p.max_len)[None, :] < p.lengths[:, None]
    beliefs = post.alpha[:, :-1][mask]
    actions = p.actions[mask]
    for a in range(means.shape[0]):
        hit = actions == a
        if hit.any():
            means[a] = beliefs[hit].mean(axis=0)
    return means


def warm_start(dataset: Dataset, init: ThetaEstimate, prior: Prior = Prior(),
               config: FitConfig = FitConfig(), em_iterations: int = 500) -> ThetaEstimate:
    """Baum-Welch on the free dynamics, then means at the per-action belief centroids.

    Starting the boundary fit from near-identical means lets rarely taken
    actions collapse onto the same side of the simplex; placing each mean
    where its action is used avoids that basin.
    """
    em_config = FitConfig(max_iterations=min(em_iterations, config.max_iterations),
                          improvement_tolerance=config.improvement_tolerance, backend=config.backend)
    theta = _baum_welch(dataset, project(_raw(init), init), prior, em_config)[0]
    if "means" not in init.frozen:
        theta = theta.replace(policy=theta.policy.replace(
            means=belief_centroid_means(dataset, theta, config.backend)))
    return theta
