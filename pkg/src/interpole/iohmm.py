"""Decision dynamics: IOHMM parameter tensors, trajectories and the belief update.

Tensor layout is fixed everywhere in the package:

* ``transition[s, a, s']`` = T(s' | s, a)
* ``observation[a, s', z]`` = O(z | a, s')
* ``initial[s]`` = b1(s)

Beliefs are plain 1-D float arrays on the probability simplex.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .errors import ZeroLikelihood

SIMPLEX_TOL = 1e-9
ZERO_LIKELIHOOD = 1e-300
MAX_TRAJECTORY_LENGTH = 1000


def _readonly(x, dtype=float):
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def as_belief(probs, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate ``probs`` as a distribution and return a renormalized copy."""
    b = np.asarray(probs, dtype=float)
    if b.ndim != 1 or b.size == 0:
        raise ValueError("belief must be a non-empty 1-D vector")
    if not np.all(np.isfinite(b)) or np.any(b < -tol):
        raise ValueError(f"belief has negative or non-finite entries: {b}")
    total = b.sum()
    if abs(total - 1.0) > tol:
        raise ValueError(f"belief sums to {total!r}, not 1")
    b = np.clip(b, 0.0, None)
    return b / b.sum()


@dataclass(frozen=True)
class Spaces:
    n_states: int
    n_actions: int
    n_observations: int
    state_labels: Optional[tuple] = None
    action_labels: Optional[tuple] = None
    observation_labels: Optional[tuple] = None

    def __post_init__(self):
        for name in ("n_states", "n_actions", "n_observations"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        for labels, n, kind in (
            (self.state_labels, self.n_states, "state"),
            (self.action_labels, self.n_actions, "action"),
            (self.observation_labels, self.n_observations, "observation"),
        ):
            if labels is None:
                continue
            if len(labels) != n:
                raise ValueError(f"{kind} labels: expected {n}, got {len(labels)}")
            if len(set(labels)) != len(labels):
                raise ValueError(f"{kind} labels are not unique")
        # normalize label containers so the dataclass stays hashable
        for name in ("state_labels", "action_labels", "observation_labels"):
            labels = getattr(self, name)
            if labels is not None:
                object.__setattr__(self, name, tuple(labels))

    @property
    def shape(self):
        return self.n_states, self.n_actions, self.n_observations

    def to_dict(self) -> dict:
        out = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "n_observations": self.n_observations,
        }
        labels = {}
        for key, name in (("states", "state_labels"), ("actions", "action_labels"),
                          ("observations", "observation_labels")):
            if getattr(self, name) is not None:
                labels[key] = list(getattr(self, name))
        if labels:
            out["labels"] = labels
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Spaces":
        labels = d.get("labels") or {}
        return cls(
            int(d["n_states"]), int(d["n_actions"]), int(d["n_observations"]),
            labels.get("states"), labels.get("actions"), labels.get("observations"),
        )


def _check_rows(name, arr, tol):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    if np.any(arr < -tol) or np.any(arr > 1 + tol):
        raise ValueError(f"{name} entries must lie in [0, 1]")
    bad = np.abs(arr.sum(axis=-1) - 1.0) > tol
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"{name} row {idx} does not sum to 1")


@dataclass(frozen=True, eq=False)
class IohmmParams:
    """Transition tensor, observation tensor and initial belief."""

    transition: np.ndarray
    observation: np.ndarray
    initial: np.ndarray
    spaces: Optional[Spaces] = None

    def __post_init__(self):
        T = np.asarray(self.transition, dtype=float)
        O = np.asarray(self.observation, dtype=float)
        if T.ndim != 3 or T.shape[0] != T.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {T.shape}")
        S, A, _ = T.shape
        if O.ndim != 3 or O.shape[:2] != (A, S):
            raise ValueError(f"observation must have shape ({A}, {S}, Z), got {O.shape}")
        _check_rows("transition", T, SIMPLEX_TOL)
        _check_rows("observation", O, SIMPLEX_TOL)
        b1 = as_belief(self.initial)
        if b1.shape != (S,):
            raise ValueError(f"initial belief must have length {S}")
        spaces = self.spaces or Spaces(S, A, O.shape[2])
        if spaces.shape != (S, A, O.shape[2]):
            raise ValueError("spaces do not match tensor shapes")
        object.__setattr__(self, "transition", _readonly(T))
        object.__setattr__(self, "observation", _readonly(O))
        object.__setattr__(self, "initial", _readonly(b1))
        object.__setattr__(self, "spaces", spaces)

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    @property
    def n_observations(self):
        return self.observation.shape[2]

    def replace(self, **changes) -> "IohmmParams":
        kw = dict(transition=self.transition, observation=self.observation,
                  initial=self.initial, spaces=self.spaces)
        kw.update(changes)
        return IohmmParams(**kw)

    def to_dict(self) -> dict:
        d = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "n_observations": self.n_observations,
            "transition": self.transition.tolist(),
            "observation": self.observation.tolist(),
            "initial": self.initial.tolist(),
        }
        labels = self.spaces.to_dict().get("labels")
        if labels:
            d["labels"] = labels
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IohmmParams":
        spaces = Spaces.from_dict(d)
        return cls(np.array(d["transition"], dtype=float),
                   np.array(d["observation"], dtype=float),
                   np.array(d["initial"], dtype=float), spaces)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """An action/observation sequence ``[(a1, z1), ..., (a_tau, z_tau)]``.

    ``terminal`` marks a trajectory that ended with a stop action; its last
    observation is a placeholder and is excluded from every likelihood.
    ``meta`` holds free-form tags (cohort attributes and the like).
    """

    steps: np.ndarray
    terminal: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=np.int64)
        if steps.ndim != 2 or steps.shape[1] != 2 or steps.shape[0] < 1:
            raise ValueError("trajectory needs at least one (action, observation) pair")
        object.__setattr__(self, "steps", _readonly(steps, np.int64))
        object.__setattr__(self, "terminal", bool(self.terminal))

    def __len__(self):
        return self.steps.shape[0]

    @property
    def actions(self) -> np.ndarray:
        return self.steps[:, 0]

    @property
    def observations(self) -> np.ndarray:
        return self.steps[:, 1]

    @property
    def observed(self) -> np.ndarray:
        """Boolean mask of steps whose observation enters the likelihood."""
        mask = np.ones(len(self), dtype=bool)
        if self.terminal:
            mask[-1] = False
        return mask

    def check(self, spaces: Spaces):
        a, z = self.actions, self.observations
        if a.min() < 0 or a.max() >= spaces.n_actions:
            raise ValueError("action index out of range")
        if z.min() < 0 or z.max() >= spaces.n_observations:
            raise ValueError("observation index out of range")


@dataclass(frozen=True)
class Packed:
    """Right-padded array view of a dataset consumed by the numeric kernels."""

    actions: np.ndarray    # (n, L) int64
    obs: np.ndarray        # (n, L) int64
    observed: np.ndarray   # (n, L) float64, 1.0 where the observation counts
    lengths: np.ndarray    # (n,) int64

    @property
    def n(self):
        return self.lengths.shape[0]

    @property
    def max_len(self):
        return self.actions.shape[1]


def pack(trajectories: Sequence[Trajectory]) -> Packed:
    n = len(trajectories)
    L = max(len(tr) for tr in trajectories)
    actions = np.zeros((n, L), dtype=np.int64)
    obs = np.zeros((n, L), dtype=np.int64)
    observed = np.zeros((n, L), dtype=np.float64)
    lengths = np.zeros(n, dtype=np.int64)
    for i, tr in enumerate(trajectories):
        k = len(tr)
        actions[i, :k] = tr.actions
        obs[i, :k] = tr.observations
        observed[i, :k] = tr.observed
        lengths[i] = k
    return Packed(actions, obs, observed, lengths)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Demonstrations plus the spaces they live in.

    ``info`` carries environment facts needed downstream (``stop_actions``,
    ``max_horizon``, ``positive_action``, ``test_action``, ``env``).
    """

    spaces: Spaces
    trajectories: tuple
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        if not trajs:
            raise ValueError("dataset must contain at least one trajectory")
        for i, tr in enumerate(trajs):
            if len(tr) > MAX_TRAJECTORY_LENGTH:
                raise ValueError(
                    f"trajectory {i} has length {len(tr)} > cap {MAX_TRAJECTORY_LENGTH}")
            tr.check(self.spaces)
        object.__setattr__(self, "trajectories", trajs)

    def __len__(self):
        return len(self.trajectories)

    @property
    def n(self):
        return len(self.trajectories)

    @cached_property
    def packed(self) -> Packed:
        return pack(self.trajectories)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.spaces, tuple(self.trajectories[i] for i in indices), dict(self.info))


def _step_likelihood(b, a, z, params, observed=True):
    predicted = b @ params.transition[:, a, :]
    if observed:
        joint = predicted * params.observation[a, :, z]
    else:
        joint = predicted
    return joint, joint.sum()


def _normalize(joint, norm):
    out = joint / norm
    return out / out.sum()


def belief_update(b, a: int, z: int, params: IohmmParams, observed: bool = True) -> np.ndarray:
    """Posterior belief after taking ``a`` and seeing ``z``.

    With ``observed=False`` the observation is ignored and the result is the
    predicted next-state marginal.
    """
    b = np.asarray(b, dtype=float)
    joint, norm = _step_likelihood(b, a, z, params, observed)
    if not norm > ZERO_LIKELIHOOD:
        raise ZeroLikelihood(f"Pr(z={z} | b, a={a}) = {norm:.3g}")
    return _normalize(joint, norm)


def observation_probabilities(b, a: int, params: IohmmParams) -> np.ndarray:
    """Pr(z | b, a) for every observation z."""
    predicted = np.asarray(b, dtype=float) @ params.transition[:, a, :]
    return predicted @ params.observation[a]


def belief_trajectory(traj: Trajectory, params: IohmmParams):
    """Fold :func:`belief_update` over a trajectory.

    Returns
    -------
    beliefs : ndarray, shape (tau + 1, S)
        ``beliefs[t]`` is the belief after the first ``t`` steps.
    log_increments : ndarray, shape (tau,)
        log Pr(z_t | b_t, a_t); zero for an excluded terminal observation.
    """
    tau = len(traj)
    beliefs = np.empty((tau + 1, params.n_states))
    incs = np.zeros(tau)
    beliefs[0] = params.initial
    observed = traj.observed
    for t, (a, z) in enumerate(traj.steps):
        joint, norm = _step_likelihood(beliefs[t], a, z, params, observed[t])
        if not norm > ZERO_LIKELIHOOD:
            raise ZeroLikelihood(f"Pr(z={z} | b, a={a}) = {norm:.3g}", step=t)
        beliefs[t + 1] = _normalize(joint, norm)
        incs[t] = np.log(norm) if observed[t] else 0.0
    return beliefs, incs


def sample_step(s: int, a: int, params: IohmmParams, rng: np.random.Generator):
    """Draw ``s' ~ T(.|s, a)`` and then ``z ~ O(.|a, s')``."""
    S, A, Z = params.n_states, params.n_actions, params.n_observations
    if not (0 <= s < S and 0 <= a < A):
        raise IndexError(f"state {s} / action {a} out of range")
    s_next = int(rng.choice(S, p=params.transition[s, a]))
    z = int(rng.choice(Z, p=params.observation[a, s_next]))
    return s_next, z
