"""Decision-boundary policy over the belief simplex.

pi(a | b) is a softmax of ``-eta * ||b - mu_a||^2``.  Means live on the
hyperplane ``sum(mu_a) = 1`` but may have negative components.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

MEAN_SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class BoundaryPolicy:
    eta: float
    means: np.ndarray  # (A, S)

    def __post_init__(self):
        eta = float(self.eta)
        if not np.isfinite(eta) or eta < 0:
            raise ValueError(f"eta must be finite and >= 0, got {eta!r}")
        means = np.array(self.means, dtype=float)
        if means.ndim != 2:
            raise ValueError("means must have shape (n_actions, n_states)")
        if not np.all(np.isfinite(means)):
            raise ValueError("means must be finite")
        bad = np.abs(means.sum(axis=1) - 1.0) > MEAN_SUM_TOL
        if np.any(bad):
            raise ValueError(f"mean vectors {np.flatnonzero(bad).tolist()} do not sum to 1")
        means.setflags(write=False)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "means", means)

    @property
    def n_actions(self):
        return self.means.shape[0]

    @property
    def n_states(self):
        return self.means.shape[1]

    def replace(self, **changes) -> "BoundaryPolicy":
        kw = dict(eta=self.eta, means=self.means)
        kw.update(changes)
        return BoundaryPolicy(**kw)

    def to_dict(self) -> dict:
        return {"eta": self.eta, "means": self.means.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundaryPolicy":
        return cls(float(d["eta"]), np.array(d["means"], dtype=float))


def squared_distances(b, means) -> np.ndarray:
    diff = np.asarray(b, dtype=float)[..., None, :] - means
    return np.einsum("...as,...as->...a", diff, diff)


def log_action_distribution(b, pol: BoundaryPolicy) -> np.ndarray:
    """Log of pi(. | b); broadcasts over leading belief dimensions."""
    logits = -pol.eta * squared_distances(b, pol.means)
    logits = logits - logits.max(axis=-1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))


def action_distribution(b, pol: BoundaryPolicy) -> np.ndarray:
    return np.exp(log_action_distribution(b, pol))


def log_prob(b, a: int, pol: BoundaryPolicy) -> float:
    return float(log_action_distribution(b, pol)[a])


def modal_action(b, pol: BoundaryPolicy) -> int:
    """Most likely action; exact ties go to the lowest action index."""
    d = squared_distances(b, pol.means)
    if pol.eta == 0:
        return 0
    return int(np.argmin(d))


def grad_log_prob_belief(b, a: int, pol: BoundaryPolicy) -> np.ndarray:
    """d log pi(a | b) / d b."""
    b = np.asarray(b, dtype=float)
    pi = action_distribution(b, pol)
    diffs = b - pol.means
    return -2 * pol.eta * diffs[a] + 2 * pol.eta * (pi @ diffs)


@dataclass(frozen=True)
class Hyperplane:
    """The set ``{b : normal . b = offset}``."""

    normal: np.ndarray
    offset: float

    def side(self, b) -> float:
        return float(np.dot(self.normal, b) - self.offset)


def decision_boundary(pol: BoundaryPolicy, a1: int, a2: int) -> Optional[Hyperplane]:
    """Beliefs equidistant from the means of ``a1`` and ``a2``.

    ``||b - mu1||^2 = ||b - mu2||^2`` reduces to
    ``2 (mu2 - mu1) . b = ||mu2||^2 - ||mu1||^2``.  Returns ``None`` when the
    two means coincide (every belief is equidistant).
    """
    if a1 == a2:
        raise ValueError("boundary needs two distinct actions")
    mu1, mu2 = pol.means[a1], pol.means[a2]
    normal = 2.0 * (mu2 - mu1)
    if np.allclose(normal, 0.0, atol=1e-15):
        return None
    return Hyperplane(normal, float(mu2 @ mu2 - mu1 @ mu1))


def boundary_crossing_1d(pol: BoundaryPolicy, a1: int, a2: int, state: int = 1) -> Optional[float]:
    """Where the a1/a2 boundary meets the edge of a two-state simplex.

    Returns ``p`` such that the belief with ``b(state) = p`` (the other state
    holding ``1 - p``) is equidistant from both means, or ``None`` if the
    boundary is degenerate or parallel to the edge.
    """
    if pol.n_states != 2:
        raise ValueError("boundary_crossing_1d needs a two-state policy")
    plane = decision_boundary(pol, a1, a2)
    if plane is None:
        return None
    other = 1 - state
    # b = e_other + p (e_state - e_other)
    slope = plane.normal[state] - plane.normal[other]
    if abs(slope) < 1e-15:
        return None
    return float((plane.offset - plane.normal[other]) / slope)
