"""Accuracy metrics for a learned model against ground truth or held-out behavior."""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .gradient import ThetaEstimate
from .iohmm import Dataset, belief_trajectory
from .policy import action_distribution, modal_action


def kl(p, q) -> float:
    """KL(p || q) in nats; 0 log 0 = 0 and +inf where q lacks p's support."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    if np.any(q[mask] <= 0):
        return float("inf")
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def _sequence_kl(ps, qs) -> float:
    ps, qs = np.asarray(ps), np.asarray(qs)
    if ps.shape != qs.shape:
        raise ValueError(f"sequence shapes differ: {ps.shape} vs {qs.shape}")
    return float(sum(kl(p, q) for p, q in zip(ps, qs)))


def per_trajectory_kl(true_seqs, est_seqs) -> np.ndarray:
    if len(true_seqs) != len(est_seqs):
        raise ValueError("different numbers of trajectories")
    return np.array([_sequence_kl(p, q) for p, q in zip(true_seqs, est_seqs)])


def belief_mismatch(true_beliefs, est_beliefs) -> float:
    """Mean over trajectories of sum_t KL(b_t || b_hat_t).

    Either argument may be a single (tau, S) sequence or a list of them.
    """
    if np.ndim(true_beliefs[0]) == 1:
        true_beliefs, est_beliefs = [true_beliefs], [est_beliefs]
    return float(per_trajectory_kl(true_beliefs, est_beliefs).mean())


def policy_mismatch(true_policy_dists, est_policy_dists) -> float:
    """Mean over trajectories of sum_t KL(pi_b(.|b_t) || pi_hat(.|b_hat_t))."""
    return belief_mismatch(true_policy_dists, est_policy_dists)


def model_beliefs(dataset: Dataset, model: ThetaEstimate):
    """Learned beliefs at every decision step, one (tau, S) array per trajectory."""
    return [belief_trajectory(tr, model.params)[0][:-1] for tr in dataset.trajectories]


def model_action_dists(beliefs, model: ThetaEstimate):
    return [action_distribution(b, model.policy) for b in beliefs]


def stopping_times(dataset: Dataset, model: ThetaEstimate, stop_actions, cap: int) -> np.ndarray:
    """Step (1-based) at which the model's modal action first stops, or ``cap``.

    Beliefs are filtered along each demonstration's own actions and
    observations, so the model can only stop within the demonstrated span.
    """
    stop = set(int(a) for a in stop_actions)
    out = np.full(len(dataset), cap, dtype=float)
    for i, beliefs in enumerate(model_beliefs(dataset, model)):
        for t, b in enumerate(beliefs):
            if modal_action(b, model.policy) in stop:
                out[i] = t + 1
                break
    return out


def stopping_time_error(dataset: Dataset, model: ThetaEstimate, stop_actions=None, cap=None) -> float:
    """Mean |tau_demo - tau_model| under greedy modal replay.

    Without stop actions no model ever stops, so the error reduces to
    ``mean(cap - tau_demo)``.
    """
    if stop_actions is None:
        stop_actions = dataset.info.get("stop_actions", ())
    if cap is None:
        cap = dataset.info.get("max_horizon") or max(len(t) for t in dataset.trajectories)
    demo = np.array([len(t) for t in dataset.trajectories], dtype=float)
    return float(np.abs(demo - stopping_times(dataset, model, stop_actions, cap)).mean())


# ---------------------------------------------------------------------------
# action matching

def brier(probs, labels) -> float:
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=float)
    return float(np.mean((probs - labels) ** 2))


def _ranks(x):
    """Ranks from 1 with ties sharing their average rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> Optional[float]:
    """Mann-Whitney estimate; None when only one class is present."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return None
    r = _ranks(scores)
    return float((r[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auprc(scores, labels) -> Optional[float]:
    """Area under the step-interpolated precision-recall curve (average precision)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = labels.sum()
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # one PR point per distinct threshold
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def action_matching(predicted_dists, actual_actions, positive_action: int) -> dict:
    """Brier, AUROC and AUPRC for the one-vs-rest ``positive_action`` prediction."""
    p = np.asarray(predicted_dists, dtype=float)
    p = p[:, positive_action] if p.ndim == 2 else p
    y = (np.asarray(actual_actions) == positive_action).astype(float)
    return {"brier": brier(p, y), "auroc": auroc(p, y), "auprc": auprc(p, y)}


# ---------------------------------------------------------------------------
# state-label alignment

def permute_states(model: ThetaEstimate, perm) -> ThetaEstimate:
    """Relabel states so that new state ``k`` is old state ``perm[k]``."""
    perm = np.asarray(perm)
    p = model.params
    params = p.replace(transition=p.transition[perm][:, :, perm],
                       observation=p.observation[:, perm, :],
                       initial=p.initial[perm])
    policy = model.policy.replace(means=model.policy.means[:, perm])
    return model.replace(params=params, policy=policy)


def align_states(model: ThetaEstimate, dataset: Dataset, true_beliefs) -> tuple:
    """Permutation of the model's state labels minimizing belief mismatch.

    State labels are only identified up to relabeling; returns the aligned
    model and the permutation.
    """
    S = model.params.n_states
    best = None
    for perm in itertools.permutations(range(S)):
        cand = permute_states(model, perm)
        try:
            value = belief_mismatch(true_beliefs, model_beliefs(dataset, cand))
        except Exception:
            continue
        if best is None or value < best[0]:
            best = (value, cand, perm)
    if best is None:
        return model, tuple(range(S))
    return best[1], best[2]


# ---------------------------------------------------------------------------
# report

METRICS = ("belief_mismatch", "policy_mismatch", "stopping_time_error", "brier", "auroc", "auprc")


@dataclass
class EvalReport:
    belief_mismatch: Optional[float] = None
    policy_mismatch: Optional[float] = None
    stopping_time_error: Optional[float] = None
    brier: Optional[float] = None
    auroc: Optional[float] = None
    auprc: Optional[float] = None
    per_trajectory: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in METRICS if getattr(self, k) is not None}

    def to_dict(self) -> dict:
        d = self.metrics()
        d["per_trajectory"] = {k: [float(x) for x in v] for k, v in self.per_trajectory.items()}
        if self.info:
            d["info"] = self.info
        return d

    def to_json(self) -> str:
        # json has no infinity; a support violation is reported as the string "inf"
        def clean(x):
            if isinstance(x, float) and not np.isfinite(x):
                return str(x)
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, list):
                return [clean(v) for v in x]
            return x
        return json.dumps(clean(self.to_dict()), indent=2, sort_keys=True)

    def to_csv_row(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS)
        w.writerow(["" if getattr(self, k) is None else repr(float(getattr(self, k))) for k in METRICS])
        return buf.getvalue()


def evaluate(dataset: Dataset, model: ThetaEstimate, truth=None, align: bool = True,
             positive_action: Optional[int] = None) -> EvalReport:
    """All applicable metrics; belief and policy mismatch need ``truth``.

    ``truth`` is a :class:`~interpole.envs.GroundTruth`.  With ``align`` the
    model's state labels are first matched to the truth's.
    """
    report = EvalReport()
    info = dataset.info
    if truth is not None:
        true_beliefs = [r.beliefs[:len(tr)] for r, tr in zip(truth.records, dataset.trajectories)]
        if align:
            model, perm = align_states(model, dataset, true_beliefs)
            report.info["state_permutation"] = list(map(int, perm))
    beliefs = model_beliefs(dataset, model)
    dists = model_action_dists(beliefs, model)
    if truth is not None:
        b = per_trajectory_kl(true_beliefs, beliefs)
        p = per_trajectory_kl([r.action_probs for r in truth.records], dists)
        report.belief_mismatch, report.policy_mismatch = float(b.mean()), float(p.mean())
        report.per_trajectory["belief_mismatch"] = b.tolist()
        report.per_trajectory["policy_mismatch"] = p.tolist()
    report.stopping_time_error = stopping_time_error(dataset, model)
    pos = positive_action if positive_action is not None else info.get("positive_action")
    if pos is not None:
        scores = np.concatenate([d[:, pos] for d in dists])
        actions = np.concatenate([tr.actions for tr in dataset.trajectories])
        m = action_matching(scores, actions, pos)
        report.brier, report.auroc, report.auprc = m["brier"], m["auroc"], m["auprc"]
        report.info["positive_action"] = int(pos)
    return report
