"""Post-hoc audits of demonstrated behavior under a learned model.

Two patterns are flagged per trajectory:

* belated: the learned policy's modal action was the test but the demo did
  something else, and a later test then produced a near-certain belief;
* uninformative: a test step whose factual belief change and largest
  counterfactual change both fall at or below
  ``mean - fraction * sd`` of the factual changes over all test steps in the
  dataset.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ZeroLikelihood
from .gradient import ThetaEstimate
from .iohmm import Dataset, IohmmParams, Trajectory, belief_trajectory, belief_update, observation_probabilities
from .policy import modal_action


@dataclass(frozen=True)
class AuditCriteria:
    boundary_confidence: float = 0.9
    informativeness_fraction: float = 0.5
    test_action: Optional[int] = None
    modal_action_rule: str = "modal"

    def __post_init__(self):
        if not 0 < self.boundary_confidence <= 1:
            raise ValueError("boundary_confidence must lie in (0, 1]")
        if not self.informativeness_fraction > 0:
            raise ValueError("informativeness_fraction must be > 0")
        if self.modal_action_rule != "modal":
            raise ValueError("only the modal-action rule is supported")

    def resolve(self, dataset: Optional[Dataset] = None) -> "AuditCriteria":
        if self.test_action is not None:
            return self
        test = (dataset.info.get("test_action") if dataset is not None else None)
        if test is None:
            raise ValueError("no test action given and none recorded in the dataset")
        return AuditCriteria(self.boundary_confidence, self.informativeness_fraction, int(test),
                             self.modal_action_rule)


def belief_change(b1, b2) -> float:
    return float(np.linalg.norm(np.asarray(b1, dtype=float) - np.asarray(b2, dtype=float)))


def counterfactual_updates(b, a: int, params: IohmmParams) -> dict:
    """``{z: (posterior, Pr(z | b, a))}`` for every observation.

    Impossible observations map to ``(None, 0.0)``.
    """
    probs = observation_probabilities(b, a, params)
    out = {}
    for z, p in enumerate(probs):
        try:
            out[z] = (belief_update(b, a, z, params), float(p))
        except ZeroLikelihood:
            out[z] = (None, 0.0)
    return out


def max_counterfactual_change(b, a: int, params: IohmmParams) -> float:
    return max((belief_change(b, post) for post, p in counterfactual_updates(b, a, params).values()
                if post is not None), default=0.0)


@dataclass(frozen=True)
class BelatedEvidence:
    belated: bool
    skipped_step: Optional[int] = None
    confirming_step: Optional[int] = None


def detect_belated(traj: Trajectory, model: ThetaEstimate, criteria: AuditCriteria) -> BelatedEvidence:
    """Steps are 0-based; ``confirming_step`` is the later test whose outcome gave certainty."""
    test = criteria.test_action
    beliefs, _ = belief_trajectory(traj, model.params)
    observed = traj.observed
    skipped = None
    for t, a in enumerate(traj.actions):
        if skipped is not None and a == test and observed[t] \
                and beliefs[t + 1].max() >= criteria.boundary_confidence:
            return BelatedEvidence(True, skipped, t)
        if skipped is None and a != test and modal_action(beliefs[t], model.policy) == test:
            skipped = t
    return BelatedEvidence(False)


def _test_step_changes(traj: Trajectory, model: ThetaEstimate, test: int):
    """(step, factual change, max counterfactual change) for each observed test step."""
    beliefs, _ = belief_trajectory(traj, model.params)
    observed = traj.observed
    out = []
    for t, a in enumerate(traj.actions):
        if a == test and observed[t]:
            out.append((t, belief_change(beliefs[t], beliefs[t + 1]),
                        max_counterfactual_change(beliefs[t], a, model.params)))
    return out


@dataclass(frozen=True)
class ChangeStats:
    mean: float
    sd: Optional[float]
    count: int

    def threshold(self, fraction: float) -> Optional[float]:
        if self.sd is None:
            return None
        return self.mean - fraction * self.sd


def factual_change_stats(dataset: Dataset, model: ThetaEstimate, criteria: AuditCriteria) -> ChangeStats:
    """Mean and sample sd of factual belief changes over every test step in ``dataset``."""
    criteria = criteria.resolve(dataset)
    changes = [c for tr in dataset.trajectories
               for _, c, _ in _test_step_changes(tr, model, criteria.test_action)]
    if not changes:
        return ChangeStats(float("nan"), None, 0)
    sd = float(np.std(changes, ddof=1)) if len(changes) > 1 else None
    return ChangeStats(float(np.mean(changes)), sd, len(changes))


def detect_uninformative(traj: Trajectory, model: ThetaEstimate, criteria: AuditCriteria,
                         stats: Optional[ChangeStats] = None) -> list:
    """0-based indices of uninformative test steps.

    ``stats`` should describe the whole dataset; when omitted the
    trajectory's own test steps are used.  Fewer than two test steps leave
    the sd undefined and nothing is flagged.
    """
    test = criteria.test_action
    changes = _test_step_changes(traj, model, test)
    if stats is None:
        values = [c for _, c, _ in changes]
        sd = float(np.std(values, ddof=1)) if len(values) > 1 else None
        stats = ChangeStats(float(np.mean(values)) if values else float("nan"), sd, len(values))
    thr = stats.threshold(criteria.informativeness_fraction)
    if thr is None:
        return []
    return [t for t, fact, cf in changes if fact <= thr and cf <= thr]


# ---------------------------------------------------------------------------
# cohorts and reports

def parse_predicate(spec: str) -> tuple:
    """``"key=value"`` becomes a predicate on trajectory metadata."""
    if "=" not in spec:
        raise ValueError(f"cohort predicate must look like key=value, got {spec!r}")
    key, value = spec.split("=", 1)

    def pred(traj: Trajectory, key=key.strip(), value=value.strip()):
        return str(traj.meta.get(key)) == value
    return spec, pred


@dataclass
class AuditReport:
    trajectories: list
    cohort_rows: list
    stats: ChangeStats
    criteria: AuditCriteria

    @property
    def belated_rate(self) -> float:
        return float(np.mean([r["belated"] for r in self.trajectories]))

    def to_dict(self) -> dict:
        return {
            "criteria": {"boundary_confidence": self.criteria.boundary_confidence,
                         "informativeness_fraction": self.criteria.informativeness_fraction,
                         "test_action": self.criteria.test_action},
            "factual_change": {"mean": self.stats.mean, "sd": self.stats.sd,
                               "test_steps": self.stats.count},
            "trajectories": self.trajectories,
            "cohorts": self.cohort_rows,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["cohort", "trajectories", "belated", "belated_rate", "test_steps",
                "uninformative", "uninformative_rate"]
        w = csv.DictWriter(buf, cols, lineterminator="\n")
        w.writeheader()
        for row in self.cohort_rows:
            w.writerow({k: row[k] for k in cols})
        return buf.getvalue()


def _cohort_row(name, rows):
    n = len(rows)
    belated = sum(r["belated"] for r in rows)
    tests = sum(r["test_steps"] for r in rows)
    unin = sum(len(r["uninformative_steps"]) for r in rows)
    return {"cohort": name, "trajectories": n, "belated": belated,
            "belated_rate": belated / n if n else None, "test_steps": tests,
            "uninformative": unin, "uninformative_rate": unin / tests if tests else None}


def audit_dataset(dataset: Dataset, model: ThetaEstimate, criteria: AuditCriteria = AuditCriteria(),
          cohorts=None) -> AuditReport:
    """Run both detectors on every trajectory and tabulate by cohort.

    ``cohorts`` maps a name to a predicate on :class:`Trajectory`, or is a
    list of ``"key=value"`` strings.  An ``all`` row is always included.
    """
    criteria = criteria.resolve(dataset)
    stats = factual_change_stats(dataset, model, criteria)
    rows = []
    for i, tr in enumerate(dataset.trajectories):
        ev = detect_belated(tr, model, criteria)
        rows.append({
            "index": i,
            "belated": ev.belated,
            "skipped_step": ev.skipped_step,
            "confirming_step": ev.confirming_step,
            "test_steps": int(np.sum((tr.actions == criteria.test_action) & tr.observed)),
            "uninformative_steps": detect_uninformative(tr, model, criteria, stats),
        })
    return AuditReport(rows, cohort_summary_rows(dataset, rows, cohorts), stats, criteria)


def cohort_summary_rows(dataset: Dataset, rows: list, cohorts=None) -> list:
    if cohorts is None:
        cohorts = {}
    elif not isinstance(cohorts, dict):
        cohorts = dict(parse_predicate(c) for c in cohorts)
    table = [_cohort_row("all", rows)]
    for name, pred in cohorts.items():
        table.append(_cohort_row(name, [r for r, tr in zip(rows, dataset.trajectories) if pred(tr)]))
    return table


def cohort_summary(dataset: Dataset, model: ThetaEstimate, cohort_predicates=None,
                   criteria: AuditCriteria = AuditCriteria()) -> list:
    """Frequency table of belated and uninformative findings per cohort."""
    return audit_dataset(dataset, model, criteria, cohort_predicates).cohort_rows
