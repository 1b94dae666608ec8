"""On-disk formats: JSON Lines datasets with sidecars, JSON model files, manifests.

A dataset ``runs/diag.jsonl`` starts with a header line
``{"spaces": ..., "info": ...}`` followed by one trajectory per line.
Evaluation-only ground truth lives in ``runs/diag.truth.jsonl`` (one record
per trajectory, keyed by its 1-based line number after the header) and the
generating environment in ``runs/diag.env.json``.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .envs import EnvironmentSpec, GroundTruth, TruthRecord
from .gradient import ThetaEstimate
from .iohmm import Dataset, Spaces, Trajectory


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sidecar(path, kind: str) -> Path:
    path = Path(path)
    suffix = {"truth": ".truth.jsonl", "env": ".env.json"}[kind]
    return path.with_name(path.name[: -len(path.suffix)] + suffix if path.suffix else path.name + suffix)


def write_dataset(path, dataset: Dataset, truth: GroundTruth = None, env: EnvironmentSpec = None) -> list:
    """Write the dataset and any sidecars; returns every path written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [_dumps({"spaces": dataset.spaces.to_dict(), "info": dataset.info})]
    for tr in dataset.trajectories:
        lines.append(_dumps({"steps": tr.steps.tolist(), "terminal": tr.terminal, "meta": tr.meta}))
    path.write_text("\n".join(lines) + "\n")
    written = [path]
    if truth is not None:
        p = sidecar(path, "truth")
        p.write_text("".join(_dumps({"line": i + 1, **r.to_dict()}) + "\n"
                             for i, r in enumerate(truth.records)))
        written.append(p)
    if env is not None:
        p = sidecar(path, "env")
        p.write_text(json.dumps(env.to_dict(), sort_keys=True, indent=1) + "\n")
        written.append(p)
    return written


def read_dataset(path) -> Dataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if "spaces" not in header:
            raise ValueError(f"{path}: first line must be a header with 'spaces'")
        trajs = []
        for line in fh:
            if line.strip():
                d = json.loads(line)
                trajs.append(Trajectory(np.asarray(d["steps"], dtype=np.int64),
                                        bool(d.get("terminal", False)), d.get("meta") or {}))
    return Dataset(Spaces.from_dict(header["spaces"]), tuple(trajs), header.get("info") or {})


def read_truth(path):
    """Ground truth for the dataset at ``path``, or None when there is no sidecar."""
    p = sidecar(path, "truth")
    if not p.exists():
        return None
    records = {}
    for line in p.read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            records[int(d["line"])] = TruthRecord.from_dict(d)
    return GroundTruth(tuple(records[k] for k in sorted(records)), read_env(path))


def read_env(path):
    p = sidecar(path, "env")
    if not p.exists():
        return None
    return EnvironmentSpec.from_dict(json.loads(p.read_text()))


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")
    return path


def read_model(path) -> tuple:
    """(estimate, full JSON document) from a model file."""
    d = json.loads(Path(path).read_text())
    return ThetaEstimate.from_dict(d), d


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
