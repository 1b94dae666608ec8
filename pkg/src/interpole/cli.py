"""``interpole`` command line: simulate, train, evaluate, audit, export-plot.

Exit codes: 0 success, 1 usage or IO error, 2 fit stopped at the iteration
cap without converging, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import audit as audit_mod
from . import envs, kernels, learner, metrics, storage
from .errors import InterpoleError, NonFiniteValue, UnknownEnvironment, UnsupportedDimension, ZeroLikelihood
from .gradient import ThetaEstimate, parse_blocks
from .iohmm import belief_trajectory
from .policy import decision_boundary

log = logging.getLogger("interpole")

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def resolve_seed(value):
    if value is not None:
        return int(value)
    env = os.environ.get("INTERPOLE_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"INTERPOLE_SEED must be an integer, got {env!r}") from None
    return 0


def write_manifest(out, command, config, inputs, outputs, seed, started):
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "wall_clock_seconds": round(time.time() - started, 3),
        "inputs": {str(p): storage.sha256(p) for p in inputs if Path(p).exists()},
        "outputs": {str(p): storage.sha256(p) for p in outputs},
    }
    path = Path(str(out) + ".manifest.json")
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(args):
    started = time.time()
    seed = resolve_seed(args.seed)
    kernels.set_workers(args.workers)
    if args.spec:
        env = envs.EnvironmentSpec.from_dict(json.loads(Path(args.spec).read_text()))
    elif args.env:
        env = envs.make_env(args.env, seed)
    else:
        raise UsageError("give --env or --spec")
    if args.horizon:
        env = envs.EnvironmentSpec(env.true_params, env.agent_params, env.behavior, env.stop_actions,
                                   args.horizon, env.name, env.positive_action, env.test_action)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    dataset, truth = envs.generate_dataset(env, args.n, seed)
    written = storage.write_dataset(args.out, dataset, truth, env)
    config = {"env": args.env, "spec": args.spec, "n": args.n, "horizon": env.max_horizon}
    write_manifest(args.out, "simulate", config, [args.spec] if args.spec else [], written, seed, started)
    print(f"wrote {len(dataset)} trajectories to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

TRAIN_DEFAULTS = {
    "method": "joint", "freeze": "", "lr": 0.001, "max_iters": 20000, "patience": 100,
    "tol": 1e-8, "init": "warm", "known": None,
}


def _merge_config(args, defaults):
    cfg = dict(defaults)
    if getattr(args, "config", None):
        try:
            extra = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(extra) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        cfg.update(extra)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _known_values(source, data_path):
    """Frozen-block values from a model file, an environment file or the dataset's env sidecar."""
    if source:
        d = json.loads(Path(source).read_text())
        if "true_params" in d:
            env = envs.EnvironmentSpec.from_dict(d)
        else:
            est = ThetaEstimate.from_dict(d)
            return {"T": est.params.transition, "O": est.params.observation, "b1": est.params.initial,
                    "eta": est.policy.eta, "means": est.policy.means}
    else:
        env = storage.read_env(data_path)
        if env is None:
            return None
    a, pol = env.agent_params, env.behavior
    return {"T": a.transition, "O": a.observation, "b1": a.initial, "eta": pol.eta, "means": pol.means}


def cmd_train(args):
    started = time.time()
    cfg = _merge_config(args, TRAIN_DEFAULTS)
    seed = resolve_seed(args.seed)
    dataset = storage.read_dataset(args.data)
    try:
        freeze = parse_blocks(cfg["freeze"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    known = _known_values(cfg["known"], args.data)
    if freeze and known is None:
        raise UsageError("frozen blocks need values: pass --known or keep the .env.json sidecar")
    known = {k: v for k, v in (known or {}).items() if k in freeze}
    try:
        config = learner.FitConfig(learning_rate=cfg["lr"], max_iterations=cfg["max_iters"],
                                   patience=cfg["patience"], seed=seed,
                                   improvement_tolerance=cfg["tol"], workers=args.workers)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    init = learner.init_random(dataset.spaces, seed, freeze, known)
    if cfg["init"] == "warm" and config.max_iterations > 0:
        init = learner.warm_start(dataset, init, config=config)
    elif cfg["init"] not in ("warm", "random"):
        raise UsageError("--init must be warm or random")
    if cfg["method"] == "joint":
        report = learner.fit(dataset, init, config=config)
    elif cfg["method"] == "two-stage":
        report = learner.two_stage_fit(dataset, init, config=config)
    else:
        raise UsageError("--method must be joint or two-stage")
    doc = report.to_dict()
    doc["config"] = config.to_dict()
    out = storage.write_json(args.out, doc)
    write_manifest(args.out, "train", dict(cfg, seed=seed), [args.data], [out], seed, started)
    print(f"{report.method} fit: {report.iterations_run} iterations, "
          f"log posterior {report.log_posterior:.6f}, converged={report.converged}")
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


# ---------------------------------------------------------------------------
# evaluate / audit

def cmd_evaluate(args):
    started = time.time()
    dataset = storage.read_dataset(args.data)
    model, _ = storage.read_model(args.model)
    truth = None if args.no_truth else storage.read_truth(args.data)
    report = metrics.evaluate(dataset, model, truth, align=not args.no_align)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    outputs = [out]
    if args.csv:
        Path(args.csv).write_text(report.to_csv_row())
        outputs.append(Path(args.csv))
    write_manifest(args.out, "evaluate", {"no_truth": args.no_truth, "no_align": args.no_align},
                   [args.data, args.model], outputs, None, started)
    for k, v in report.metrics().items():
        print(f"{k}: {v:.6g}")
    return EXIT_OK


def cmd_audit(args):
    started = time.time()
    dataset = storage.read_dataset(args.data)
    model, _ = storage.read_model(args.model)
    try:
        criteria = audit_mod.AuditCriteria(args.confidence, args.fraction, args.test_action).resolve(dataset)
        report = audit_mod.audit_dataset(dataset, model, criteria, args.cohort or [])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    outputs = [out]
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
        outputs.append(Path(args.csv))
    write_manifest(args.out, "audit", {"confidence": args.confidence, "fraction": args.fraction,
                                       "test_action": criteria.test_action, "cohort": args.cohort or []},
                   [args.data, args.model], outputs, None, started)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


# ---------------------------------------------------------------------------
# export-plot

_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3.0) / 2.0]])


def simplex_coordinates(b) -> tuple:
    """2-D plot coordinates: b(s_1) on a line for two states, barycentric for three."""
    b = np.asarray(b, dtype=float)
    if b.shape[-1] == 2:
        return float(b[1]), 0.0
    if b.shape[-1] == 3:
        x, y = b @ _CORNERS
        return float(x), float(y)
    raise UnsupportedDimension(f"plot export supports 2 or 3 states, got {b.shape[-1]}")


def boundary_segment(normal, offset):
    """Endpoints (as beliefs) of ``{b in simplex : normal . b = offset}``, or None."""
    S = len(normal)
    points = []
    for i in range(S):
        for j in range(i + 1, S):
            # b = t e_i + (1 - t) e_j
            denom = normal[i] - normal[j]
            if abs(denom) < 1e-15:
                continue
            t = (offset - normal[j]) / denom
            if -1e-12 <= t <= 1 + 1e-12:
                b = np.zeros(S)
                b[i], b[j] = t, 1 - t
                if not any(np.allclose(b, p) for p in points):
                    points.append(np.clip(b, 0, 1))
    if not points:
        return None
    return points[0], points[-1]


def plot_rows(model: ThetaEstimate, dataset) -> list:
    S = model.params.n_states
    if S not in (2, 3):
        raise UnsupportedDimension(f"plot export supports 2 or 3 states, got {S}")
    rows = []
    probs = lambda b: [repr(float(x)) for x in b]
    for i, tr in enumerate(dataset.trajectories):
        beliefs, _ = belief_trajectory(tr, model.params)
        for t, b in enumerate(beliefs):
            x, y = simplex_coordinates(b)
            action = int(tr.actions[t]) if t < len(tr) else ""
            rows.append(["belief", i, t, action, "", x, y, "", ""] + probs(b))
    A = model.params.n_actions
    for a1 in range(A):
        for a2 in range(a1 + 1, A):
            h = decision_boundary(model.policy, a1, a2)
            if h is None:
                continue
            seg = boundary_segment(h.normal, h.offset)
            if seg is None:
                continue
            (x1, y1), (x2, y2) = simplex_coordinates(seg[0]), simplex_coordinates(seg[1])
            rows.append(["boundary", "", "", a1, a2, x1, y1, x2, y2] + [""] * S)
    for a in range(A):
        mu = model.policy.means[a]
        x, y = simplex_coordinates(mu)
        rows.append(["mean", "", "", a, "", x, y, "", ""] + probs(mu))
    return rows


def cmd_export_plot(args):
    started = time.time()
    dataset = storage.read_dataset(args.data)
    model, _ = storage.read_model(args.model)
    rows = plot_rows(model, dataset)
    S = model.params.n_states
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "trajectory", "step", "action", "other_action", "x", "y", "x2", "y2"]
                   + [f"p{s}" for s in range(S)])
        w.writerows(rows)
    write_manifest(args.out, "export-plot", {}, [args.data, args.model], [out], None, started)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="interpole", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate demonstrations from a reference environment")
    s.add_argument("--env", choices=sorted(envs.ENVIRONMENTS))
    s.add_argument("--spec", help="environment JSON file instead of --env")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--seed", type=int)
    s.add_argument("--horizon", type=int, help="override the environment's max horizon")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="fit decision dynamics and boundaries")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file of defaults; flags take precedence")
    t.add_argument("--method", choices=["joint", "two-stage"])
    t.add_argument("--freeze", help="comma-separated blocks among T,O,b1,eta,means")
    t.add_argument("--known", help="model or environment file supplying frozen values")
    t.add_argument("--init", choices=["warm", "random"])
    t.add_argument("--lr", type=float)
    t.add_argument("--max-iters", dest="max_iters", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--tol", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="accuracy metrics for a trained model")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--csv")
    e.add_argument("--no-truth", action="store_true", help="ignore the ground-truth sidecar")
    e.add_argument("--no-align", action="store_true", help="skip state-label alignment")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("audit", help="flag belated decisions and uninformative tests")
    a.add_argument("--data", required=True)
    a.add_argument("--model", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--csv")
    a.add_argument("--confidence", type=float, default=0.9)
    a.add_argument("--fraction", type=float, default=0.5)
    a.add_argument("--test-action", type=int)
    a.add_argument("--cohort", action="append", help="key=value metadata predicate, repeatable")
    a.set_defaults(func=cmd_audit)

    x = sub.add_parser("export-plot", help="CSV of simplex coordinates, boundaries and means")
    x.add_argument("--model", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, UnknownEnvironment, UnsupportedDimension, OSError, ValueError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"interpole: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteValue, ZeroLikelihood, FloatingPointError) as exc:
        print(f"interpole: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InterpoleError as exc:
        print(f"interpole: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
