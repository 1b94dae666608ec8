"""Reference decision environments and a behavior simulator.

An environment pairs the world's dynamics with the agent's subjective
dynamics (the two differ in BIAS) and a boundary policy evaluated on the
agent's own beliefs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import UnknownEnvironment
from .iohmm import Dataset, IohmmParams, Spaces, Trajectory, belief_update, sample_step
from .policy import BoundaryPolicy, action_distribution

# DIAG / BIAS indices
S_NEG, S_POS = 0, 1
A_EQ, A_NEG, A_POS = 0, 1, 2
Z_NEG, Z_POS = 0, 1


@dataclass(frozen=True, eq=False)
class EnvironmentSpec:
    true_params: IohmmParams
    agent_params: IohmmParams
    behavior: BoundaryPolicy
    stop_actions: frozenset = frozenset()
    max_horizon: int = 50
    name: str = "custom"
    positive_action: Optional[int] = None
    test_action: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "stop_actions", frozenset(int(a) for a in self.stop_actions))
        if self.max_horizon < 1:
            raise ValueError("max_horizon must be >= 1")
        shape = (self.true_params.n_states, self.true_params.n_actions,
                 self.true_params.n_observations)
        if (self.agent_params.n_states, self.agent_params.n_actions,
                self.agent_params.n_observations) != shape:
            raise ValueError("agent and true parameters disagree on dimensions")
        if self.behavior.means.shape != shape[1::-1]:
            raise ValueError("behavior means must have shape (n_actions, n_states)")
        for a in self.stop_actions | {x for x in (self.positive_action, self.test_action) if x is not None}:
            if not 0 <= a < shape[1]:
                raise ValueError(f"action {a} out of range")

    @property
    def spaces(self) -> Spaces:
        p = self.true_params
        return p.spaces or Spaces(p.n_states, p.n_actions, p.n_observations)

    @property
    def info(self) -> dict:
        return {"env": self.name, "stop_actions": sorted(self.stop_actions),
                "max_horizon": self.max_horizon, "positive_action": self.positive_action,
                "test_action": self.test_action}

    def to_dict(self) -> dict:
        d = self.info
        d.update({"true_params": self.true_params.to_dict(),
                  "agent_params": self.agent_params.to_dict(),
                  "behavior": self.behavior.to_dict()})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentSpec":
        true = IohmmParams.from_dict(d["true_params"])
        agent = IohmmParams.from_dict(d.get("agent_params") or d["true_params"])
        return cls(true, agent, BoundaryPolicy.from_dict(d["behavior"]),
                   frozenset(d.get("stop_actions", ())), int(d.get("max_horizon", 50)),
                   d.get("env", d.get("name", "custom")), d.get("positive_action"),
                   d.get("test_action"))


@dataclass(frozen=True, eq=False)
class TruthRecord:
    """Evaluation-only facts about one generated trajectory."""

    beliefs: np.ndarray         # (tau + 1, S) agent beliefs
    action_probs: np.ndarray    # (tau, A) behavior distribution at each step
    states: np.ndarray          # (tau + 1,) hidden states

    def to_dict(self) -> dict:
        return {"beliefs": self.beliefs.tolist(), "action_probs": self.action_probs.tolist(),
                "states": self.states.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TruthRecord":
        return cls(np.asarray(d["beliefs"], dtype=float), np.asarray(d["action_probs"], dtype=float),
                   np.asarray(d["states"], dtype=np.int64))


@dataclass(frozen=True, eq=False)
class GroundTruth:
    records: tuple
    env: Optional[EnvironmentSpec] = None

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i) -> TruthRecord:
        return self.records[i]

    @property
    def beliefs(self):
        return [r.beliefs for r in self.records]

    @property
    def action_probs(self):
        return [r.action_probs for r in self.records]

    @property
    def states(self):
        return [r.states for r in self.records]


# ---------------------------------------------------------------------------
# DIAG and BIAS

def _diag_observation(p_wrong_pos=0.4, p_wrong_neg=0.4):
    """O[a, s', z]; only a= is informative, the stop actions emit uniform noise."""
    O = np.full((3, 2, 2), 0.5)
    O[A_EQ, S_NEG] = (1 - p_wrong_neg, p_wrong_neg)
    O[A_EQ, S_POS] = (p_wrong_pos, 1 - p_wrong_pos)
    return O


def _diag_spaces():
    return Spaces(2, 3, 2, ("s-", "s+"), ("a=", "a-", "a+"), ("z-", "z+"))


def _diag_policy():
    means = np.array([[0.5, 0.5], [1.3, -0.3], [-0.3, 1.3]])
    return BoundaryPolicy(10.0, means)


def make_diag() -> EnvironmentSpec:
    spaces = _diag_spaces()
    T = np.repeat(np.eye(2)[:, None, :], 3, axis=1)
    params = IohmmParams(T, _diag_observation(), np.array([0.5, 0.5]), spaces)
    return EnvironmentSpec(params, params, _diag_policy(), frozenset({A_NEG, A_POS}), 50,
                           "diag", positive_action=A_POS, test_action=A_EQ)


def make_bias() -> EnvironmentSpec:
    """DIAG whose agent believes O(z-|a=,s+) = 0.2 while the world keeps 0.4."""
    diag = make_diag()
    agent = diag.true_params.replace(observation=_diag_observation(p_wrong_pos=0.2))
    return EnvironmentSpec(diag.true_params, agent, diag.behavior, diag.stop_actions,
                           diag.max_horizon, "bias", diag.positive_action, diag.test_action)


# ---------------------------------------------------------------------------
# ADNI-like

ADNI_STATES = ("NL", "MCI", "Dementia")
ADNI_ACTIONS = ("no-MRI", "MRI")
MRI_OUTCOMES = ("not-ordered", "above-avg", "avg", "below-avg")
CDR_LEVELS = ("cdr-0", "cdr-0.5-4", "cdr-4.5+")


def adni_observation_index(mri: int, cdr: int) -> int:
    return mri * len(CDR_LEVELS) + cdr


def make_adni_like(seed: int = 0) -> EnvironmentSpec:
    """Three-stage progression with MRI ordering as the only action choice.

    Observations pair an MRI outcome with a CDR-SB category.  Without an MRI
    the outcome is "not ordered" with probability one.  Transition rates and
    emission rows are drawn from ``seed`` around informative modes.
    """
    rng = np.random.default_rng(seed)
    S, A, n_mri, n_cdr = 3, 2, len(MRI_OUTCOMES), len(CDR_LEVELS)
    Z = n_mri * n_cdr
    p_mci, p_dem = rng.uniform(0.05, 0.2, size=2)
    step = np.array([[1 - p_mci, p_mci, 0.0], [0.0, 1 - p_dem, p_dem], [0.0, 0.0, 1.0]])
    T = np.repeat(step[:, None, :], A, axis=1)
    cdr = np.stack([rng.dirichlet(1.0 + 8.0 * np.eye(n_cdr)[s]) for s in range(S)])
    volume = np.stack([rng.dirichlet(1.0 + 8.0 * np.eye(3)[s]) for s in range(S)])
    O = np.zeros((A, S, Z))
    for s in range(S):
        for c in range(n_cdr):
            O[0, s, adni_observation_index(0, c)] = cdr[s, c]
            for m in range(3):
                O[1, s, adni_observation_index(m + 1, c)] = volume[s, m] * cdr[s, c]
    b1 = rng.dirichlet(np.array([10.0, 6.0, 2.0]))
    labels = tuple(f"{m}/{c}" for m in MRI_OUTCOMES for c in CDR_LEVELS)
    spaces = Spaces(S, A, Z, ADNI_STATES, ADNI_ACTIONS, labels)
    params = IohmmParams(T, O, b1, spaces)
    # MRI is favored under uncertainty about MCI
    means = np.array([[1.0, -0.5, 0.5], [-0.5, 1.5, 0.0]])
    return EnvironmentSpec(params, params, BoundaryPolicy(1.0, means), frozenset(), 6,
                           "adni-like", positive_action=1, test_action=1)


# ---------------------------------------------------------------------------
# decision tree

TREE_STATES = ("ini", "hlt", "dis", "dsa", "dsb")
TREE_ACTIONS = ("tst-dis", "tst-typ", "stp-hlt", "stp-dsa", "stp-dsb")
TREE_OBS = ("neg", "pos", "type-a", "type-b", "none")


def make_decision_tree_example(prevalence: float = 0.3, p_type_a: float = 0.5,
                               accuracy: float = 1.0) -> EnvironmentSpec:
    """Test for disease, then for its type, then declare.

    With ``accuracy=1`` every test outcome is deterministic given the next
    state; lower values mix each emission row with a uniform one.
    """
    ini, hlt, dis, dsa, dsb = range(5)
    tst_dis, tst_typ = 0, 1
    S = A = Z = 5
    T = np.repeat(np.eye(S)[:, None, :], A, axis=1)
    T[ini, tst_dis] = 0.0
    T[ini, tst_dis, hlt] = 1 - prevalence
    T[ini, tst_dis, dis] = prevalence
    T[dis, tst_typ] = 0.0
    T[dis, tst_typ, dsa] = p_type_a
    T[dis, tst_typ, dsb] = 1 - p_type_a
    none, neg, pos, ta, tb = 4, 0, 1, 2, 3
    O = np.zeros((A, S, Z))
    O[:, :, none] = 1.0
    O[tst_dis] = 0.0
    O[tst_dis, ini, none] = 1.0
    O[tst_dis, hlt, neg] = 1.0
    O[tst_dis, [dis, dsa, dsb], pos] = 1.0
    O[tst_typ, dsa] = np.eye(Z)[ta]
    O[tst_typ, dsb] = np.eye(Z)[tb]
    if not 0 < accuracy <= 1:
        raise ValueError("accuracy must lie in (0, 1]")
    O = accuracy * O + (1 - accuracy) / Z
    b1 = np.eye(S)[ini]
    params = IohmmParams(T, O, b1, Spaces(S, A, Z, TREE_STATES, TREE_ACTIONS, TREE_OBS))
    region = [ini, dis, hlt, dsa, dsb]      # the state each action is nearest to
    means = np.eye(S)[region]
    return EnvironmentSpec(params, params, BoundaryPolicy(10.0, means),
                           frozenset({2, 3, 4}), 10, "tree", positive_action=tst_dis,
                           test_action=tst_dis)


ENVIRONMENTS = {
    "diag": lambda seed: make_diag(),
    "bias": lambda seed: make_bias(),
    "adni-like": make_adni_like,
    "tree": lambda seed: make_decision_tree_example(),
}


def make_env(name: str, seed: int = 0) -> EnvironmentSpec:
    try:
        return ENVIRONMENTS[name](seed)
    except KeyError:
        raise UnknownEnvironment(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None


# ---------------------------------------------------------------------------
# simulation

def simulate_trajectory(env: EnvironmentSpec, rng: np.random.Generator, meta=None):
    true, agent = env.true_params, env.agent_params
    s = int(rng.choice(true.n_states, p=true.initial))
    b = np.array(agent.initial)
    beliefs, probs, states, steps = [b], [], [s], []
    terminal = False
    for _ in range(env.max_horizon):
        pi = action_distribution(b, env.behavior)
        a = int(rng.choice(len(pi), p=pi))
        probs.append(pi)
        if a in env.stop_actions:
            s = int(rng.choice(true.n_states, p=true.transition[s, a]))
            b = belief_update(b, a, 0, agent, observed=False)
            steps.append((a, 0))
            terminal = True
        else:
            s, z = sample_step(s, a, true, rng)
            b = belief_update(b, a, z, agent)
            steps.append((a, z))
        beliefs.append(b)
        states.append(s)
        if terminal:
            break
    traj = Trajectory(np.array(steps), terminal, dict(meta or {}))
    return traj, TruthRecord(np.array(beliefs), np.array(probs), np.array(states))


def generate_dataset(env: EnvironmentSpec, n: int, seed: int = 0):
    """Sample ``n`` demonstrations; trajectory ``i`` uses the stream seeded by ``seed + i``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    trajs, records = [], []
    for i in range(n):
        traj, rec = simulate_trajectory(env, np.random.default_rng(seed + i))
        trajs.append(traj)
        records.append(rec)
    return Dataset(env.spaces, tuple(trajs), env.info), GroundTruth(tuple(records), env)
