"""Interpretable policy learning for partially observed sequential decisions.

The model pairs an input-output HMM for the agent's belief updates with a
softmax policy over distances to per-action mean vectors on the belief
simplex.  Both are learned jointly by MAP estimation.
"""
from .audit import AuditCriteria, AuditReport, audit_dataset, cohort_summary, counterfactual_updates, \
    detect_belated, detect_uninformative
from .envs import EnvironmentSpec, GroundTruth, generate_dataset, make_adni_like, make_bias, \
    make_decision_tree_example, make_diag, make_env
from .errors import InterpoleError, NonFiniteValue, UnknownEnvironment, UnsupportedDimension, ZeroLikelihood
from .gradient import ThetaEstimate, ThetaGradient, expected_log_likelihood, grad_Q
from .inference import Posteriors, e_step, posteriors
from .iohmm import Dataset, IohmmParams, Spaces, Trajectory, belief_trajectory, belief_update, sample_step
from .learner import FitConfig, FitReport, Prior, fit, init_random, log_posterior, project, \
    two_stage_fit, warm_start
from .metrics import EvalReport, action_matching, belief_mismatch, evaluate, policy_mismatch, \
    stopping_time_error
from .policy import BoundaryPolicy, action_distribution, decision_boundary, modal_action

__version__ = "0.1.0"
