"""Neural control barrier functions learned from demonstrations by inverse constraint learning."""

from .dynamics import SystemModel, Trajectory, TrajectoryBatch, rollout_batch
from .evaluation import EvalReport, evaluate
from .icl import CbfLossWeights, IclConfig, train_icl_cbf, train_lcbf
from .neural import Mlp
from .safety_filter import CbfQpPolicy, GridHeuristicPolicy
from .scenarios import Scenario, generate_expert_demos, make_scenario

__all__ = [
    "CbfLossWeights", "CbfQpPolicy", "EvalReport", "GridHeuristicPolicy", "IclConfig", "Mlp", "Scenario",
    "SystemModel", "Trajectory", "TrajectoryBatch", "evaluate", "generate_expert_demos", "make_scenario",
    "rollout_batch", "train_icl_cbf", "train_lcbf",
]
__version__ = "0.1.0"
