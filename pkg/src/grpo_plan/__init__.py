"""Desk-scale reasoning planner: synthetic driving world, token grammar,
log-linear policy, supervised and GRPO training, open-loop metrics."""

from .grammar import VOCAB, Response, build_response, parse, serialize
from .policy import PolicySnapshot, Role, load_checkpoint, save_checkpoint
from .rewards import RewardBreakdown, RewardWeights, composite_reward
from .world import MetaAction, Scene, Trajectory, generate_scene, generate_scenes, read_dataset, write_dataset

__version__ = "0.1.0"

__all__ = [
    "VOCAB",
    "MetaAction",
    "PolicySnapshot",
    "Response",
    "RewardBreakdown",
    "RewardWeights",
    "Role",
    "Scene",
    "Trajectory",
    "build_response",
    "composite_reward",
    "generate_scene",
    "generate_scenes",
    "load_checkpoint",
    "parse",
    "read_dataset",
    "save_checkpoint",
    "serialize",
    "write_dataset",
]
