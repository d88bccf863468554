"""Query-side region cropping for multimodal re-ranking, at desk scale.

A linear-softmax policy decides per query whether to keep the full query
image or crop a region before candidates are scored, and is trained with
a decision-balanced group-relative policy gradient on ranking-improvement
rewards.
"""
from .config import ExperimentConfig
from .env import Action, BBox, Decision, EnvConfig, generate_instance
from .episode import Episode
from .metrics import MetricsReport, aggregate
from .parser import parse, serialize
from .policy import PolicyParams, build_anchors
from .reward import RewardWeights, full_reward, region_reward
from .rgrpo import TrainConfig, evaluate, train

__all__ = [
    "Action", "BBox", "Decision", "EnvConfig", "Episode", "ExperimentConfig", "MetricsReport", "PolicyParams",
    "RewardWeights", "TrainConfig", "aggregate", "build_anchors", "evaluate", "full_reward",
    "generate_instance", "parse", "region_reward", "serialize", "train",
]
