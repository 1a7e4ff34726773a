"""
Models package for the trajectory planner
"""

from .trajectory import (
    ACTION_LEN,
    K_WAYPOINTS,
    Trajectory,
    TokenSequence,
    Vocabulary
)

from .scene import (
    Agent,
    BevGrid,
    Clip,
    CostField,
    EgoMotion,
    EgoState,
    Instruction,
    Scene
)

from .configs import (
    ChainConfig,
    ModelConfig,
    PerturbationConfig,
    PipelineConfig,
    RewardConfig,
    RLConfig,
    SceneConfig,
    TrainConfig
)

from .planning import (
    Candidate,
    ChainReport,
    ChainRow,
    EvalSummary,
    GoalProposal,
    PlanResult,
    RewardBreakdown,
    SceneReport,
    SweepRow
)

__all__ = [
    # Trajectory models
    "ACTION_LEN",
    "K_WAYPOINTS",
    "Trajectory",
    "TokenSequence",
    "Vocabulary",

    # Scene models
    "Agent",
    "BevGrid",
    "Clip",
    "CostField",
    "EgoMotion",
    "EgoState",
    "Instruction",
    "Scene",

    # Parameter groups
    "ChainConfig",
    "ModelConfig",
    "PerturbationConfig",
    "PipelineConfig",
    "RewardConfig",
    "RLConfig",
    "SceneConfig",
    "TrainConfig",

    # Planner outputs
    "Candidate",
    "ChainReport",
    "ChainRow",
    "EvalSummary",
    "GoalProposal",
    "PlanResult",
    "RewardBreakdown",
    "SceneReport",
    "SweepRow"
]
