"""
Pydantic models for planner outputs, rewards and reports
"""
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field


class RewardBreakdown(BaseModel):
    model_config = ConfigDict(frozen=True)

    nc: float = Field(..., ge=0, le=1)
    dac: float = Field(..., ge=0, le=1)
    ttc: float = Field(..., ge=0, le=1)
    comfort: float = Field(..., ge=0, le=1)
    ep: float = Field(..., ge=0, le=1)
    aggregate: float = Field(..., ge=0, le=100)


class GoalProposal(BaseModel):
    model_config = ConfigDict(frozen=True)

    x_token: int
    y_token: int
    probability: float = Field(..., gt=0, le=1)
    position: Tuple[float, float] = Field(..., description="Bin-center BEV position (m)")

    @property
    def tokens(self) -> Tuple[int, int]:
        return self.x_token, self.y_token


class Candidate(BaseModel):
    """One drafted and edited trajectory for a goal"""
    goal_index: int
    draw_index: int = 0
    pre_edit_tokens: List[int]
    post_edit_tokens: List[int]
    pre_edit: List[Tuple[float, float]]
    post_edit: List[Tuple[float, float]]
    confidence: float = Field(..., description="Goal probability")
    reward: Optional[RewardBreakdown] = None
    pre_edit_reward: Optional[RewardBreakdown] = None


class PlanResult(BaseModel):
    goals: List[GoalProposal]
    candidates: List[Candidate]
    selected: int = Field(..., description="Index into candidates of the returned plan")

    @property
    def selected_candidate(self) -> Candidate:
        return self.candidates[self.selected]


class SceneReport(BaseModel):
    """Per-scene evaluation record"""
    seed: int
    mode: str
    goals: List[GoalProposal]
    candidates: List[Candidate]
    selected: int
    single: RewardBreakdown
    single_pre_edit: RewardBreakdown
    oracle: Optional[RewardBreakdown] = None


class ChainRow(BaseModel):
    name: str
    prefill_ms_mean: float
    prefill_ms_p50: float
    prefill_ms_p90: float
    decode_ms_mean: float
    decode_ms_p50: float
    decode_ms_p90: float
    reward_mean: float
    reward_delta: float
    within_gate: bool


class ChainReport(BaseModel):
    rows: List[ChainRow]
    quality_gate: float
    timings: Dict[str, List[Tuple[float, float]]] = Field(
        default_factory=dict, description="Raw (prefill_ms, decode_ms) per iteration and row"
    )

    def row(self, name: str) -> ChainRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


class EvalSummary(BaseModel):
    """Corpus-level means of an evaluation run"""
    n_scenes: int
    single: RewardBreakdown
    single_pre_edit: RewardBreakdown
    oracle: Optional[RewardBreakdown] = None

    @property
    def edit_gain(self) -> float:
        return self.single.aggregate - self.single_pre_edit.aggregate


class SweepRow(BaseModel):
    """One point of a parameter sweep"""
    param: str
    value: float
    reward_mean: float
    reward_pre_edit_mean: float
    dac_mean: float
    n_scenes: int
