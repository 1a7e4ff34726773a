"""
Planning API routes
Serve the loaded checkpoint: plan a scene, score a trajectory
"""
import logging
from typing import Any, Dict, List, Optional, Tuple

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field, ValidationError, model_validator

from app.errors import ConfigurationError, ContractError, PlannerError, RangeError, StaleCacheError
from app.models.planning import Candidate, GoalProposal, RewardBreakdown
from app.models.scene import Scene
from app.models.trajectory import Trajectory, Vocabulary
from app.registry import get_model, registry
from app.services.planner_service import plan
from app.services.scene_service import decode_scene, generate_scene

logger = logging.getLogger(__name__)
router = APIRouter()


class SceneRequest(BaseModel):
    seed: Optional[int] = None
    scene: Optional[Dict[str, Any]] = Field(None, description="Corpus scene record")

    @model_validator(mode="after")
    def check_source(self):
        if (self.seed is None) == (self.scene is None):
            raise ValueError("give exactly one of 'seed' or 'scene'")
        return self


class PlanRequest(SceneRequest):
    n_goals: Optional[int] = Field(None, ge=1)
    best_of: Optional[int] = Field(None, ge=1, description="Drafts per goal; enables best-of-N selection")


class ScoreRequest(SceneRequest):
    waypoints: List[Tuple[float, float]]


class PlanResponse(BaseModel):
    seed: int
    trajectory: List[Tuple[float, float]]
    goals: List[GoalProposal]
    candidates: List[Candidate]
    selected: int


def _status_for(error: PlannerError) -> int:
    if isinstance(error, (ConfigurationError, RangeError, ContractError)):
        return 400
    if isinstance(error, StaleCacheError):
        return 409
    return 500


def _resolve_scene(request: SceneRequest, vocab: Optional[Vocabulary] = None) -> Scene:
    if request.scene is not None:
        return decode_scene(request.scene)
    return generate_scene(request.seed, registry.scene_cfg, vocab)


@router.post("/plan", response_model=PlanResponse)
async def plan_scene(request: PlanRequest) -> PlanResponse:
    """Plan one scene with the loaded checkpoint"""
    model = get_model()
    if model is None:
        raise HTTPException(status_code=503, detail="no model loaded")
    try:
        updates: Dict[str, Any] = {}
        if request.n_goals:
            updates["n_goals"] = request.n_goals
        if request.best_of:
            updates.update(mode="best_of_n", draws_per_goal=request.best_of)
        cfg = registry.pipeline_cfg.model_copy(update=updates)
        scene = _resolve_scene(request, model.vocab)
        result = plan(scene, model, cfg, scorer=registry.scorer)
        return PlanResponse(
            seed=scene.seed,
            trajectory=result.selected_candidate.post_edit,
            goals=result.goals,
            candidates=result.candidates,
            selected=result.selected,
        )
    except HTTPException:
        raise
    except PlannerError as e:
        logger.error(f"Error planning scene: {e}")
        raise HTTPException(status_code=_status_for(e), detail=f"{e.category}: {e}")
    except Exception as e:
        logger.error(f"Error planning scene: {e}")
        raise HTTPException(status_code=500, detail="Internal server error")


@router.post("/score", response_model=RewardBreakdown)
async def score_trajectory(request: ScoreRequest) -> RewardBreakdown:
    """Reward breakdown of a trajectory in a scene; needs no model"""
    try:
        model = get_model()
        scene = _resolve_scene(request, model.vocab if model is not None else None)
        traj = Trajectory(waypoints=request.waypoints, timestep=scene.expert.timestep)
        return registry.scorer.score(traj, scene)
    except ValidationError as e:
        raise HTTPException(status_code=400, detail=f"contract: {e.errors()[0]['msg']}")
    except PlannerError as e:
        logger.error(f"Error scoring trajectory: {e}")
        raise HTTPException(status_code=_status_for(e), detail=f"{e.category}: {e}")
    except Exception as e:
        logger.error(f"Error scoring trajectory: {e}")
        raise HTTPException(status_code=500, detail="Internal server error")
