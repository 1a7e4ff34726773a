"""
Structure-aware trajectory perturbations for training the editor
"""
import logging
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from ..errors import ContractError, DegenerateInputError
from ..models.configs import PerturbationConfig
from ..models.trajectory import Trajectory
from ..utils.geometry import cumulative_arc_length, interpolate_along, rotation

logger = logging.getLogger(__name__)

PerturbationFamily = Literal["longitudinal", "lateral"]


def perturb_longitudinal(traj: Trajectory, beta: float) -> Trajectory:
    """Move waypoint i to arc length beta * d_i along the origin-prefixed polyline"""
    if not beta > 0:
        raise ContractError(f"beta must be positive, got {beta}")
    path = traj.with_origin()
    d = cumulative_arc_length(path)[1:]
    if d[-1] <= 0:
        raise DegenerateInputError("trajectory has zero arc length")
    if beta == 1.0:
        return traj
    moved = interpolate_along(path, beta * d)
    return Trajectory(waypoints=moved, timestep=traj.timestep)


def perturb_lateral(traj: Trajectory, alpha: float) -> Trajectory:
    """Rotate every waypoint about the ego origin by alpha radians"""
    if not np.isfinite(alpha):
        raise ContractError(f"alpha must be finite, got {alpha}")
    return Trajectory(waypoints=traj.waypoints @ rotation(alpha).T, timestep=traj.timestep)


class PerturbationDraw(BaseModel):
    """One sampled operator and the parameter it was drawn with"""
    model_config = ConfigDict(frozen=True)

    family: PerturbationFamily
    parameter: float

    def apply(self, traj: Trajectory) -> Trajectory:
        if self.family == "longitudinal":
            return perturb_longitudinal(traj, self.parameter)
        return perturb_lateral(traj, self.parameter)

    @property
    def is_identity(self) -> bool:
        return (self.family == "longitudinal" and self.parameter == 1.0) or (
            self.family == "lateral" and self.parameter == 0.0
        )


def sample_perturbation(rng: np.random.Generator, cfg: Optional[PerturbationConfig] = None) -> PerturbationDraw:
    """Draw a family from the mix weights, then beta ~ U[beta_min, beta_max] or alpha ~ U[-alpha_max, alpha_max]"""
    cfg = cfg or PerturbationConfig()
    weights = np.asarray(cfg.mix, dtype=np.float64)
    family = ("longitudinal", "lateral")[int(rng.choice(2, p=weights / weights.sum()))]
    if family == "longitudinal":
        parameter = float(rng.uniform(cfg.beta_min, cfg.beta_max))
    else:
        parameter = float(rng.uniform(-cfg.alpha_max, cfg.alpha_max)) + 0.0
    return PerturbationDraw(family=family, parameter=parameter)
