"""
Pydantic models for synthetic scenes
"""
from enum import IntEnum
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator

from app.errors import ContractError
from app.models.trajectory import K_WAYPOINTS, Trajectory


class Instruction(IntEnum):
    KEEP_LANE = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STRAIGHT = 3


class EgoState(BaseModel):
    model_config = ConfigDict(frozen=True)

    speed: float = Field(..., ge=0, description="m/s")
    accel: float = Field(0.0, description="m/s^2")
    yaw_rate: float = Field(0.0, description="rad/s")

    def as_tuple(self) -> Tuple[float, float, float]:
        return self.speed, self.accel, self.yaw_rate


class BevGrid(BaseModel):
    """
    Ego-frame drivable-area raster.

    Row i spans y in [origin_y + i*res, origin_y + (i+1)*res), column j spans
    x in [origin_x + j*res, origin_x + (j+1)*res).
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    drivable: np.ndarray = Field(..., description="(H, W) boolean indicator")
    resolution: float = Field(0.5, gt=0)
    origin: Tuple[float, float] = Field((0.0, -16.0), description="(x, y) of the lower-left grid corner")

    @field_validator("drivable", mode="before")
    @classmethod
    def validate_drivable(cls, v):
        arr = np.array(v, dtype=bool)
        if arr.ndim != 2:
            raise ContractError(f"drivable grid must be 2-D, got shape {arr.shape}")
        if not arr.any():
            raise ContractError("drivable grid has no drivable cell")
        arr.setflags(write=False)
        return arr

    @field_serializer("drivable")
    def serialize_drivable(self, v: np.ndarray):
        return v.astype(int).tolist()

    @property
    def shape(self) -> Tuple[int, int]:
        return self.drivable.shape

    def cell_of(self, x: float, y: float):
        """(row, col) of the cell containing (x, y), or None when outside the grid"""
        col = int(np.floor((x - self.origin[0]) / self.resolution))
        row = int(np.floor((y - self.origin[1]) / self.resolution))
        h, w = self.shape
        if 0 <= row < h and 0 <= col < w:
            return row, col
        return None

    def is_drivable(self, x: float, y: float) -> bool:
        cell = self.cell_of(x, y)
        return cell is not None and bool(self.drivable[cell])

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        h, w = self.shape
        xs = self.origin[0] + (np.arange(w) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(h) + 0.5) * self.resolution
        return xs, ys


class Agent(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    length: float = Field(4.5, gt=0)
    width: float = Field(2.0, gt=0)
    states: np.ndarray = Field(..., description="(T, 3) rows of (x, y, heading); row k is time k*dt")

    @field_validator("states", mode="before")
    @classmethod
    def validate_states(cls, v):
        arr = np.array(v, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < K_WAYPOINTS:
            raise ContractError(f"agent states must have shape (>={K_WAYPOINTS}, 3), got {arr.shape}")
        arr.setflags(write=False)
        return arr

    @field_serializer("states")
    def serialize_states(self, v: np.ndarray):
        return v.tolist()


class Scene(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: BevGrid
    agents: List[Agent] = Field(default_factory=list)
    instruction: Instruction
    ego_state: EgoState
    expert: Trajectory
    seed: int
    attempts: int = Field(1, ge=1, description="Generator attempts needed for this seed")

    @model_validator(mode="after")
    def check_origin(self):
        if not self.grid.is_drivable(0.0, 0.0):
            raise ContractError("ego origin cell must be drivable")
        return self


class CostField(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    cost: np.ndarray = Field(..., description="(H, W) non-negative penalty")
    r_dac: float
    eps_safe: float


class EgoMotion(BaseModel):
    """Pose of the current ego frame expressed in the previous ego frame"""
    model_config = ConfigDict(frozen=True)

    dx: float = 0.0
    dy: float = 0.0
    dpsi: float = 0.0


class Clip(BaseModel):
    """Consecutive scenes sampled every ``frame_dt`` seconds along one drive"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    frames: List[Scene]
    motions: List[EgoMotion] = Field(..., description="motions[i] takes frame i-1 to frame i; motions[0] is identity")
    frame_dt: float = 0.5
    seed: int
