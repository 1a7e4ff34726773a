"""
Pydantic models for the coordinate vocabulary, trajectories and token blocks
"""
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator

from app.errors import ConfigurationError, ContractError

K_WAYPOINTS = 8
ACTION_LEN = 2 * K_WAYPOINTS
GOAL_POSITIONS = (ACTION_LEN - 2, ACTION_LEN - 1)


class Vocabulary(BaseModel):
    """Uniform coordinate lattice shared by tokens, rasters and the goal head"""
    model_config = ConfigDict(frozen=True)

    x_min: float = Field(0.0, description="Longitudinal lower bound (m)")
    x_max: float = Field(64.0, description="Longitudinal upper bound, exclusive (m)")
    y_min: float = Field(-16.0, description="Lateral lower bound (m)")
    y_max: float = Field(16.0, description="Lateral upper bound, exclusive (m)")
    bins_x: int = Field(128, description="Longitudinal bin count")
    bins_y: int = Field(64, description="Lateral bin count")

    @model_validator(mode="after")
    def check_lattice(self):
        if not (np.isfinite([self.x_min, self.x_max, self.y_min, self.y_max]).all()):
            raise ConfigurationError("vocabulary ranges must be finite")
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ConfigurationError(
                f"vocabulary ranges must be increasing, got x=[{self.x_min}, {self.x_max}) y=[{self.y_min}, {self.y_max})"
            )
        if self.bins_x < 2 or self.bins_y < 2:
            raise ConfigurationError(f"need at least 2 bins per axis, got {self.bins_x}x{self.bins_y}")
        return self

    @property
    def bin_width_x(self) -> float:
        return (self.x_max - self.x_min) / self.bins_x

    @property
    def bin_width_y(self) -> float:
        return (self.y_max - self.y_min) / self.bins_y

    @property
    def x_offset(self) -> int:
        return 0

    @property
    def y_offset(self) -> int:
        return self.bins_x

    @property
    def coord_vocab_size(self) -> int:
        return self.bins_x + self.bins_y

    @property
    def mask_token_id(self) -> int:
        return self.bins_x + self.bins_y

    @property
    def vocab_size(self) -> int:
        """Coordinate tokens plus the mask token"""
        return self.coord_vocab_size + 1

    def x_centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.bins_x) + 0.5) * self.bin_width_x

    def y_centers(self) -> np.ndarray:
        return self.y_min + (np.arange(self.bins_y) + 0.5) * self.bin_width_y

    def axis_valid_mask(self) -> np.ndarray:
        """(L, coord_vocab_size) boolean: x ids at even positions, y ids at odd positions"""
        valid = np.zeros((ACTION_LEN, self.coord_vocab_size), dtype=bool)
        valid[0::2, : self.bins_x] = True
        valid[1::2, self.bins_x:] = True
        return valid


class Trajectory(BaseModel):
    """K ego-frame waypoints (x forward, y left) at a fixed timestep"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    waypoints: np.ndarray = Field(..., description="(K, 2) waypoints in meters")
    timestep: float = Field(0.5, gt=0, description="Seconds between waypoints")

    @field_validator("waypoints", mode="before")
    @classmethod
    def validate_waypoints(cls, v):
        arr = np.array(v, dtype=np.float64)
        if arr.shape != (K_WAYPOINTS, 2):
            raise ContractError(f"trajectory must have shape ({K_WAYPOINTS}, 2), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ContractError("trajectory waypoints must be finite")
        arr.setflags(write=False)
        return arr

    @field_serializer("waypoints")
    def serialize_waypoints(self, v: np.ndarray):
        return v.tolist()

    @property
    def endpoint(self) -> np.ndarray:
        return self.waypoints[-1]

    def with_origin(self) -> np.ndarray:
        """(K+1, 2) polyline starting at the ego origin"""
        return np.vstack([np.zeros((1, 2)), self.waypoints])


class TokenSequence(BaseModel):
    """Length-16 interleaved action block [x1, y1, ..., x8, y8]"""
    model_config = ConfigDict(frozen=True)

    tokens: Tuple[int, ...]

    @field_validator("tokens", mode="before")
    @classmethod
    def validate_length(cls, v):
        v = tuple(int(t) for t in v)
        if len(v) != ACTION_LEN:
            raise ContractError(f"token block must have length {ACTION_LEN}, got {len(v)}")
        return v

    def check_layout(self, vocab: Vocabulary) -> "TokenSequence":
        """Raise if any position carries a token of the wrong axis"""
        for i, tok in enumerate(self.tokens):
            if tok == vocab.mask_token_id:
                continue
            if i % 2 == 0 and not (0 <= tok < vocab.bins_x):
                raise ContractError(f"position {i} expects an x token, got {tok}")
            if i % 2 == 1 and not (vocab.bins_x <= tok < vocab.coord_vocab_size):
                raise ContractError(f"position {i} expects a y token, got {tok}")
        return self

    def masked_positions(self, vocab: Vocabulary) -> list:
        return [i for i, tok in enumerate(self.tokens) if tok == vocab.mask_token_id]

    def is_complete(self, vocab: Vocabulary) -> bool:
        return vocab.mask_token_id not in self.tokens

    @property
    def goal(self) -> Tuple[int, int]:
        return self.tokens[GOAL_POSITIONS[0]], self.tokens[GOAL_POSITIONS[1]]
