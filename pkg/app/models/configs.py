"""
Parameter groups that make up a RunConfig
"""
from typing import List, Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.errors import ConfigurationError


class _Group(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SceneConfig(_Group):
    lane_half_width: Tuple[float, float] = Field((2.5, 4.0), description="Road half-width range (m)")
    curvature_max: float = Field(0.02, ge=0, description="Largest |curvature| of the main road (1/m)")
    speed_range: Tuple[float, float] = Field((2.0, 8.0), description="Initial ego speed range (m/s)")
    accel_range: Tuple[float, float] = Field((-1.0, 0.8), description="Expert acceleration range (m/s^2)")
    agent_count: Tuple[int, int] = Field((0, 3), description="Inclusive agent count range")
    fork_prob: float = Field(0.3, ge=0, le=1)
    fork_curvature: Tuple[float, float] = Field((0.02, 0.05), description="|curvature offset| of a fork branch")
    turn_threshold: float = Field(0.15, gt=0, description="Heading change (rad) that makes a turn instruction")
    timestep: float = Field(0.5, gt=0)
    max_attempts: int = Field(10, ge=1)
    r_dac: float = Field(0.5, gt=0, description="Meters per cell of outside distance")
    eps_safe: float = Field(0.5, description="Tolerance band (m)")

    @field_validator("lane_half_width", "speed_range", "accel_range", "fork_curvature", "agent_count")
    @classmethod
    def validate_range(cls, v):
        if v[0] > v[1]:
            raise ConfigurationError(f"range lower bound exceeds upper bound: {v}")
        return v

    @field_validator("lane_half_width")
    @classmethod
    def validate_width(cls, v):
        if v[0] < 0:
            raise ConfigurationError(f"lane half-width must be non-negative, got {v}")
        return v

    @field_validator("agent_count")
    @classmethod
    def validate_agents(cls, v):
        if v[0] < 0:
            raise ConfigurationError(f"agent count must be non-negative, got {v}")
        return v

    @field_validator("eps_safe")
    @classmethod
    def validate_eps(cls, v):
        if v < 0:
            raise ConfigurationError(f"eps_safe must be >= 0, got {v}")
        return v


class ModelConfig(_Group):
    layers: int = Field(4, ge=1)
    heads: int = Field(8, ge=1)
    embed_dim: int = Field(256, ge=1)
    prompt_ffn_dim: int = Field(1024, ge=1)
    action_ffn_dim: int = Field(256, ge=1)
    action_expert: bool = Field(True, description="Narrow action FFN; False builds the full-width baseline")
    patch_size: int = Field(8, ge=1)
    raster_channels: int = Field(3, ge=1)
    grid_h: int = Field(64, ge=1, description="Raster rows (= bins_y)")
    grid_w: int = Field(128, ge=1, description="Raster columns (= bins_x)")
    coord_vocab_size: int = Field(192, ge=4)
    action_len: int = Field(16)
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def check_shapes(self):
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.grid_h % self.patch_size or self.grid_w % self.patch_size:
            raise ConfigurationError(
                f"grid {self.grid_h}x{self.grid_w} not divisible by patch size {self.patch_size}"
            )
        if self.action_expert and not self.action_ffn_dim < self.prompt_ffn_dim:
            raise ConfigurationError("action expert FFN must be narrower than the prompt FFN")
        return self

    @property
    def effective_action_ffn_dim(self) -> int:
        return self.action_ffn_dim if self.action_expert else self.prompt_ffn_dim

    @property
    def n_patches(self) -> int:
        return (self.grid_h // self.patch_size) * (self.grid_w // self.patch_size)

    @property
    def prompt_len(self) -> int:
        """Patches, one instruction token, three ego-state tokens"""
        return self.n_patches + 4


class TrainConfig(_Group):
    lambda_sap: float = Field(1.0)
    lambda_field: float = Field(0.01)
    lambda_goal: float = Field(1.0)
    mask_ratio: Tuple[float, float] = Field((0.1, 1.0), description="t ~ U[lo, hi]")
    lr: float = Field(3e-4, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    grad_clip: float = Field(1.0, gt=0)
    batch_size: int = Field(32, ge=1)
    steps: int = Field(3000, ge=0)
    log_every: int = Field(50, ge=1)
    checkpoint_every: int = Field(500, ge=1)

    @field_validator("lambda_sap", "lambda_field", "lambda_goal")
    @classmethod
    def validate_weight(cls, v):
        if not np.isfinite(v) or v < 0:
            raise ConfigurationError(f"loss weights must be finite and non-negative, got {v}")
        return v

    @field_validator("mask_ratio")
    @classmethod
    def validate_ratio(cls, v):
        if not (0.0 <= v[0] <= v[1] <= 1.0):
            raise ConfigurationError(f"mask ratio range must satisfy 0 <= lo <= hi <= 1, got {v}")
        return v


class PerturbationConfig(_Group):
    beta_min: float = Field(0.7)
    beta_max: float = Field(1.3)
    alpha_max: float = Field(0.15, description="radians")
    mix: Tuple[float, float] = Field((0.5, 0.5), description="(longitudinal, lateral) weights")

    @model_validator(mode="after")
    def check_bounds(self):
        if not (0 < self.beta_min <= self.beta_max):
            raise ConfigurationError(f"need 0 < beta_min <= beta_max, got [{self.beta_min}, {self.beta_max}]")
        if self.alpha_max < 0:
            raise ConfigurationError(f"alpha_max must be >= 0, got {self.alpha_max}")
        if min(self.mix) < 0 or sum(self.mix) <= 0:
            raise ConfigurationError(f"mix weights must be non-negative with positive sum, got {self.mix}")
        return self


class PipelineConfig(_Group):
    n_goals: int = Field(3, ge=1, description="N_g")
    top_k: int = Field(64, ge=1)
    nms_radius: float = Field(1.2, description="meters")
    draft_steps: int = Field(3, ge=1, description="S_draft")
    edit_steps: int = Field(3, ge=0, description="S_edit")
    commit_fraction: float = Field(0.25, gt=0, le=1)
    lite_edit_steps: int = Field(1, ge=0)
    mode: Literal["standard", "best_of_n"] = "standard"
    draws_per_goal: int = Field(1, ge=1, description="Drafts per goal in best-of-N mode")
    temperature: float = Field(1.0, gt=0)
    sample_goals: bool = Field(False, description="Sample goals from the top-k instead of taking them in order")

    @field_validator("nms_radius")
    @classmethod
    def validate_radius(cls, v):
        if v < 0:
            raise ConfigurationError(f"nms_radius must be >= 0, got {v}")
        return v


class RewardConfig(_Group):
    weight_ttc: float = Field(5.0, ge=0)
    weight_comfort: float = Field(2.0, ge=0)
    weight_ep: float = Field(5.0, ge=0)
    ttc_threshold: float = Field(1.0, gt=0, description="seconds")
    max_accel: float = Field(3.0, gt=0)
    max_jerk: float = Field(5.0, gt=0)
    ego_length: float = Field(4.5, gt=0)
    ego_width: float = Field(2.0, gt=0)
    savgol_window: int = Field(7, ge=3)
    savgol_polyorder: int = Field(2, ge=1)

    @model_validator(mode="after")
    def check_weights(self):
        if self.weight_ttc + self.weight_comfort + self.weight_ep <= 0:
            raise ConfigurationError("at least one averaged reward weight must be positive")
        if self.savgol_window % 2 == 0 or self.savgol_polyorder >= self.savgol_window:
            raise ConfigurationError("savgol window must be odd and larger than the polynomial order")
        return self


class RLConfig(_Group):
    n_goals: int = Field(3, ge=1)
    draws_per_goal: int = Field(2, ge=1)
    clip_eps: float = Field(0.2, ge=0)
    lambda_kl: float = Field(0.05, ge=0)
    lr: float = Field(1e-5, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    grad_clip: float = Field(1.0, gt=0)
    epochs: int = Field(5, ge=0)
    temperature: float = Field(1.0, gt=0)
    reward_scale: float = Field(0.01, gt=0)
    collapse_patience: int = Field(20, ge=1, description="Consecutive all-equal groups before warning")

    @model_validator(mode="after")
    def check_group(self):
        if self.n_goals * self.draws_per_goal < 2:
            raise ConfigurationError("group size G = n_goals * draws_per_goal must be >= 2")
        return self

    @property
    def group_size(self) -> int:
        return self.n_goals * self.draws_per_goal


ChainRowName = Literal["baseline", "merged", "prefix_cache", "action_expert", "fused", "asd"]
CHAIN_ROWS: Tuple[str, ...] = ("baseline", "merged", "prefix_cache", "action_expert", "fused", "asd")


class ChainConfig(_Group):
    rows: List[ChainRowName] = Field(default_factory=lambda: list(CHAIN_ROWS))
    warmup: int = Field(3, ge=0)
    iters: int = Field(10, ge=1)
    quality_gate: float = Field(1.0, ge=0, description="Allowed |reward delta| in aggregate points")
    clip_frames: int = Field(20, ge=2)

    @field_validator("rows")
    @classmethod
    def validate_rows(cls, v):
        if not v:
            raise ConfigurationError("bench chain needs at least one row")
        return sorted(set(v), key=CHAIN_ROWS.index)
