from pathlib import Path
from typing import Optional, Tuple, Type

import orjson
from pydantic import Field, ValidationError, model_validator
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    TomlConfigSettingsSource,
)

from app.errors import ConfigurationError
from app.models.configs import (
    ChainConfig,
    ModelConfig,
    PerturbationConfig,
    PipelineConfig,
    RewardConfig,
    RLConfig,
    SceneConfig,
    TrainConfig,
)
from app.models.trajectory import Vocabulary


class Settings(BaseSettings):
    log_level: str = "INFO"
    device: str = "cpu"
    torch_threads: int = 0
    checkpoint_path: Optional[str] = None
    default_out_dir: str = "runs"

    model_config = SettingsConfigDict(env_prefix="PLANNER_", env_file=".env", extra="ignore")


settings = Settings()


class RunConfig(BaseSettings):
    """All parameters of one run; environment overrides file values"""
    vocab: Vocabulary = Field(default_factory=Vocabulary)
    scene: SceneConfig = Field(default_factory=SceneConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    perturb: PerturbationConfig = Field(default_factory=PerturbationConfig)
    rl: RLConfig = Field(default_factory=RLConfig)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    chain: ChainConfig = Field(default_factory=ChainConfig)
    seed: int = 0
    out_dir: str = "runs"

    model_config = SettingsConfigDict(
        env_prefix="PLANNER_RUN__",
        env_nested_delimiter="__",
        extra="forbid",
        protected_namespaces=(),
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        sources = [env_settings, init_settings]
        if settings_cls.model_config.get("toml_file"):
            sources.append(TomlConfigSettingsSource(settings_cls))
        return tuple(sources)

    @model_validator(mode="after")
    def check_alignment(self):
        if (self.model.grid_w, self.model.grid_h) != (self.vocab.bins_x, self.vocab.bins_y):
            raise ConfigurationError(
                f"model grid {self.model.grid_h}x{self.model.grid_w} must match vocabulary "
                f"{self.vocab.bins_y}x{self.vocab.bins_x}"
            )
        if self.model.coord_vocab_size != self.vocab.coord_vocab_size:
            raise ConfigurationError(
                f"model vocabulary size {self.model.coord_vocab_size} != {self.vocab.coord_vocab_size}"
            )
        return self

    def to_json(self) -> bytes:
        return orjson.dumps(self.model_dump(mode="json"), option=orjson.OPT_SORT_KEYS)


def load_run_config(path: Optional[str] = None, **overrides) -> RunConfig:
    """
    Build a RunConfig from an optional TOML or JSON file.

    Args:
        path: ``.toml`` or ``.json`` file, or None for defaults
        overrides: top-level fields (e.g. ``seed``) applied over the file

    Returns:
        Validated RunConfig
    """
    try:
        if path is None:
            return RunConfig(**overrides)
        file_path = Path(path)
        if not file_path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        if file_path.suffix == ".toml":
            cls = type("FileRunConfig", (RunConfig,), {"model_config": {**RunConfig.model_config, "toml_file": file_path}})
            return RunConfig(**cls(**overrides).model_dump())
        if file_path.suffix == ".json":
            data = orjson.loads(file_path.read_bytes())
            data.update(overrides)
            return RunConfig(**data)
        raise ConfigurationError(f"unsupported config format: {file_path.suffix}")
    except ValidationError as e:
        raise ConfigurationError(_describe(e)) from e
    except orjson.JSONDecodeError as e:
        raise ConfigurationError(f"invalid JSON config {path}: {e}") from e


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        loc = ".".join(str(p) for p in item["loc"])
        parts.append(f"{loc}: {item['msg']}" if loc else item["msg"])
    return "; ".join(parts)
