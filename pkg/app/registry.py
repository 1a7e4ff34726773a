import logging
from typing import Optional

from app.config import settings
from app.models.configs import PipelineConfig, RewardConfig, SceneConfig
from app.services.denoiser_service import DenoiserModel
from app.services.reward_service import RewardScorer
from app.services.storage_service import storage_service

logger = logging.getLogger(__name__)


class ModelRegistry:
    model: Optional[DenoiserModel] = None
    checkpoint_hash: Optional[str] = None
    scene_cfg: SceneConfig = SceneConfig()
    pipeline_cfg: PipelineConfig = PipelineConfig()
    scorer: RewardScorer = RewardScorer()


registry = ModelRegistry()


def load_model(path: Optional[str] = None):
    """Load a checkpoint into the registry; without a path the registry stays empty"""
    path = path or settings.checkpoint_path
    if not path:
        logger.info("no checkpoint configured; planning endpoints will answer 503")
        return
    checkpoint = storage_service.load_checkpoint(path)
    registry.model = checkpoint.model
    registry.checkpoint_hash = checkpoint.checkpoint_hash
    run = checkpoint.run_config
    if run:
        registry.scene_cfg = SceneConfig(**run.get("scene", {}))
        registry.pipeline_cfg = PipelineConfig(**run.get("pipeline", {}))
        registry.scorer = RewardScorer(RewardConfig(**run.get("reward", {})))
    logger.info(f"loaded checkpoint {path} ({checkpoint.checkpoint_hash[:12]})")


def set_model(model: Optional[DenoiserModel], checkpoint_hash: Optional[str] = None):
    registry.model = model
    registry.checkpoint_hash = checkpoint_hash


def unload_model():
    """Release the loaded model"""
    if registry.model is not None:
        logger.info("model released")
    registry.model = None
    registry.checkpoint_hash = None


def get_model() -> Optional[DenoiserModel]:
    return registry.model
