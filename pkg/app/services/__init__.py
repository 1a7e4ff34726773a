"""
Services package for the trajectory planner
"""

from .denoiser_service import DenoiserModel
from .reward_service import RewardScorer
from .runtime_service import DecodeSession, RuntimeOptions
from .storage_service import StorageService

__all__ = [
    "DenoiserModel",
    "RewardScorer",
    "DecodeSession",
    "RuntimeOptions",
    "StorageService"
]
