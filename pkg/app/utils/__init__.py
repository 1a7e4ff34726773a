"""
Utility functions for the trajectory planner
"""

from .validators import (
    compute_sha256,
    config_hash,
    ensure_output_dir,
    file_sha256
)

__all__ = [
    "compute_sha256",
    "config_hash",
    "ensure_output_dir",
    "file_sha256"
]
