"""
API routes for the trajectory planner
"""

from .planning import router as planning_router

__all__ = [
    "planning_router"
]
