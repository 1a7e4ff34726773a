"""
Closed-loop style trajectory scorer: NC, DAC, TTC, comfort and progress
"""
import logging
from typing import List, Optional

import numpy as np
from scipy.signal import savgol_filter
from shapely.geometry import LineString, MultiPoint, Point

from ..errors import ContractError
from ..models.configs import RewardConfig
from ..models.planning import RewardBreakdown
from ..models.scene import Scene
from ..models.trajectory import K_WAYPOINTS, Trajectory
from ..utils.geometry import footprint_corners, footprint_polygon, path_headings, trajectory_footprints

logger = logging.getLogger(__name__)


def _velocities(points: np.ndarray, dt: float) -> np.ndarray:
    """Forward differences, the last row repeats the final backward difference"""
    diff = np.diff(points, axis=0) / dt
    return np.vstack([diff, diff[-1:]])


class RewardScorer:
    """Scores ego-frame trajectories against a scene"""

    def __init__(self, cfg: Optional[RewardConfig] = None):
        self.cfg = cfg or RewardConfig()

    def _check(self, traj: Trajectory, scene: Scene) -> None:
        if abs(traj.timestep - scene.expert.timestep) > 1e-9:
            raise ContractError(f"trajectory timestep {traj.timestep} != scene timestep {scene.expert.timestep}")
        for agent in scene.agents:
            if agent.states.shape[0] < K_WAYPOINTS + 1:
                raise ContractError("agent states do not cover the planning horizon")

    def no_collision(self, traj: Trajectory, scene: Scene) -> float:
        ego = trajectory_footprints(traj.waypoints, self.cfg.ego_length, self.cfg.ego_width)
        for agent in scene.agents:
            for k in range(1, K_WAYPOINTS + 1):
                st = agent.states[k]
                if footprint_polygon(st[0], st[1], st[2], agent.length, agent.width).intersects(ego[k]):
                    return 0.0
        return 1.0

    def drivable_compliance(self, traj: Trajectory, scene: Scene) -> float:
        return 1.0 if all(scene.grid.is_drivable(x, y) for x, y in traj.waypoints) else 0.0

    def time_to_collision(self, traj: Trajectory, scene: Scene, threshold: Optional[float] = None) -> float:
        """
        1 unless some constant-velocity projection from a waypoint reaches an agent within ``threshold``

        The first-contact test is exact: the relative displacement ray is
        intersected with the Minkowski difference of the two footprints.
        """
        threshold = self.cfg.ttc_threshold if threshold is None else threshold
        if not scene.agents:
            return 1.0
        dt = traj.timestep
        path = traj.with_origin()
        headings = path_headings(path)
        ego_vel = _velocities(path, dt)
        for agent in scene.agents:
            agent_vel = _velocities(agent.states[: K_WAYPOINTS + 1, :2], dt)
            for k in range(1, K_WAYPOINTS + 1):
                ego_corners = footprint_corners(path[k, 0], path[k, 1], headings[k], self.cfg.ego_length, self.cfg.ego_width)
                st = agent.states[k]
                agent_corners = footprint_corners(st[0], st[1], st[2], agent.length, agent.width)
                if self._contact_within(ego_corners, agent_corners, agent_vel[k] - ego_vel[k], threshold):
                    return 0.0
        return 1.0

    @staticmethod
    def _contact_within(ego_corners: np.ndarray, agent_corners: np.ndarray, rel_vel: np.ndarray, horizon: float) -> bool:
        # agent + rel_vel * tau overlaps ego  <=>  rel_vel * tau in (ego - agent)
        diff = (ego_corners[:, None, :] - agent_corners[None, :, :]).reshape(-1, 2)
        region = MultiPoint(diff).convex_hull
        end = rel_vel * horizon
        if np.hypot(*end) < 1e-12:
            return region.intersects(Point(0.0, 0.0))
        return region.intersects(LineString([(0.0, 0.0), tuple(end)]))

    def comfort(self, traj: Trajectory) -> float:
        path = traj.with_origin()
        dt = traj.timestep
        acc = savgol_filter(path, self.cfg.savgol_window, self.cfg.savgol_polyorder, deriv=2, delta=dt, axis=0)
        jerk = np.gradient(acc, dt, axis=0)
        acc_ok = np.all(np.hypot(acc[:, 0], acc[:, 1]) <= self.cfg.max_accel)
        jerk_ok = np.all(np.hypot(jerk[:, 0], jerk[:, 1]) <= self.cfg.max_jerk)
        return 1.0 if acc_ok and jerk_ok else 0.0

    def ego_progress(self, traj: Trajectory, scene: Scene) -> float:
        route = scene.expert.with_origin()
        route_line = LineString(route)
        if route_line.length < 1e-6:
            return 1.0
        progress = route_line.project(Point(traj.endpoint))
        return float(np.clip(progress / route_line.length, 0.0, 1.0))

    def aggregate(self, nc: float, dac: float, ttc: float, comfort: float, ep: float) -> float:
        c = self.cfg
        mixed = (c.weight_ttc * ttc + c.weight_comfort * comfort + c.weight_ep * ep) / (
            c.weight_ttc + c.weight_comfort + c.weight_ep
        )
        return float(np.clip(100.0 * nc * dac * mixed, 0.0, 100.0))

    def score(self, traj: Trajectory, scene: Scene) -> RewardBreakdown:
        self._check(traj, scene)
        nc = self.no_collision(traj, scene)
        dac = self.drivable_compliance(traj, scene)
        ttc = self.time_to_collision(traj, scene)
        comfort = self.comfort(traj)
        ep = self.ego_progress(traj, scene)
        return RewardBreakdown(
            nc=nc, dac=dac, ttc=ttc, comfort=comfort, ep=ep, aggregate=self.aggregate(nc, dac, ttc, comfort, ep)
        )


reward_scorer = RewardScorer()


def score(traj: Trajectory, scene: Scene, cfg: Optional[RewardConfig] = None) -> RewardBreakdown:
    return (RewardScorer(cfg) if cfg is not None else reward_scorer).score(traj, scene)


def ttc_subscore(traj: Trajectory, scene: Scene, threshold: float = 1.0, cfg: Optional[RewardConfig] = None) -> float:
    return (RewardScorer(cfg) if cfg is not None else reward_scorer).time_to_collision(traj, scene, threshold)


def mean_breakdown(items: List[RewardBreakdown]) -> RewardBreakdown:
    """Field-wise mean of several breakdowns"""
    if not items:
        raise ContractError("cannot average an empty list of rewards")
    fields = ("nc", "dac", "ttc", "comfort", "ep", "aggregate")
    return RewardBreakdown(**{f: float(np.mean([getattr(b, f) for b in items])) for f in fields})
