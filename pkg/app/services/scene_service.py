"""
Synthetic scene generation, distance fields and prompt rasters
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import shapely
from pydantic import ValidationError
from scipy import ndimage
from shapely.geometry import LineString
from shapely.ops import unary_union

from ..errors import ConfigurationError, ContractError, GenerationError
from ..models.configs import SceneConfig
from ..models.scene import Agent, BevGrid, Clip, CostField, EgoMotion, EgoState, Instruction, Scene
from ..models.trajectory import K_WAYPOINTS, Trajectory, Vocabulary
from ..utils.geometry import (
    EGO_LENGTH,
    EGO_WIDTH,
    footprint_polygon,
    from_frame,
    interpolate_along,
    to_frame,
    trajectory_footprints,
)
from ..utils.seeding import RngHierarchy

logger = logging.getLogger(__name__)

SCENE_SCHEMA_VERSION = 1
ROAD_BEHIND = 6.0
ROAD_AHEAD = 80.0
PATH_STEP = 0.25
AGENT_CLEARANCE = 0.3
MAX_LATERAL = 10.0


@dataclass
class _Track:
    length: float
    width: float
    states: np.ndarray  # (T, 3) world frame


@dataclass
class _World:
    """World-frame layout; the ego starts at the origin heading +x"""
    branches: List[np.ndarray]
    half_width: float
    expert_path: np.ndarray
    expert_s: np.ndarray  # arc length (from the origin) of the ego at t = k*dt
    speed: float
    accel: float
    curvature: float
    heading_change: float
    agents: List[_Track] = field(default_factory=list)


def _arc(start: np.ndarray, heading: float, curvature: float, length: float) -> np.ndarray:
    s = np.arange(0.0, length + PATH_STEP, PATH_STEP)
    if abs(curvature) < 1e-9:
        local = np.stack([s, np.zeros_like(s)], axis=1)
    else:
        local = np.stack([np.sin(curvature * s) / curvature, (1 - np.cos(curvature * s)) / curvature], axis=1)
    return from_frame(local, start[0], start[1], heading)


def _main_road(curvature: float, ahead: float) -> np.ndarray:
    behind = np.stack([np.arange(-ROAD_BEHIND, 0.0, PATH_STEP), np.zeros(int(ROAD_BEHIND / PATH_STEP))], axis=1)
    return np.vstack([behind, _arc(np.zeros(2), 0.0, curvature, ahead)])


def _pose_along(path: np.ndarray, s_from_origin: np.ndarray) -> np.ndarray:
    """(N, 3) poses at arc lengths measured from the ego origin (path starts ROAD_BEHIND behind it)"""
    s = np.asarray(s_from_origin, dtype=np.float64) + ROAD_BEHIND
    ahead = interpolate_along(path, s + 0.25)
    back = interpolate_along(path, np.maximum(s - 0.25, 0.0))
    pos = interpolate_along(path, s)
    heading = np.arctan2(ahead[:, 1] - back[:, 1], ahead[:, 0] - back[:, 0])
    return np.column_stack([pos, heading])


def _speed_profile(v0: float, accel: float, times: np.ndarray) -> np.ndarray:
    """Arc length travelled with constant accel, stopping at zero speed"""
    if accel < 0:
        t_stop = -v0 / accel
        t = np.minimum(times, t_stop)
    else:
        t = times
    return v0 * t + 0.5 * accel * t**2


def _sample_world(rng: np.random.Generator, cfg: SceneConfig, extra_steps: int, straight_clip: bool) -> _World:
    half_width = rng.uniform(*cfg.lane_half_width)
    v0 = rng.uniform(*cfg.speed_range)
    accel = 0.0 if straight_clip else rng.uniform(*cfg.accel_range)
    times = np.arange(K_WAYPOINTS + 1 + extra_steps) * cfg.timestep
    expert_s = _speed_profile(v0, accel, times)
    s_horizon = max(expert_s[K_WAYPOINTS], 1.0)

    curvature_cap = min(cfg.curvature_max, 2 * MAX_LATERAL / s_horizon**2)
    if straight_clip:
        curvature_cap *= 0.25
    curvature = rng.uniform(-curvature_cap, curvature_cap)
    ahead = ROAD_AHEAD + expert_s[-1]
    main = _main_road(curvature, ahead)
    branches = [main]
    expert_path = main
    heading_change = curvature * expert_s[K_WAYPOINTS]

    if not straight_clip and s_horizon >= 12.0 and rng.random() < cfg.fork_prob:
        s_fork = rng.uniform(0.2, 0.6) * s_horizon
        remaining = s_horizon - s_fork
        offset = min(rng.uniform(*cfg.fork_curvature), 2 * 8.0 / remaining**2)
        offset *= rng.choice([-1.0, 1.0])
        fork_pose = _pose_along(main, np.array([s_fork]))[0]
        branch = _arc(fork_pose[:2], fork_pose[2], curvature + offset, ahead - s_fork)
        branches.append(branch)
        if rng.random() < 0.5:
            cut = int(round((s_fork + ROAD_BEHIND) / PATH_STEP))
            expert_path = np.vstack([main[:cut], branch])
            heading_change += offset * remaining

    return _World(
        branches=branches,
        half_width=half_width,
        expert_path=expert_path,
        expert_s=expert_s,
        speed=v0,
        accel=accel,
        curvature=curvature,
        heading_change=heading_change,
    )


def _expert_footprints(world: _World, start: int) -> List[Any]:
    poses = _pose_along(world.expert_path, world.expert_s[start : start + K_WAYPOINTS + 1])
    return [footprint_polygon(p[0], p[1], p[2], EGO_LENGTH, EGO_WIDTH).buffer(AGENT_CLEARANCE) for p in poses]


def _clear_of_expert(track: _Track, ego_polys: List[Any], n_windows: int) -> bool:
    for w in range(n_windows):
        for k in range(K_WAYPOINTS + 1):
            st = track.states[w + k]
            if footprint_polygon(st[0], st[1], st[2], track.length, track.width).intersects(ego_polys[w][k]):
                return False
    return True


def _place_agents(rng: np.random.Generator, cfg: SceneConfig, world: _World, n_windows: int) -> None:
    n_agents = int(rng.integers(cfg.agent_count[0], cfg.agent_count[1] + 1))
    n_states = len(world.expert_s)
    times = np.arange(n_states) * cfg.timestep
    ego_polys = [_expert_footprints(world, w) for w in range(n_windows)]
    main = world.branches[0]
    for i in range(n_agents):
        for _ in range(5):
            length, width = rng.uniform(4.0, 5.0), rng.uniform(1.8, 2.2)
            if i == 0 and rng.random() < 0.6:
                speed = rng.uniform(0.3, 0.9) * world.speed
                gap = length + EGO_LENGTH / 2 + rng.uniform(3.0, 9.0)
                s0 = float(np.max(world.expert_s - speed * times)) + gap
                states = _pose_along(world.expert_path, s0 + speed * times)
            else:
                s_park = rng.uniform(4.0, 50.0)
                side = rng.choice([-1.0, 1.0])
                pose = _pose_along(main, np.array([s_park]))[0]
                lateral = side * (world.half_width + rng.uniform(0.2, 2.5))
                pos = pose[:2] + lateral * np.array([-np.sin(pose[2]), np.cos(pose[2])])
                states = np.tile([pos[0], pos[1], pose[2]], (n_states, 1))
            track = _Track(length=length, width=width, states=states)
            if _clear_of_expert(track, ego_polys, n_windows):
                world.agents.append(track)
                break


def _instruction(world: _World, threshold: float) -> Instruction:
    if world.heading_change > threshold:
        return Instruction.TURN_LEFT
    if world.heading_change < -threshold:
        return Instruction.TURN_RIGHT
    return Instruction.KEEP_LANE if world.agents else Instruction.STRAIGHT


def _render_grid(world: _World, pose: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    roads = []
    for branch in world.branches:
        local = to_frame(branch, pose[0], pose[1], pose[2])
        roads.append(LineString(local).buffer(world.half_width, cap_style="flat"))
    road = unary_union(roads)
    gx, gy = np.meshgrid(vocab.x_centers(), vocab.y_centers())
    return shapely.contains_xy(road, gx, gy)


def _render_scene(
    world: _World,
    start: int,
    vocab: Vocabulary,
    cfg: SceneConfig,
    seed: int,
    attempts: int,
    instruction: Instruction,
) -> Optional[Scene]:
    """Scene seen from the ego pose at time index ``start``; None when the frame is infeasible"""
    if abs(vocab.bin_width_x - vocab.bin_width_y) > 1e-12:
        raise ConfigurationError("scene grids need square cells (equal bin widths)")
    pose = _pose_along(world.expert_path, world.expert_s[start : start + 1])[0]
    drivable = _render_grid(world, pose, vocab)
    if not drivable.any():
        return None
    grid = BevGrid(drivable=drivable, resolution=vocab.bin_width_x, origin=(vocab.x_min, vocab.y_min))
    if not grid.is_drivable(0.0, 0.0):
        return None

    expert_world = interpolate_along(world.expert_path, world.expert_s[start + 1 : start + K_WAYPOINTS + 1] + ROAD_BEHIND)
    expert = to_frame(expert_world, pose[0], pose[1], pose[2])
    in_range = (
        (expert[:, 0] >= vocab.x_min) & (expert[:, 0] < vocab.x_max)
        & (expert[:, 1] >= vocab.y_min) & (expert[:, 1] < vocab.y_max)
    )
    if not in_range.all() or not all(grid.is_drivable(x, y) for x, y in expert):
        return None

    agents = []
    for track in world.agents:
        states = track.states[start : start + K_WAYPOINTS + 1]
        local = to_frame(states[:, :2], pose[0], pose[1], pose[2])
        agents.append(Agent(length=track.length, width=track.width,
                            states=np.column_stack([local, states[:, 2] - pose[2]])))

    ego_polys = trajectory_footprints(expert)
    for agent in agents:
        for k in range(1, K_WAYPOINTS + 1):
            st = agent.states[k]
            if footprint_polygon(st[0], st[1], st[2], agent.length, agent.width).intersects(ego_polys[k]):
                return None

    t = start * cfg.timestep
    speed = float(max(world.speed + world.accel * t, 0.0))
    return Scene(
        grid=grid,
        agents=agents,
        instruction=instruction,
        ego_state=EgoState(speed=speed, accel=world.accel if speed > 0 else 0.0, yaw_rate=speed * world.curvature),
        expert=Trajectory(waypoints=expert, timestep=cfg.timestep),
        seed=seed,
        attempts=attempts,
    )


def generate_scene(seed: int, cfg: Optional[SceneConfig] = None, vocab: Optional[Vocabulary] = None) -> Scene:
    """
    Generate one scene deterministically from ``seed``

    Args:
        seed: Scene seed; the same seed always gives the same scene
        cfg: Scene configuration
        vocab: Coordinate lattice the grid is rendered on

    Returns:
        A Scene whose expert stays on drivable cells and clear of every agent
    """
    cfg = cfg or SceneConfig()
    vocab = vocab or Vocabulary()
    rng = RngHierarchy(seed).numpy("scene")
    for attempt in range(1, cfg.max_attempts + 1):
        world = _sample_world(rng, cfg, extra_steps=0, straight_clip=False)
        _place_agents(rng, cfg, world, n_windows=1)
        scene = _render_scene(world, 0, vocab, cfg, seed, attempt, _instruction(world, cfg.turn_threshold))
        if scene is not None:
            if attempt > 1:
                logger.debug(f"scene {seed} feasible after {attempt} attempts")
            return scene
    logger.error(f"scene {seed}: no feasible layout in {cfg.max_attempts} attempts")
    raise GenerationError(f"scene {seed}: no feasible layout in {cfg.max_attempts} attempts")


def generate_clip(seed: int, cfg: Optional[SceneConfig] = None, n_frames: int = 20,
                  vocab: Optional[Vocabulary] = None) -> Clip:
    """Scripted drive: the ego replays the expert along a gently curved road, one frame per timestep"""
    if n_frames < 1:
        raise ConfigurationError(f"a clip needs at least one frame, got {n_frames}")
    cfg = cfg or SceneConfig()
    vocab = vocab or Vocabulary()
    rng = RngHierarchy(seed).numpy("clip")
    for attempt in range(1, cfg.max_attempts + 1):
        world = _sample_world(rng, cfg, extra_steps=n_frames - 1, straight_clip=True)
        _place_agents(rng, cfg, world, n_windows=n_frames)
        instruction = _instruction(world, cfg.turn_threshold)
        frames = []
        for f in range(n_frames):
            scene = _render_scene(world, f, vocab, cfg, seed, attempt, instruction)
            if scene is None:
                break
            frames.append(scene)
        if len(frames) < n_frames:
            continue
        poses = _pose_along(world.expert_path, world.expert_s[:n_frames])
        motions = [EgoMotion()]
        for f in range(1, n_frames):
            rel = to_frame(poses[f : f + 1, :2], poses[f - 1, 0], poses[f - 1, 1], poses[f - 1, 2])[0]
            motions.append(EgoMotion(dx=float(rel[0]), dy=float(rel[1]), dpsi=float(poses[f, 2] - poses[f - 1, 2])))
        return Clip(frames=frames, motions=motions, frame_dt=cfg.timestep, seed=seed)
    raise GenerationError(f"clip {seed}: no feasible layout in {cfg.max_attempts} attempts")


def outside_distance(grid: BevGrid, r_dac: float = 1.0) -> np.ndarray:
    """Zero on drivable cells, r_dac times the exact Euclidean cell distance to the nearest drivable cell elsewhere"""
    return ndimage.distance_transform_edt(~grid.drivable) * r_dac


def dac_cost_field(grid: BevGrid, r_dac: float = 0.5, eps_safe: float = 0.5) -> CostField:
    if eps_safe < 0:
        raise ConfigurationError(f"eps_safe must be >= 0, got {eps_safe}")
    if r_dac <= 0:
        raise ConfigurationError(f"r_dac must be positive, got {r_dac}")
    cost = np.maximum(0.0, outside_distance(grid, r_dac) - eps_safe)
    return CostField(cost=cost, r_dac=r_dac, eps_safe=eps_safe)


def _occupancy(agents: List[Agent], grid: BevGrid, index: int, extrapolate_back: bool = False) -> np.ndarray:
    xs, ys = grid.cell_centers()
    gx, gy = np.meshgrid(xs, ys)
    occ = np.zeros(grid.shape, dtype=bool)
    for agent in agents:
        st = agent.states[index].copy()
        if extrapolate_back:
            st[:2] = 2 * agent.states[0, :2] - agent.states[1, :2]
        poly = footprint_polygon(st[0], st[1], st[2], agent.length, agent.width)
        occ |= shapely.contains_xy(poly, gx, gy)
    return occ


def rasterize(scene: Scene) -> np.ndarray:
    """(3, H, W) float32: drivable, agent occupancy now, agent occupancy one timestep earlier"""
    grid = scene.grid
    return np.stack(
        [
            grid.drivable,
            _occupancy(scene.agents, grid, 0),
            _occupancy(scene.agents, grid, 0, extrapolate_back=True),
        ]
    ).astype(np.float32)


def _run_lengths(mask: np.ndarray) -> List[int]:
    flat = mask.ravel().astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    return ([0] + runs) if flat[0] else runs


def _from_run_lengths(runs: List[int], shape: Tuple[int, int]) -> np.ndarray:
    if sum(runs) != shape[0] * shape[1] or any(r < 0 for r in runs):
        raise ContractError(f"run lengths do not cover a {shape[0]}x{shape[1]} grid")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


def encode_scene(scene: Scene) -> Dict[str, Any]:
    """Corpus record of a scene (grid run-length encoded, row-major, first run is non-drivable)"""
    return {
        "schema_version": SCENE_SCHEMA_VERSION,
        "seed": scene.seed,
        "attempts": scene.attempts,
        "instruction": int(scene.instruction),
        "ego_state": scene.ego_state.model_dump(),
        "grid": {
            "shape": list(scene.grid.shape),
            "resolution": scene.grid.resolution,
            "origin": list(scene.grid.origin),
            "rle": _run_lengths(scene.grid.drivable),
        },
        "agents": [{"length": a.length, "width": a.width, "states": a.states.tolist()} for a in scene.agents],
        "expert": scene.expert.waypoints.tolist(),
        "timestep": scene.expert.timestep,
    }


def decode_scene(record: Dict[str, Any]) -> Scene:
    try:
        if record["schema_version"] != SCENE_SCHEMA_VERSION:
            raise ContractError(f"unsupported scene schema version {record['schema_version']}")
        g = record["grid"]
        grid = BevGrid(
            drivable=_from_run_lengths(g["rle"], tuple(g["shape"])),
            resolution=g["resolution"],
            origin=tuple(g["origin"]),
        )
        return Scene(
            grid=grid,
            agents=[Agent(**a) for a in record["agents"]],
            instruction=Instruction(record["instruction"]),
            ego_state=EgoState(**record["ego_state"]),
            expert=Trajectory(waypoints=record["expert"], timestep=record["timestep"]),
            seed=record["seed"],
            attempts=record.get("attempts", 1),
        )
    except (KeyError, TypeError, ValidationError) as e:
        raise ContractError(f"malformed scene record: {e!r}") from e


def generate_corpus(seeds: List[int], cfg: Optional[SceneConfig] = None, vocab: Optional[Vocabulary] = None) -> List[Scene]:
    return [generate_scene(s, cfg, vocab) for s in seeds]
