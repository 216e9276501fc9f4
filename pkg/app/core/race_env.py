"""Procedurally generated closed-circuit racing with static obstacles.

The car moves in curvilinear track coordinates: progress along the circuit
in tiles, lateral offset normalized so the road edge sits at +/-1, and
heading error relative to the road direction. Rewards follow the racing
ledger: -0.1 per step, +1000/N_t for the first visit of each tile and -50 per
obstacle collision.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, FrozenSet, List, NamedTuple, Optional

import numpy as np
import pandas as pd

from ..models.schemas import EnvConfig, EnvParams, EpisodeMetrics
from .exceptions import InvalidArgumentError, InvalidStateError
from .seeding import derive_seed

logger = logging.getLogger(__name__)

# Reward ledger
STEP_PENALTY = -0.1
COLLISION_PENALTY = -50.0
LAP_REWARD = 1000.0

# Vehicle and track constants
MIN_TILES = 50
MAX_SPEED = 1.0  # tiles per step
GRASS_SPEED_FACTOR = 0.5
ACCEL_GAIN = 0.08
BRAKE_GAIN = 0.2
DRAG = 0.02
STEER_GAIN = 0.45  # heading change per tile at full lock
LATERAL_GAIN = 1.5
LATERAL_LIMIT = 2.0
MAX_HEADING = math.pi / 2
TURN_SCALE = 0.4  # peak curvature per tile at kappa = 1
N_HARMONICS = 3
CAR_HALF_WIDTH = 0.2
OBSTACLE_HALF_WIDTH = 0.25
OBSTACLE_SPAN = 0.8
COLLISION_SPEED_FACTOR = 0.5


class TileRecord(NamedTuple):
    curvature: float
    has_obstacle: bool
    obstacle_lateral_offset: float


@dataclass(frozen=True, eq=False)
class Track:
    params: EnvParams
    seed: int
    curvature: np.ndarray
    has_obstacle: np.ndarray
    obstacle_offset: np.ndarray

    @property
    def n_tiles(self) -> int:
        return int(self.curvature.shape[0])

    @property
    def obstacle_count(self) -> int:
        return int(np.count_nonzero(self.has_obstacle))

    @property
    def tile_reward(self) -> float:
        return LAP_REWARD / self.n_tiles

    @property
    def tiles(self) -> List[TileRecord]:
        return [
            TileRecord(float(c), bool(h), float(o))
            for c, h, o in zip(self.curvature, self.has_obstacle, self.obstacle_offset)
        ]


@dataclass(frozen=True)
class Action:
    steering: float
    acceleration: float
    brake: float

    def __post_init__(self):
        if not -1.0 <= self.steering <= 1.0:
            raise InvalidArgumentError(f"steering {self.steering} outside [-1, 1]")
        if not 0.0 <= self.acceleration <= 1.0:
            raise InvalidArgumentError(f"acceleration {self.acceleration} outside [0, 1]")
        if not 0.0 <= self.brake <= 1.0:
            raise InvalidArgumentError(f"brake {self.brake} outside [0, 1]")

    @classmethod
    def from_raw(cls, raw) -> "Action":
        """Clip an unconstrained 3-vector into the action box"""
        raw = np.asarray(raw, dtype=float)
        return cls(
            steering=float(np.clip(raw[0], -1.0, 1.0)),
            acceleration=float(np.clip(raw[1], 0.0, 1.0)),
            brake=float(np.clip(raw[2], 0.0, 1.0)),
        )


@dataclass(frozen=True)
class EpisodeState:
    tile_index: int = 0
    progress: float = 0.0
    lateral_offset: float = 0.0
    speed: float = 0.0
    heading_error: float = 0.0
    tiles_visited: FrozenSet[int] = field(default_factory=frozenset)
    obstacles_hit: FrozenSet[int] = field(default_factory=frozenset)
    step_count: int = 0
    on_grass: bool = False
    grass_steps: int = 0
    collisions: int = 0
    terminated: bool = False
    max_steps: int = 2000


class StepEvents(NamedTuple):
    new_tiles: int
    collided: bool
    on_grass: bool


class StepOutcome(NamedTuple):
    reward: float
    events: StepEvents
    done: bool


Policy = Callable[[np.ndarray, np.random.Generator], Action]


def observation_size(lookahead: int = 5) -> int:
    return 3 + 2 * lookahead


def generate_track(params: EnvParams, seed: int, config: Optional[EnvConfig] = None) -> Track:
    """Generate a closed circuit; deterministic in (params, seed).

    The tile count and the turn profile depend on the seed only, so for a
    fixed seed the curvature magnitudes grow with kappa. The per-tile
    curvatures sum to one full turn.
    """
    config = config or EnvConfig()
    rng = np.random.default_rng(seed)

    spread = config.tile_variation * config.base_tiles
    n_tiles = max(MIN_TILES, int(round(config.base_tiles + rng.uniform(-spread, spread))))

    i = np.arange(n_tiles)
    freqs = rng.integers(2, 10, size=N_HARMONICS)
    amps = rng.uniform(0.5, 1.0, size=N_HARMONICS)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=N_HARMONICS)
    profile = np.sum(amps[:, None] * np.sin(2.0 * np.pi * freqs[:, None] * i[None, :] / n_tiles + phases[:, None]), axis=0)
    profile /= np.max(np.abs(profile))
    profile -= profile.mean()
    curvature = params.kappa * TURN_SCALE * profile + 2.0 * np.pi / n_tiles

    has_obstacle = rng.random(n_tiles) < params.p
    offsets = rng.uniform(-OBSTACLE_SPAN, OBSTACLE_SPAN, size=n_tiles)
    obstacle_offset = np.where(has_obstacle, offsets, 0.0)

    return Track(
        params=params,
        seed=seed,
        curvature=curvature,
        has_obstacle=has_obstacle,
        obstacle_offset=obstacle_offset,
    )


def reset(track: Track, max_steps: int = 2000) -> EpisodeState:
    return EpisodeState(max_steps=max_steps)


def observe(track: Track, state: EpisodeState, lookahead: int = 5) -> np.ndarray:
    """Feature vector: offset, heading, speed, then curvatures and obstacle cues ahead.

    The W tiles start at the car's tile; past the last tile the features are
    zero. An obstacle cue is signed towards the free side and grows as the
    car lines up with the obstacle.
    """
    obs = np.zeros(observation_size(lookahead))
    obs[0] = state.lateral_offset
    obs[1] = state.heading_error
    obs[2] = state.speed / MAX_SPEED
    for j in range(lookahead):
        idx = state.tile_index + j
        if idx >= track.n_tiles:
            break
        obs[3 + j] = track.curvature[idx] / TURN_SCALE
        if track.has_obstacle[idx] and idx not in state.obstacles_hit:
            gap = state.lateral_offset - track.obstacle_offset[idx]
            side = 1.0 if gap >= 0.0 else -1.0
            obs[3 + lookahead + j] = side * max(0.0, 1.0 - abs(gap))
    return obs


def step_reward(n_tiles: int, new_tiles: int, collided: bool) -> float:
    return reward_ledger(1, new_tiles, int(collided), n_tiles)


def reward_ledger(steps: int, tiles: int, collisions: int, n_tiles: int) -> float:
    """Closed-form episode reward; a full lap credits exactly LAP_REWARD"""
    return math.fsum([STEP_PENALTY * steps, LAP_REWARD * tiles / n_tiles, COLLISION_PENALTY * collisions])


def step(track: Track, state: EpisodeState, action: Action):
    """Advance one step; returns the new state and the step outcome"""
    if state.terminated:
        raise InvalidStateError("cannot step a terminated episode")

    cap = MAX_SPEED * (GRASS_SPEED_FACTOR if state.on_grass else 1.0)
    speed = state.speed + ACCEL_GAIN * action.acceleration - BRAKE_GAIN * action.brake - DRAG * state.speed
    speed = min(max(speed, 0.0), cap)

    n = track.n_tiles
    curvature = track.curvature[state.tile_index % n]
    heading = state.heading_error + (STEER_GAIN * action.steering - curvature) * speed
    heading = min(max(heading, -MAX_HEADING), MAX_HEADING)
    lateral = state.lateral_offset + LATERAL_GAIN * speed * math.sin(heading)
    lateral = min(max(lateral, -LATERAL_LIMIT), LATERAL_LIMIT)
    progress = state.progress + speed * math.cos(heading)

    old_tile, new_tile = int(math.floor(state.progress)), int(math.floor(progress))
    entered = {t % n for t in range(old_tile + 1, new_tile + 1)}
    fresh = entered - state.tiles_visited
    tiles_visited = state.tiles_visited | fresh if fresh else state.tiles_visited
    tile_index = new_tile % n

    collided = False
    obstacles_hit = state.obstacles_hit
    for t in sorted(entered | {tile_index}):
        if track.has_obstacle[t] and t not in obstacles_hit:
            if abs(lateral - track.obstacle_offset[t]) < CAR_HALF_WIDTH + OBSTACLE_HALF_WIDTH:
                collided = True
                obstacles_hit = obstacles_hit | {t}
                speed *= COLLISION_SPEED_FACTOR
                break

    on_grass = abs(lateral) > 1.0
    step_count = state.step_count + 1
    done = len(tiles_visited) == n or step_count >= state.max_steps

    new_state = replace(
        state,
        tile_index=tile_index,
        progress=progress,
        lateral_offset=lateral,
        speed=speed,
        heading_error=heading,
        tiles_visited=tiles_visited,
        obstacles_hit=obstacles_hit,
        step_count=step_count,
        on_grass=on_grass,
        grass_steps=state.grass_steps + int(on_grass),
        collisions=state.collisions + int(collided),
        terminated=done,
    )
    events = StepEvents(new_tiles=len(fresh), collided=collided, on_grass=on_grass)
    return new_state, StepOutcome(reward=step_reward(n, len(fresh), collided), events=events, done=done)


def run_episode(
    track: Track,
    policy: Policy,
    seed: int,
    max_steps: int = 2000,
    lookahead: int = 5,
    trace: Optional[List[Dict]] = None,
) -> EpisodeMetrics:
    """Roll out one episode; deterministic in (track, policy, seed)"""
    rng = np.random.default_rng(seed)
    state = reset(track, max_steps)
    while not state.terminated:
        action = policy(observe(track, state, lookahead), rng)
        state, outcome = step(track, state, action)
        if trace is not None:
            trace.append(
                {
                    "step": state.step_count,
                    "reward": outcome.reward,
                    "tile_index": state.tile_index,
                    "lateral_offset": state.lateral_offset,
                    "new_tiles": outcome.events.new_tiles,
                    "collided": outcome.events.collided,
                    "on_grass": outcome.events.on_grass,
                }
            )

    return EpisodeMetrics(
        total_reward=reward_ledger(state.step_count, len(state.tiles_visited), state.collisions, track.n_tiles),
        tiles_visited_count=len(state.tiles_visited),
        collisions=state.collisions,
        grass_fraction=state.grass_steps / state.step_count,
        obstacle_count=track.obstacle_count,
        steps=state.step_count,
        n_tiles=track.n_tiles,
        kappa=track.params.kappa,
        p=track.params.p,
    )


def episode_seeds(master_seed: int, episode_index: int):
    """Independent (track seed, policy seed) pair for one episode"""
    return derive_seed(master_seed, episode_index, "track"), derive_seed(master_seed, episode_index, "policy")


def lane_keeping_policy(observation: np.ndarray, rng: Optional[np.random.Generator] = None, lookahead: int = 5) -> Action:
    """Deterministic reference controller: follow the curvature, hold the centre, dodge obstacles"""
    lateral, heading, speed = observation[0], observation[1], observation[2] * MAX_SPEED
    curv = observation[3 : 3 + lookahead] * TURN_SCALE
    cues = observation[3 + lookahead : 3 + 2 * lookahead]

    target = 0.0
    near = cues[:3]
    if np.any(near != 0.0):
        cue = near[np.flatnonzero(near)[0]]
        target = 0.6 * math.copysign(1.0, cue)

    desired_heading = float(np.clip(0.5 * (target - lateral), -0.3, 0.3))
    steering = curv[0] / STEER_GAIN + 2.0 * (desired_heading - heading)

    target_speed = max(0.3, 0.85 - 1.2 * float(np.max(np.abs(curv))))
    acceleration = 1.0 if speed < target_speed else 0.0
    brake = 0.5 if speed > target_speed + 0.1 else 0.0
    return Action.from_raw([steering, acceleration, brake])


def idle_policy(observation: np.ndarray, rng: Optional[np.random.Generator] = None) -> Action:
    return Action(steering=0.0, acceleration=0.0, brake=0.0)


def random_policy(observation: np.ndarray, rng: np.random.Generator) -> Action:
    return Action.from_raw(rng.uniform([-1.0, 0.0, 0.0], [1.0, 1.0, 1.0]))


def track_to_json(track: Track) -> str:
    return json.dumps(
        {
            "params": track.params.model_dump(),
            "seed": track.seed,
            "tiles": [t._asdict() for t in track.tiles],
        },
        indent=2,
    )


def track_from_json(text: str) -> Track:
    doc = json.loads(text)
    tiles = doc["tiles"]
    return Track(
        params=EnvParams(**doc["params"]),
        seed=int(doc["seed"]),
        curvature=np.array([t["curvature"] for t in tiles], dtype=float),
        has_obstacle=np.array([t["has_obstacle"] for t in tiles], dtype=bool),
        obstacle_offset=np.array([t["obstacle_lateral_offset"] for t in tiles], dtype=float),
    )


def write_trace_csv(trace: List[Dict], path) -> None:
    pd.DataFrame(trace, columns=["step", "reward", "tile_index", "lateral_offset", "new_tiles", "collided", "on_grass"]).to_csv(
        path, index=False
    )
    logger.info(f"Wrote {len(trace)} trace rows to {path}")
