"""Mini-highway: a deterministic 4-lane rasterized driving environment.

The ego vehicle holds a fixed screen column while the road scrolls past it.
Participant vehicles (PVs) drive at constant speeds; the ego picks one of
five actions per step. Geometry is frozen so rendered pixels are exactly
reproducible: lanes are 12 px tall, vehicles are 4x8 px, one longitudinal
cell is 4 px, and the ego sits at screen column 24.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from ..errors import ConfigurationError, DomainError
from .base import EnvConfig, FramePair, clone_rng, palette_frames

LANE_COUNT = 4
LANE_HEIGHT = 12
VEHICLE_ROWS = 4
VEHICLE_COLS = 8
CELL_PX = 4
VEHICLE_CELLS = VEHICLE_COLS // CELL_PX  # longitudinal extent in cells
EGO_COLUMN = 24
EGO_SCREEN_CELL = EGO_COLUMN // CELL_PX
MAX_SPEED = 4
INITIAL_SPEED = 2
PV_COUNT = 6
PV_SPEEDS = (1, 2, 3)
LANE_CHANGE_PENALTY = 0.05
DASH_PERIOD = 20  # px; scroll phase 4*speed stays distinct mod 20 for speeds 0..4
DASH_ON = 10

# Class indices for the palette: background, marking, participant, ego.
GRAY_LEVELS = np.array([0.0, 80 / 255, 128 / 255, 1.0], dtype=np.float32)
# PV blue is luminance-matched to its gray level; the ego's gray level of 1.0
# has no green-hued RGB counterpart (only pure white has luminance 1), so the
# ego keeps a display green and is the one palette entry where gray differs
# from the luminance of rgb.
RGB_COLORS = np.array(
    [
        [0.0, 0.0, 0.0],
        [80 / 255, 80 / 255, 80 / 255],
        [0.0, (128 / 255 - 0.114) / 0.587, 1.0],
        [0.2, 1.0, 0.2],
    ],
    dtype=np.float32,
)


class HighwayAction(IntEnum):
    LEFT = 0
    RIGHT = 1
    IDLE = 2
    FASTER = 3
    SLOWER = 4


HIGHWAY_ACTION_NAMES = tuple(a.name for a in HighwayAction)


@dataclass
class Vehicle:
    lane: int
    cell: int  # world-frame longitudinal position, 1 cell = 4 px
    speed: int


@dataclass
class HighwayState:
    config: EnvConfig
    ego_lane: int
    ego_cell: int
    ego_speed: int
    vehicles: list[Vehicle]
    step_count: int
    rng: np.random.Generator

    def canonical(self) -> dict:
        """Plain-data view of the full state, used for equality checks."""
        return {
            "ego": [self.ego_lane, self.ego_cell, self.ego_speed],
            "vehicles": [[v.lane, v.cell, v.speed] for v in self.vehicles],
            "step": self.step_count,
            "rng": self.rng.bit_generator.state,
        }


def _same_lane_gap_ok(lane: int, cell: int, others: list[Vehicle],
                      ego_lane: int, ego_cell: int, min_gap: int = 3) -> bool:
    if lane == ego_lane and abs(cell - ego_cell) < min_gap:
        return False
    for v in others:
        if v.lane == lane and abs(cell - v.cell) < min_gap:
            return False
    return True


class MiniHighwayEnv:
    """Deterministic, seedable mini-highway. All methods are pure in the
    sense that `step` returns a fresh state and `render` never mutates."""

    action_names = HIGHWAY_ACTION_NAMES
    n_actions = len(HighwayAction)

    def __init__(self, config: EnvConfig):
        if config.env_id != "mini-highway":
            raise ConfigurationError(f"config is for {config.env_id!r}")
        if config.height != LANE_COUNT * LANE_HEIGHT:
            raise ConfigurationError(
                f"mini-highway height must be {LANE_COUNT * LANE_HEIGHT}, got {config.height}")
        self.config = config

    def reset(self, seed: int) -> HighwayState:
        rng = np.random.default_rng(seed)
        ego_lane = int(rng.integers(LANE_COUNT))
        ego_cell = 0
        vehicles: list[Vehicle] = []
        for _ in range(PV_COUNT):
            for _attempt in range(16):
                lane = int(rng.integers(LANE_COUNT))
                cell = ego_cell + int(rng.integers(4, 21))
                if _same_lane_gap_ok(lane, cell, vehicles, ego_lane, ego_cell):
                    vehicles.append(Vehicle(lane, cell, int(rng.choice(PV_SPEEDS))))
                    break
        return HighwayState(
            config=self.config,
            ego_lane=ego_lane,
            ego_cell=ego_cell,
            ego_speed=INITIAL_SPEED,
            vehicles=vehicles,
            step_count=0,
            rng=rng,
        )

    def step(self, state: HighwayState, action: int) -> tuple[HighwayState, float, bool]:
        if not 0 <= action < self.n_actions:
            raise DomainError(f"action {action} out of range for mini-highway")
        s = HighwayState(
            config=state.config,
            ego_lane=state.ego_lane,
            ego_cell=state.ego_cell,
            ego_speed=state.ego_speed,
            vehicles=[copy.copy(v) for v in state.vehicles],
            step_count=state.step_count,
            rng=clone_rng(state.rng),
        )
        act = HighwayAction(action)
        lane_changed = False
        if act is HighwayAction.LEFT and s.ego_lane > 0:
            s.ego_lane -= 1
            lane_changed = True
        elif act is HighwayAction.RIGHT and s.ego_lane < LANE_COUNT - 1:
            s.ego_lane += 1
            lane_changed = True
        elif act is HighwayAction.FASTER:
            s.ego_speed = min(MAX_SPEED, s.ego_speed + 1)
        elif act is HighwayAction.SLOWER:
            s.ego_speed = max(0, s.ego_speed - 1)

        s.ego_cell += s.ego_speed
        for v in s.vehicles:
            v.cell += v.speed
        s.step_count += 1

        collided = any(
            v.lane == s.ego_lane and abs(v.cell - s.ego_cell) < VEHICLE_CELLS
            for v in s.vehicles
        )
        if collided:
            return s, -1.0, True

        self._recycle_vehicles(s)

        reward = s.ego_speed / MAX_SPEED - (LANE_CHANGE_PENALTY if lane_changed else 0.0)
        done = s.step_count >= self.config.horizon
        return s, float(reward), done

    def _recycle_vehicles(self, s: HighwayState) -> None:
        # Off-screen PVs are re-seeded ahead of the ego; placement draws come
        # from the state RNG so replays stay deterministic.
        for v in s.vehicles:
            delta = v.cell - s.ego_cell
            if -9 <= delta <= 19:
                continue
            others = [o for o in s.vehicles if o is not v]
            for _attempt in range(8):
                lane = int(s.rng.integers(LANE_COUNT))
                cell = s.ego_cell + int(s.rng.integers(12, 19))
                if _same_lane_gap_ok(lane, cell, others, s.ego_lane, s.ego_cell):
                    v.lane, v.cell = lane, cell
                    v.speed = int(s.rng.choice(PV_SPEEDS))
                    break

    def render(self, state: HighwayState) -> FramePair:
        H, W = self.config.height, self.config.width
        idx = np.zeros((H, W), dtype=np.uint8)

        idx[0, :] = 1
        idx[H - 1, :] = 1
        phase = (CELL_PX * state.ego_cell) % DASH_PERIOD
        cols = np.arange(W)
        dash_on = ((cols + phase) % DASH_PERIOD) < DASH_ON
        for boundary in range(1, LANE_COUNT):
            idx[boundary * LANE_HEIGHT, dash_on] = 1

        for v in state.vehicles:
            self._draw_vehicle(idx, v.lane, v.cell - state.ego_cell, 2)
        self._draw_vehicle(idx, state.ego_lane, 0, 3)

        return palette_frames(idx, GRAY_LEVELS, RGB_COLORS)

    def _draw_vehicle(self, idx: np.ndarray, lane: int, rel_cell: int, cls: int) -> None:
        W = idx.shape[1]
        col = EGO_COLUMN + CELL_PX * rel_cell
        c0, c1 = max(col, 0), min(col + VEHICLE_COLS, W)
        if c0 >= c1:
            return
        r0 = lane * LANE_HEIGHT + 4
        idx[r0:r0 + VEHICLE_ROWS, c0:c1] = cls
