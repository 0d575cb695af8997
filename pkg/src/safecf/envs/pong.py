"""Mini-pong: white paddles and ball on black, integer-grid dynamics.

The agent drives the right paddle; a slower tracking opponent drives the
left one. The ball leaving the left edge scores +1 for the agent, the right
edge -1, and the episode only ends at the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from ..errors import ConfigurationError, DomainError
from .base import EnvConfig, FramePair, clone_rng, palette_frames

PADDLE_H = 7
PADDLE_W = 2
BALL_SIZE = 2
AGENT_SPEED = 2
OPPONENT_SPEED = 1

GRAY_LEVELS = np.array([0.0, 1.0], dtype=np.float32)
RGB_COLORS = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], dtype=np.float32)


class PongAction(IntEnum):
    NOOP = 0
    UP = 1
    DOWN = 2


PONG_ACTION_NAMES = tuple(a.name for a in PongAction)


@dataclass
class PongState:
    config: EnvConfig
    ball_x: int
    ball_y: int
    vel_x: int
    vel_y: int
    agent_y: int  # top row of the right paddle
    opponent_y: int
    step_count: int
    rng: np.random.Generator

    def canonical(self) -> dict:
        return {
            "ball": [self.ball_x, self.ball_y, self.vel_x, self.vel_y],
            "paddles": [self.agent_y, self.opponent_y],
            "step": self.step_count,
            "rng": self.rng.bit_generator.state,
        }


class MiniPongEnv:
    action_names = PONG_ACTION_NAMES
    n_actions = len(PongAction)

    def __init__(self, config: EnvConfig):
        if config.env_id != "mini-pong":
            raise ConfigurationError(f"config is for {config.env_id!r}")
        if config.height < PADDLE_H + 2 or config.width < 12:
            raise ConfigurationError("mini-pong grid too small for paddles and ball")
        self.config = config
        self.agent_col = config.width - 3  # paddle spans two columns
        self.opponent_col = 1

    def _serve(self, s: PongState) -> None:
        H, W = self.config.height, self.config.width
        s.ball_x = W // 2 - 1
        s.ball_y = int(s.rng.integers(H // 4, 3 * H // 4))
        s.vel_x = int(s.rng.choice((-1, 1)))
        s.vel_y = int(s.rng.integers(-1, 2))

    def reset(self, seed: int) -> PongState:
        rng = np.random.default_rng(seed)
        H = self.config.height
        center = (H - PADDLE_H) // 2
        s = PongState(
            config=self.config,
            ball_x=0, ball_y=0, vel_x=1, vel_y=0,
            agent_y=center,
            opponent_y=center,
            step_count=0,
            rng=rng,
        )
        self._serve(s)
        return s

    def step(self, state: PongState, action: int) -> tuple[PongState, float, bool]:
        if not 0 <= action < self.n_actions:
            raise DomainError(f"action {action} out of range for mini-pong")
        H = self.config.height
        s = PongState(
            config=state.config,
            ball_x=state.ball_x, ball_y=state.ball_y,
            vel_x=state.vel_x, vel_y=state.vel_y,
            agent_y=state.agent_y, opponent_y=state.opponent_y,
            step_count=state.step_count,
            rng=clone_rng(state.rng),
        )
        act = PongAction(action)
        if act is PongAction.UP:
            s.agent_y = max(0, s.agent_y - AGENT_SPEED)
        elif act is PongAction.DOWN:
            s.agent_y = min(H - PADDLE_H, s.agent_y + AGENT_SPEED)

        # Opponent tracks the ball center at a capped speed.
        opp_center = s.opponent_y + PADDLE_H // 2
        ball_center = s.ball_y + BALL_SIZE // 2
        if ball_center > opp_center:
            s.opponent_y = min(H - PADDLE_H, s.opponent_y + OPPONENT_SPEED)
        elif ball_center < opp_center:
            s.opponent_y = max(0, s.opponent_y - OPPONENT_SPEED)

        s.ball_x += s.vel_x
        s.ball_y += s.vel_y
        if s.ball_y < 0:
            s.ball_y = -s.ball_y
            s.vel_y = -s.vel_y
        elif s.ball_y > H - BALL_SIZE:
            s.ball_y = 2 * (H - BALL_SIZE) - s.ball_y
            s.vel_y = -s.vel_y

        reward = 0.0
        if s.vel_x > 0 and s.ball_x + BALL_SIZE > self.agent_col:
            if self._rows_overlap(s.ball_y, s.agent_y):
                s.ball_x = self.agent_col - BALL_SIZE
                s.vel_x = -abs(s.vel_x)
                s.vel_y = self._english(s.ball_y, s.agent_y, s.vel_y)
            elif s.ball_x >= self.config.width - 1:
                reward = -1.0
                self._serve(s)
        elif s.vel_x < 0 and s.ball_x < self.opponent_col + PADDLE_W:
            if self._rows_overlap(s.ball_y, s.opponent_y):
                s.ball_x = self.opponent_col + PADDLE_W
                s.vel_x = abs(s.vel_x)
                s.vel_y = self._english(s.ball_y, s.opponent_y, s.vel_y)
            elif s.ball_x <= 0:
                reward = 1.0
                self._serve(s)

        s.step_count += 1
        done = s.step_count >= self.config.horizon
        return s, reward, done

    @staticmethod
    def _rows_overlap(ball_y: int, paddle_y: int) -> bool:
        return ball_y + BALL_SIZE > paddle_y and ball_y < paddle_y + PADDLE_H

    @staticmethod
    def _english(ball_y: int, paddle_y: int, vel_y: int) -> int:
        ball_center = ball_y + BALL_SIZE // 2
        paddle_center = paddle_y + PADDLE_H // 2
        nudge = int(np.sign(ball_center - paddle_center))
        return max(-2, min(2, vel_y + nudge))

    def render(self, state: PongState) -> FramePair:
        H, W = self.config.height, self.config.width
        idx = np.zeros((H, W), dtype=np.uint8)
        idx[state.opponent_y:state.opponent_y + PADDLE_H,
            self.opponent_col:self.opponent_col + PADDLE_W] = 1
        idx[state.agent_y:state.agent_y + PADDLE_H,
            self.agent_col:self.agent_col + PADDLE_W] = 1
        y0, y1 = max(state.ball_y, 0), min(state.ball_y + BALL_SIZE, H)
        x0, x1 = max(state.ball_x, 0), min(state.ball_x + BALL_SIZE, W)
        if y0 < y1 and x0 < x1:
            idx[y0:y1, x0:x1] = 1
        return palette_frames(idx, GRAY_LEVELS, RGB_COLORS)
