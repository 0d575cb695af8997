"""Deterministic, seedable mini environments with paired gray/RGB rendering."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError
from .base import (
    DEFAULT_HORIZONS,
    DEFAULT_SIZES,
    ENV_IDS,
    LUMA_WEIGHTS,
    EnvConfig,
    FramePair,
    FrameStacker,
    luminance,
)
from .highway import HIGHWAY_ACTION_NAMES, HighwayAction, MiniHighwayEnv
from .pong import PONG_ACTION_NAMES, MiniPongEnv, PongAction

_ENV_CLASSES = {"mini-highway": MiniHighwayEnv, "mini-pong": MiniPongEnv}


def make_env(config: EnvConfig):
    try:
        cls = _ENV_CLASSES[config.env_id]
    except KeyError:
        raise ConfigurationError(f"unknown env_id {config.env_id!r}") from None
    return cls(config)


def action_names(env_id: str) -> tuple[str, ...]:
    return make_env(EnvConfig(env_id=env_id)).action_names


def gray_palette(env_id: str) -> np.ndarray:
    """Gray levels an environment can emit, ascending."""
    from . import highway, pong

    return {"mini-highway": highway.GRAY_LEVELS, "mini-pong": pong.GRAY_LEVELS}[env_id]


def rgb_palette(env_id: str) -> np.ndarray:
    from . import highway, pong

    return {"mini-highway": highway.RGB_COLORS, "mini-pong": pong.RGB_COLORS}[env_id]


def colorize(gray_frame: np.ndarray, env_id: str) -> np.ndarray:
    """Map a grayscale frame to (3, H, W) RGB via nearest palette level.

    Lets generated frames be presented in the environment's display colors
    without a trained color head.
    """
    levels = gray_palette(env_id)
    colors = rgb_palette(env_id)
    nearest = np.abs(gray_frame[..., None] - levels[None, None, :]).argmin(axis=-1)
    return np.ascontiguousarray(colors[nearest].transpose(2, 0, 1))


__all__ = [
    "EnvConfig",
    "FramePair",
    "FrameStacker",
    "HighwayAction",
    "PongAction",
    "MiniHighwayEnv",
    "MiniPongEnv",
    "HIGHWAY_ACTION_NAMES",
    "PONG_ACTION_NAMES",
    "ENV_IDS",
    "DEFAULT_SIZES",
    "DEFAULT_HORIZONS",
    "LUMA_WEIGHTS",
    "make_env",
    "action_names",
    "gray_palette",
    "rgb_palette",
    "colorize",
    "luminance",
]
