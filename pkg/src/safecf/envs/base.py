"""Shared environment plumbing: configs, frame pairs, palettes, frame stacking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ConfigurationError

# Rec. 601 luminance weights tie the grayscale frame to the RGB frame.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

ENV_IDS = ("mini-highway", "mini-pong")

DEFAULT_SIZES = {"mini-highway": (48, 96), "mini-pong": (42, 42)}
DEFAULT_HORIZONS = {"mini-highway": 200, "mini-pong": 500}


@dataclass(frozen=True)
class EnvConfig:
    env_id: str = "mini-highway"
    height: int = 0  # 0 => per-env default
    width: int = 0
    h: int = 4  # frame-stack length
    seed: int = 0
    horizon: int = 0  # 0 => per-env default

    def __post_init__(self):
        if self.env_id not in ENV_IDS:
            raise ConfigurationError(f"unknown env_id {self.env_id!r}")
        dh, dw = DEFAULT_SIZES[self.env_id]
        if self.height == 0:
            object.__setattr__(self, "height", dh)
        if self.width == 0:
            object.__setattr__(self, "width", dw)
        if self.horizon == 0:
            object.__setattr__(self, "horizon", DEFAULT_HORIZONS[self.env_id])
        if self.h < 1:
            raise ConfigurationError(f"frame-stack length h must be >= 1, got {self.h}")
        if self.height < 8 or self.width < 8:
            raise ConfigurationError(f"frame too small: {self.height}x{self.width}")
        if self.env_id == "mini-highway" and self.height % 4 != 0:
            raise ConfigurationError("mini-highway height must be divisible by 4 lanes")
        if self.horizon < 1:
            raise ConfigurationError(f"horizon must be >= 1, got {self.horizon}")


@dataclass(frozen=True)
class FramePair:
    """One rendered frame in both color spaces, values in [0, 1]."""

    gray: np.ndarray  # (H, W) float32
    rgb: np.ndarray  # (3, H, W) float32


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Collapse a (3, H, W) array to (H, W) with fixed Rec. 601 weights."""
    r, g, b = LUMA_WEIGHTS
    return r * rgb[0] + g * rgb[1] + b * rgb[2]


def palette_frames(index_map: np.ndarray, gray_levels: np.ndarray,
                   rgb_colors: np.ndarray) -> FramePair:
    """Map a class-index map to a FramePair through fixed palettes."""
    gray = gray_levels[index_map].astype(np.float32)
    rgb = rgb_colors[index_map].transpose(2, 0, 1).astype(np.float32)
    return FramePair(gray=gray, rgb=np.ascontiguousarray(rgb))


class FrameStacker:
    """Keeps the h most recent grayscale frames, oldest first.

    Before h frames have been seen the stack is padded by repeating the
    first frame.
    """

    def __init__(self, h: int):
        if h < 1:
            raise ConfigurationError("h must be >= 1")
        self.h = h
        self._frames: list[np.ndarray] = []

    def reset(self, frame: np.ndarray) -> None:
        self._frames = [frame] * self.h

    def push(self, frame: np.ndarray) -> None:
        if not self._frames:
            self.reset(frame)
            return
        self._frames = self._frames[1:] + [frame]

    def observation(self) -> np.ndarray:
        if not self._frames:
            raise ConfigurationError("stacker has no frames; call reset first")
        return np.stack(self._frames, axis=0)


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def clone_rng(rng: np.random.Generator) -> np.random.Generator:
    fresh = np.random.default_rng(0)
    fresh.bit_generator.state = rng.bit_generator.state
    return fresh
