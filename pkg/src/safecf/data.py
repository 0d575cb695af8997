"""Rollout collection and binary shard storage of (state, saliency, action)
records, with episode-level train/val/test splits.

Directory layout: ``manifest.json`` plus ``shard-%05d.bin`` files of 1024
fixed-size records each. A record is the uint8 bytes of the gray stack,
the RGB current frame, the quantized saliency map, and one action byte.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import Agent
from .envs import EnvConfig, FrameStacker, make_env
from .errors import ConfigurationError, DomainError, EncodingError, IntegrityError
from .saliency import eigen_cam

SHARD_SIZE = 1024
COLLECT_EPSILON = 0.02
DEFAULT_RATIOS = (0.8, 0.1, 0.1)
SPLIT_NAMES = ("train", "val", "test")


def quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def dequantize(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float32) / 255.0


@dataclass
class Sample:
    gray_stack: np.ndarray  # (h, H, W) uint8, oldest frame first
    rgb: np.ndarray  # (3, H, W) uint8, current frame
    saliency: np.ndarray  # (H, W) uint8
    action: int
    step_index: int = 0
    episode_index: int = 0


def record_size(h: int, height: int, width: int) -> int:
    return h * height * width + 3 * height * width + height * width + 1


def encode_record(sample: Sample) -> bytes:
    gray, rgb, sal = sample.gray_stack, sample.rgb, sample.saliency
    if gray.ndim != 3 or rgb.shape != (3,) + gray.shape[1:] or sal.shape != gray.shape[1:]:
        raise EncodingError(
            f"inconsistent record shapes: gray {gray.shape}, rgb {rgb.shape}, "
            f"saliency {sal.shape}")
    if gray.dtype != np.uint8 or rgb.dtype != np.uint8 or sal.dtype != np.uint8:
        raise EncodingError("record fields must be uint8")
    if not 0 <= sample.action <= 255:
        raise EncodingError(f"action {sample.action} does not fit one byte")
    return (gray.tobytes() + rgb.tobytes() + sal.tobytes()
            + bytes([sample.action]))


def decode_record(buf: bytes, h: int, height: int, width: int) -> Sample:
    expected = record_size(h, height, width)
    if len(buf) != expected:
        raise EncodingError(f"record is {len(buf)} bytes, expected {expected}")
    hw = height * width
    gray = np.frombuffer(buf, dtype=np.uint8, count=h * hw).reshape(h, height, width)
    rgb = np.frombuffer(buf, dtype=np.uint8, count=3 * hw,
                        offset=h * hw).reshape(3, height, width)
    sal = np.frombuffer(buf, dtype=np.uint8, count=hw,
                        offset=(h + 3) * hw).reshape(height, width)
    return Sample(gray.copy(), rgb.copy(), sal.copy(), action=buf[-1])


@dataclass
class DatasetManifest:
    env_id: str
    h: int
    height: int
    width: int
    action_names: list[str]
    agent_hash: str
    n: int
    shards: list[str]
    splits: dict[str, list[int]]
    seed: int
    action_counts: list[int]
    episode_starts: list[int]  # sample index where each episode begins
    explored: list[int]  # sample indices where the collection policy explored
    env: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))

    @property
    def record_size(self) -> int:
        return record_size(self.h, self.height, self.width)

    def episode_of(self, idx: int) -> int:
        return int(np.searchsorted(self.episode_starts, idx, side="right") - 1)

    def episode_bounds(self, episode: int) -> tuple[int, int]:
        start = self.episode_starts[episode]
        end = (self.episode_starts[episode + 1]
               if episode + 1 < len(self.episode_starts) else self.n)
        return start, end

    def env_config(self) -> EnvConfig:
        return EnvConfig(**self.env) if self.env else EnvConfig(
            env_id=self.env_id, height=self.height, width=self.width, h=self.h)


def save_manifest(manifest: DatasetManifest, directory) -> None:
    Path(directory, "manifest.json").write_text(manifest.to_json(), encoding="utf-8")


def load_manifest(directory) -> DatasetManifest:
    return DatasetManifest.from_json(
        Path(directory, "manifest.json").read_text(encoding="utf-8"))


class Dataset:
    """Read-only view over a collected directory; safe for concurrent reads."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.manifest = load_manifest(directory)
        self._mmaps: dict[int, np.memmap] = {}

    def __len__(self) -> int:
        return self.manifest.n

    def _shard(self, shard_idx: int) -> np.memmap:
        if shard_idx not in self._mmaps:
            name = self.manifest.shards[shard_idx]
            path = self.directory / name
            in_shard = min(SHARD_SIZE, self.manifest.n - shard_idx * SHARD_SIZE)
            expected = in_shard * self.manifest.record_size
            actual = os.path.getsize(path)
            if actual != expected:
                raise IntegrityError(
                    f"shard {name}: {actual} bytes on disk, expected {expected}")
            self._mmaps[shard_idx] = np.memmap(path, dtype=np.uint8, mode="r")
        return self._mmaps[shard_idx]

    def record_bytes(self, idx: int) -> bytes:
        if not 0 <= idx < self.manifest.n:
            raise DomainError(f"sample index {idx} out of range [0, {self.manifest.n})")
        rs = self.manifest.record_size
        shard = self._shard(idx // SHARD_SIZE)
        offset = (idx % SHARD_SIZE) * rs
        return bytes(shard[offset:offset + rs])

    def read_sample(self, idx: int) -> Sample:
        m = self.manifest
        sample = decode_record(self.record_bytes(idx), m.h, m.height, m.width)
        episode = m.episode_of(idx)
        sample.episode_index = episode
        sample.step_index = idx - m.episode_starts[episode]
        return sample

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Dequantized (stacks, saliencies, actions) arrays for a list of indices."""
        m = self.manifest
        stacks = np.empty((len(indices), m.h, m.height, m.width), dtype=np.float32)
        sals = np.empty((len(indices), m.height, m.width), dtype=np.float32)
        actions = np.empty(len(indices), dtype=np.int64)
        for row, idx in enumerate(indices):
            s = self.read_sample(int(idx))
            stacks[row] = dequantize(s.gray_stack)
            sals[row] = dequantize(s.saliency)
            actions[row] = s.action
        return stacks, sals, actions


def read_sample(directory, idx: int) -> Sample:
    return Dataset(directory).read_sample(idx)


def split(manifest: DatasetManifest, ratios=DEFAULT_RATIOS, seed: int = 0) -> DatasetManifest:
    """Assign whole episodes to train/val/test, chasing the ratio targets.

    Episode-level assignment prevents near-duplicate stacks from leaking
    across splits; sizes match the targets as closely as episode granularity
    allows (exactly, when episode lengths divide evenly).
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios {ratios} do not sum to 1")
    n_episodes = len(manifest.episode_starts)
    active = sum(1 for r in ratios if r > 0)
    if n_episodes < active:
        raise ConfigurationError(
            f"{n_episodes} episodes cannot fill {active} non-empty splits")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n_episodes)
    targets = [r * manifest.n for r in ratios]
    assigned_counts = [0.0] * len(ratios)
    assigned_episodes = [0] * len(ratios)
    episode_split = {}
    for pos, ep in enumerate(order):
        start, end = manifest.episode_bounds(int(ep))
        deficits = [t - a for t, a in zip(targets, assigned_counts)]
        empty = [i for i, r in enumerate(ratios) if r > 0 and assigned_episodes[i] == 0]
        remaining = n_episodes - pos
        if empty and remaining <= len(empty):
            # Last chance to give every non-empty-ratio split an episode.
            best = max(empty, key=lambda i: (deficits[i], -i))
        else:
            best = int(np.argmax(deficits))
        episode_split[int(ep)] = best
        assigned_counts[best] += end - start
        assigned_episodes[best] += 1

    splits: dict[str, list[int]] = {name: [] for name in SPLIT_NAMES}
    for ep in range(n_episodes):
        start, end = manifest.episode_bounds(ep)
        splits[SPLIT_NAMES[episode_split[ep]]].extend(range(start, end))
    return dataclasses.replace(manifest, splits=splits)


def collect(agent: Agent, env_config: EnvConfig, n: int, seed: int,
            out_dir, epsilon: float = COLLECT_EPSILON,
            ratios=DEFAULT_RATIOS, progress: bool = False) -> DatasetManifest:
    """Roll out the frozen agent and persist n (stack, saliency, action)
    records plus a manifest. Deterministic for a fixed seed."""
    if n < 10:
        raise ConfigurationError(f"need at least 10 samples, got {n}")
    env = make_env(env_config)
    if agent.n_actions != env.n_actions:
        raise ConfigurationError(
            f"agent has {agent.n_actions} actions, env has {env.n_actions}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    stacker = FrameStacker(env_config.h)
    action_counts = [0] * env.n_actions
    episode_starts = [0]
    explored: list[int] = []
    shards: list[str] = []

    state = env.reset(int(rng.integers(2**63)))
    frame = env.render(state)
    stacker.reset(frame.gray)

    shard_file = None
    try:
        for i in range(n):
            if i % SHARD_SIZE == 0:
                if shard_file is not None:
                    shard_file.close()
                name = f"shard-{len(shards):05d}.bin"
                shards.append(name)
                shard_file = open(out / name, "wb")

            obs = stacker.observation()
            saliency_map = eigen_cam(agent, obs)
            if rng.random() < epsilon:
                action = int(rng.integers(env.n_actions))
                explored.append(i)
            else:
                action = int(np.argmax(agent.q_values(obs)))
            action_counts[action] += 1

            sample = Sample(
                gray_stack=quantize(obs),
                rgb=quantize(frame.rgb),
                saliency=quantize(saliency_map),
                action=action,
            )
            shard_file.write(encode_record(sample))

            state, _, done = env.step(state, action)
            frame = env.render(state)
            stacker.push(frame.gray)
            if done and i + 1 < n:
                episode_starts.append(i + 1)
                state = env.reset(int(rng.integers(2**63)))
                frame = env.render(state)
                stacker.reset(frame.gray)
            if progress and (i + 1) % 5000 == 0:
                print(f"[collect] {i + 1}/{n} samples", flush=True)
    finally:
        if shard_file is not None:
            shard_file.close()

    manifest = DatasetManifest(
        env_id=env_config.env_id,
        h=env_config.h,
        height=env_config.height,
        width=env_config.width,
        action_names=list(env.action_names),
        agent_hash=agent.hash,
        n=n,
        shards=shards,
        splits={name: [] for name in SPLIT_NAMES},
        seed=seed,
        action_counts=action_counts,
        episode_starts=episode_starts,
        explored=explored,
        env=dataclasses.asdict(env_config),
    )
    manifest = split(manifest, ratios=ratios, seed=seed)
    save_manifest(manifest, out)
    return manifest
