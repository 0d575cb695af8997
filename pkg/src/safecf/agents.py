"""Grey-box DQN agents: Q-values, a softmax policy, and readable conv trunks.

The policy distribution over actions is the temperature-1 softmax of the
Q-values; the greedy action therefore always matches the argmax Q. Trunk
activations (post-nonlinearity conv outputs) are exposed for saliency maps
and feature embeddings.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, content_hash, load_module_arrays, module_arrays
from .envs import EnvConfig, FrameStacker, make_env
from .errors import ConfigurationError, DomainError, TrainingError

ConvSpec = tuple[int, int, int]  # (out_channels, kernel, stride)


@dataclass(frozen=True)
class AgentConfig:
    conv: tuple[ConvSpec, ...] = ((16, 8, 4), (32, 4, 2))
    hidden: int = 256
    n_actions: int = 5
    h: int = 4
    height: int = 48
    width: int = 96
    gamma: float = 0.95
    replay_capacity: int = 20_000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.5  # fraction of total steps over which epsilon anneals
    lr: float = 1e-3
    target_sync: int = 500
    total_steps: int = 30_000
    batch_size: int = 32
    warmup: int = 1_000
    train_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if len(self.conv) < 2:
            raise ConfigurationError("agent trunk needs at least 2 conv layers")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must be in (0, 1], got {self.gamma}")
        hh, ww = self.height, self.width
        for _, kernel, stride in self.conv:
            hh = (hh - kernel) // stride + 1
            ww = (ww - kernel) // stride + 1
        if hh < 4 or ww < 4:
            raise ConfigurationError(
                f"last conv layer output {hh}x{ww} is below the 4x4 minimum")

    def conv_output_shape(self) -> tuple[int, int, int]:
        hh, ww = self.height, self.width
        ch = self.h
        for out_ch, kernel, stride in self.conv:
            hh = (hh - kernel) // stride + 1
            ww = (ww - kernel) // stride + 1
            ch = out_ch
        return ch, hh, ww

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv"] = [list(c) for c in self.conv]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        d = dict(d)
        d["conv"] = tuple(tuple(c) for c in d["conv"])
        return cls(**d)


def default_agent_config(env_config: EnvConfig, **overrides) -> AgentConfig:
    env = make_env(env_config)
    base = dict(
        n_actions=env.n_actions,
        h=env_config.h,
        height=env_config.height,
        width=env_config.width,
    )
    if env_config.env_id == "mini-pong":
        base.update(conv=((16, 4, 2), (32, 4, 2)), gamma=0.99, total_steps=60_000)
    base.update(overrides)
    return AgentConfig(**base)


class QNetwork(nn.Module):
    def __init__(self, config: AgentConfig):
        super().__init__()
        convs = []
        in_ch = config.h
        for out_ch, kernel, stride in config.conv:
            convs.append(nn.Conv2d(in_ch, out_ch, kernel, stride))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        ch, hh, ww = config.conv_output_shape()
        self.fc = nn.Linear(ch * hh * ww, config.hidden)
        self.head = nn.Linear(config.hidden, config.n_actions)

    def conv_activations(self, x: torch.Tensor) -> list[torch.Tensor]:
        acts = []
        for conv in self.convs:
            x = F.relu(conv(x))
            acts.append(x)
        return acts

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv_activations(x)[-1]
        x = F.relu(self.fc(x.flatten(1)))
        return self.head(x)


class Agent:
    """A frozen Q-network plus its config; safe for concurrent inference."""

    def __init__(self, config: AgentConfig, env_id: str,
                 net: QNetwork | None = None, return_curve: list[float] | None = None):
        self.config = config
        self.env_id = env_id
        self.net = net if net is not None else QNetwork(config)
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.return_curve = list(return_curve or [])

    @property
    def n_actions(self) -> int:
        return self.config.n_actions

    @property
    def hash(self) -> str:
        return content_hash(self.config.to_dict(), module_arrays(self.net))

    def _check_obs(self, obs: np.ndarray) -> None:
        expected = (self.config.h, self.config.height, self.config.width)
        if obs.shape != expected:
            raise DomainError(f"observation shape {obs.shape} != {expected}")

    def _to_tensor(self, obs: np.ndarray) -> torch.Tensor:
        self._check_obs(obs)
        return torch.from_numpy(np.ascontiguousarray(obs, dtype=np.float32)).unsqueeze(0)

    # ------ numpy API (single observation) ------

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            q = self.net(self._to_tensor(obs))[0]
        q = q.numpy()
        if not np.all(np.isfinite(q)):
            raise DomainError("non-finite Q-values")
        return q

    def policy_distribution(self, obs: np.ndarray) -> np.ndarray:
        q = self.q_values(obs)
        z = np.exp(q - q.max())
        return z / z.sum()

    def act(self, obs: np.ndarray, epsilon: float = 0.0,
            rng: np.random.Generator | None = None) -> int:
        if not 0.0 <= epsilon <= 1.0:
            raise DomainError(f"epsilon must be in [0, 1], got {epsilon}")
        if epsilon > 0.0:
            if rng is None:
                rng = np.random.default_rng()
            if rng.random() < epsilon:
                return int(rng.integers(self.n_actions))
        return int(np.argmax(self.q_values(obs)))  # argmax keeps lowest index on ties

    def trunk_features(self, obs: np.ndarray, layer: int = -1) -> np.ndarray:
        n_layers = len(self.net.convs)
        if not -n_layers <= layer < n_layers:
            raise DomainError(f"layer {layer} out of range for {n_layers}-conv trunk")
        with torch.no_grad():
            acts = self.net.conv_activations(self._to_tensor(obs))
        return acts[layer][0].numpy()

    # ------ torch API (batched, differentiable w.r.t. the input) ------

    def q_values_t(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def log_policy_t(self, x: torch.Tensor) -> torch.Tensor:
        return F.log_softmax(self.net(x), dim=1)

    def trunk_features_t(self, x: torch.Tensor, layer: int = -1) -> torch.Tensor:
        return self.net.conv_activations(x)[layer]

    # ------ persistence ------

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            kind="agent",
            env_id=self.env_id,
            config=self.config.to_dict(),
            arrays=module_arrays(self.net),
            extra={"return_curve": self.return_curve},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Agent":
        if ckpt.kind != "agent":
            raise ConfigurationError(f"checkpoint kind {ckpt.kind!r} is not an agent")
        config = AgentConfig.from_dict(ckpt.config)
        net = QNetwork(config)
        load_module_arrays(net, ckpt.arrays)
        return cls(config, ckpt.env_id, net, ckpt.extra.get("return_curve"))


def save_agent(agent: Agent, path) -> None:
    from .checkpoint import write_checkpoint

    write_checkpoint(path, agent.to_checkpoint())


def load_agent(path) -> Agent:
    from .checkpoint import read_checkpoint

    return Agent.from_checkpoint(read_checkpoint(path))


class ReplayBuffer:
    """Uniform replay over uint8 frame stacks (palette values are 8-bit exact)."""

    def __init__(self, capacity: int, h: int, height: int, width: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, h, height, width), dtype=np.uint8)
        self.next_obs = np.zeros_like(self.obs)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=np.float32)
        self.size = 0
        self._cursor = 0

    def push(self, obs, action, reward, next_obs, done) -> None:
        i = self._cursor
        self.obs[i] = np.rint(obs * 255).astype(np.uint8)
        self.next_obs[i] = np.rint(next_obs * 255).astype(np.uint8)
        self.actions[i] = action
        self.rewards[i] = reward
        self.dones[i] = float(done)
        self._cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(self.size, size=batch_size)
        to_t = lambda a: torch.from_numpy(a)
        return (
            to_t(self.obs[idx].astype(np.float32) / 255.0),
            to_t(self.actions[idx]),
            to_t(self.rewards[idx]),
            to_t(self.next_obs[idx].astype(np.float32) / 255.0),
            to_t(self.dones[idx]),
        )


def _epsilon_at(step: int, config: AgentConfig) -> float:
    anneal_steps = max(1, int(config.eps_fraction * config.total_steps))
    frac = min(1.0, step / anneal_steps)
    return config.eps_start + frac * (config.eps_end - config.eps_start)


def train_dqn(env_config: EnvConfig, agent_config: AgentConfig,
              progress: bool = False) -> Agent:
    """Train a target-network DQN with uniform replay. Single-threaded and
    deterministic for a fixed seed."""
    env = make_env(env_config)
    if agent_config.n_actions != env.n_actions:
        raise ConfigurationError(
            f"agent has {agent_config.n_actions} actions, env has {env.n_actions}")

    torch.manual_seed(agent_config.seed)
    rng = np.random.default_rng(agent_config.seed)

    net = QNetwork(agent_config)
    target = QNetwork(agent_config)
    target.load_state_dict(net.state_dict())
    target.eval()
    opt = torch.optim.Adam(net.parameters(), lr=agent_config.lr)
    replay = ReplayBuffer(agent_config.replay_capacity, agent_config.h,
                          agent_config.height, agent_config.width)

    stacker = FrameStacker(env_config.h)
    state = env.reset(int(rng.integers(2**63)))
    stacker.reset(env.render(state).gray)
    obs = stacker.observation()

    episode_return = 0.0
    return_curve: list[float] = []

    for step in range(agent_config.total_steps):
        eps = _epsilon_at(step, agent_config)
        if rng.random() < eps:
            action = int(rng.integers(agent_config.n_actions))
        else:
            with torch.no_grad():
                q = net(torch.from_numpy(obs[None].astype(np.float32)))
            action = int(np.argmax(q[0].numpy()))

        state, reward, done = env.step(state, action)
        stacker.push(env.render(state).gray)
        next_obs = stacker.observation()
        replay.push(obs, action, reward, next_obs, done)
        episode_return += reward
        obs = next_obs

        if done:
            return_curve.append(episode_return)
            episode_return = 0.0
            state = env.reset(int(rng.integers(2**63)))
            stacker.reset(env.render(state).gray)
            obs = stacker.observation()

        if step >= agent_config.warmup and step % agent_config.train_every == 0:
            b_obs, b_act, b_rew, b_next, b_done = replay.sample(
                agent_config.batch_size, rng)
            with torch.no_grad():
                next_q = target(b_next).max(dim=1).values
                target_q = b_rew + agent_config.gamma * (1.0 - b_done) * next_q
            q = net(b_obs).gather(1, b_act.unsqueeze(1)).squeeze(1)
            loss = F.smooth_l1_loss(q, target_q)
            if not torch.isfinite(loss):
                raise TrainingError("non-finite DQN loss", step=step)
            opt.zero_grad()
            loss.backward()
            opt.step()

        if step % agent_config.target_sync == 0:
            target.load_state_dict(net.state_dict())

        if progress and (step + 1) % 5000 == 0:
            recent = return_curve[-20:]
            mean_ret = sum(recent) / len(recent) if recent else float("nan")
            print(f"[train-agent] step {step + 1}/{agent_config.total_steps} "
                  f"eps={eps:.3f} recent-return={mean_ret:.2f}", flush=True)

    return Agent(agent_config, env_config.env_id, net, return_curve)


def rollout_return(env_config: EnvConfig, policy, episodes: int, seed: int) -> float:
    """Mean undiscounted episode return of `policy(obs, rng) -> action`."""
    env = make_env(env_config)
    rng = np.random.default_rng(seed)
    stacker = FrameStacker(env_config.h)
    total = 0.0
    for _ in range(episodes):
        state = env.reset(int(rng.integers(2**63)))
        stacker.reset(env.render(state).gray)
        done = False
        while not done:
            action = policy(stacker.observation(), rng)
            state, reward, done = env.step(state, action)
            stacker.push(env.render(state).gray)
            total += reward
    return total / episodes


def random_policy_return(env_config: EnvConfig, episodes: int = 100, seed: int = 0) -> float:
    env = make_env(env_config)
    return rollout_return(
        env_config, lambda obs, rng: int(rng.integers(env.n_actions)), episodes, seed)


def greedy_agent_return(agent: Agent, env_config: EnvConfig,
                        episodes: int = 20, seed: int = 0) -> float:
    return rollout_return(env_config, lambda obs, rng: agent.act(obs), episodes, seed)
