from __future__ import annotations

import numpy as np
import pytest
import torch

from safecf.agents import Agent, AgentConfig
from safecf.data import Dataset, collect
from safecf.envs import EnvConfig
from safecf.gan import CFGenerator, GANConfig

torch.set_num_threads(2)

TINY_AGENT_CONFIG = AgentConfig(
    conv=((8, 8, 4), (16, 4, 2)),
    hidden=32,
    n_actions=5,
    replay_capacity=2000,
    total_steps=400,
    warmup=50,
    seed=11,
)


@pytest.fixture(scope="session")
def env_config() -> EnvConfig:
    return EnvConfig(env_id="mini-highway", horizon=40)


@pytest.fixture(scope="session")
def tiny_agent() -> Agent:
    torch.manual_seed(11)
    return Agent(TINY_AGENT_CONFIG, "mini-highway")


@pytest.fixture(scope="session")
def tiny_dataset(tiny_agent, env_config, tmp_path_factory) -> Dataset:
    out = tmp_path_factory.mktemp("tiny-dataset")
    collect(tiny_agent, env_config, n=120, seed=3, out_dir=out, epsilon=0.0)
    return Dataset(out)


@pytest.fixture(scope="session")
def gan_config() -> GANConfig:
    return GANConfig(base_channels=8, n_resblocks=2, critic_channels=8,
                     batch_size=8, probe_size=16, probe_every=2, seed=5)


@pytest.fixture(scope="session")
def tiny_generator(gan_config) -> CFGenerator:
    torch.manual_seed(21)
    return CFGenerator(4, 5, 48, 96, "mini-highway", gan_config)


@pytest.fixture(scope="session")
def identity_generator(gan_config) -> CFGenerator:
    """Generator whose attention head is pinned closed: cf_stack == input."""
    torch.manual_seed(22)
    gen = CFGenerator(4, 5, 48, 96, "mini-highway", gan_config)
    with torch.no_grad():
        gen.net.attention_head.weight.zero_()
        gen.net.attention_head.bias.fill_(-1e4)  # sigmoid underflows to exactly 0
    return gen


def random_obs(rng: np.random.Generator, h=4, height=48, width=96) -> np.ndarray:
    return rng.random((h, height, width), dtype=np.float32)
