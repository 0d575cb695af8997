"""Saliency-aware counterfactual generator and Wasserstein critic.

The generator consumes (gray stack, saliency map, target-action planes) and
produces a content stack, a shared attention mask, and a predicted
counterfactual saliency map. The output stack is composed as
``att * content + (1 - att) * input`` so untouched regions copy the input
exactly. The critic scores stacks without any classification head; action
consistency comes from the frozen agent through the classification loss.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .agents import Agent
from .checkpoint import Checkpoint, load_module_arrays, module_arrays
from .envs import colorize
from .errors import ConfigurationError, DomainError, NumericError
from .saliency import eigen_cam_batch


@dataclass(frozen=True)
class GANConfig:
    lambda_cls: float = 1.0
    lambda_gp: float = 10.0
    lambda_rec: float = 10.0
    lambda_fuse: float = 1.0
    lambda_pred: float = 1.0
    n_critic: int = 5
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 12
    adv_warmup: int = 150  # generator iterations before the adversarial term engages
    seed: int = 0
    rgb_head: bool = True
    base_channels: int = 16
    n_resblocks: int = 4
    critic_channels: int = 32
    target_sampling: str = "uniform"  # or "exhaustive"
    probe_every: int = 200
    probe_size: int = 256

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_gp", "lambda_rec", "lambda_fuse", "lambda_pred"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.target_sampling not in ("uniform", "exhaustive"):
            raise ConfigurationError(
                f"unknown target_sampling {self.target_sampling!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GANConfig":
        return cls(**d)


@dataclass
class CFOutput:
    content: np.ndarray  # (h, H, W) in [0, 1]
    att: np.ndarray  # (H, W) in [0, 1]
    cf_stack: np.ndarray  # (h, H, W)
    cf_saliency: np.ndarray  # (H, W)
    cf_rgb: np.ndarray | None = None  # (3, H, W), display colorization


def compose(content, att, s):
    """Blend content over s wherever the attention mask selects it.

    Works on numpy arrays and torch tensors alike; `att` broadcasts across
    the frame axis.
    """
    if content.shape != s.shape:
        raise DomainError(f"content shape {tuple(content.shape)} != state shape {tuple(s.shape)}")
    att_shape = tuple(att.shape)
    if att_shape[-2:] != tuple(s.shape)[-2:]:
        raise DomainError(f"attention shape {att_shape} does not match frames {tuple(s.shape)}")
    return att * content + (1 - att) * s


def _conv_block(in_ch: int, out_ch: int, kernel: int, stride: int, padding: int) -> list[nn.Module]:
    return [
        nn.Conv2d(in_ch, out_ch, kernel, stride, padding),
        nn.InstanceNorm2d(out_ch, affine=True),
        nn.ReLU(inplace=True),
    ]


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.block(x)


class GeneratorNet(nn.Module):
    """Encoder, residual trunk, decoder, and three sigmoid heads."""

    def __init__(self, h: int, n_actions: int, base: int = 16, n_res: int = 4):
        super().__init__()
        self.h = h
        self.n_actions = n_actions
        in_ch = h + 1 + n_actions
        layers = _conv_block(in_ch, base, 7, 1, 3)
        layers += _conv_block(base, base * 2, 4, 2, 1)
        layers += _conv_block(base * 2, base * 4, 4, 2, 1)
        layers += [ResidualBlock(base * 4) for _ in range(n_res)]
        layers += [
            nn.ConvTranspose2d(base * 4, base * 2, 4, 2, 1),
            nn.InstanceNorm2d(base * 2, affine=True),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(base * 2, base, 4, 2, 1),
            nn.InstanceNorm2d(base, affine=True),
            nn.ReLU(inplace=True),
        ]
        self.trunk = nn.Sequential(*layers)
        self.content_head = nn.Conv2d(base, h, 7, 1, 3)
        self.attention_head = nn.Conv2d(base, 1, 7, 1, 3)
        self.saliency_head = nn.Conv2d(base, 1, 7, 1, 3)

    def forward(self, stack: torch.Tensor, saliency: torch.Tensor,
                target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """stack (B,h,H,W), saliency (B,H,W), target (B,) long ->
        (content, attention, predicted saliency)."""
        B, h, H, W = stack.shape
        if h != self.h:
            raise DomainError(f"stack has {h} frames, generator expects {self.h}")
        if (target < 0).any() or (target >= self.n_actions).any():
            raise DomainError("target action out of range")
        planes = torch.zeros(B, self.n_actions, H, W, dtype=stack.dtype,
                             device=stack.device)
        planes.scatter_(1, target.view(B, 1, 1, 1).expand(B, 1, H, W), 1.0)
        x = torch.cat([stack, saliency.unsqueeze(1), planes], dim=1)
        # Two stride-2 stages need multiples of 4; pad, then crop the features.
        pad_h, pad_w = (-H) % 4, (-W) % 4
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
        feats = self.trunk(x)[:, :, :H, :W]
        content = torch.sigmoid(self.content_head(feats))
        att = torch.sigmoid(self.attention_head(feats))
        sal_pred = torch.sigmoid(self.saliency_head(feats))
        return content, att.squeeze(1), sal_pred.squeeze(1)


class CriticNet(nn.Module):
    """Stride-2 conv stack with a linear head; no output activation and no
    normalization layers (gradient-penalty friendly)."""

    def __init__(self, h: int, height: int, width: int, base: int = 32):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = h
        out_ch = base
        hh, ww = height, width
        for _ in range(4):
            layers += [nn.Conv2d(in_ch, out_ch, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
            in_ch, out_ch = out_ch, out_ch * 2
            hh, ww = (hh + 2 - 4) // 2 + 1, (ww + 2 - 4) // 2 + 1
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(in_ch * hh * ww, 1)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(stack).flatten(1)).squeeze(1)


class CFGenerator:
    """Generator network plus the metadata needed to run it standalone."""

    def __init__(self, h: int, n_actions: int, height: int, width: int,
                 env_id: str, config: GANConfig, net: GeneratorNet | None = None):
        self.h = h
        self.n_actions = n_actions
        self.height = height
        self.width = width
        self.env_id = env_id
        self.config = config
        self.net = net if net is not None else GeneratorNet(
            h, n_actions, config.base_channels, config.n_resblocks)

    def forward_batch(self, stacks: torch.Tensor, saliencies: torch.Tensor,
                      targets: torch.Tensor):
        """Forward plus composition: returns (content, att, cf_stack, cf_saliency)."""
        content, att, sal_pred = self.net(stacks, saliencies, targets)
        cf_stack = compose(content, att.unsqueeze(1), stacks)
        return content, att, cf_stack, sal_pred

    def generate(self, s: np.ndarray, m: np.ndarray, a_target: int) -> CFOutput:
        if s.shape != (self.h, self.height, self.width):
            raise DomainError(f"stack shape {s.shape} != "
                              f"{(self.h, self.height, self.width)}")
        if m.shape != (self.height, self.width):
            raise DomainError(f"saliency shape {m.shape} != {(self.height, self.width)}")
        if not 0 <= a_target < self.n_actions:
            raise DomainError(f"target action {a_target} out of range")
        stacks = torch.from_numpy(np.ascontiguousarray(s, dtype=np.float32)).unsqueeze(0)
        sals = torch.from_numpy(np.ascontiguousarray(m, dtype=np.float32)).unsqueeze(0)
        targets = torch.tensor([a_target])
        with torch.no_grad():
            content, att, cf_stack, sal_pred = self.forward_batch(stacks, sals, targets)
        cf_stack_np = cf_stack[0].numpy()
        cf_rgb = colorize(cf_stack_np[-1], self.env_id) if self.config.rgb_head else None
        return CFOutput(
            content=content[0].numpy(),
            att=att[0].numpy(),
            cf_stack=cf_stack_np,
            cf_saliency=sal_pred[0].numpy(),
            cf_rgb=cf_rgb,
        )

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            kind="generator",
            env_id=self.env_id,
            config={
                "h": self.h, "n_actions": self.n_actions,
                "height": self.height, "width": self.width,
                "gan": self.config.to_dict(),
            },
            arrays=module_arrays(self.net),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "CFGenerator":
        if ckpt.kind != "generator":
            raise ConfigurationError(f"checkpoint kind {ckpt.kind!r} is not a generator")
        c = ckpt.config
        config = GANConfig.from_dict(c["gan"])
        model = cls(c["h"], c["n_actions"], c["height"], c["width"], ckpt.env_id, config)
        load_module_arrays(model.net, ckpt.arrays)
        model.net.eval()
        return model


class CriticModel:
    def __init__(self, h: int, height: int, width: int, env_id: str,
                 config: GANConfig, net: CriticNet | None = None):
        self.h = h
        self.height = height
        self.width = width
        self.env_id = env_id
        self.config = config
        self.net = net if net is not None else CriticNet(
            h, height, width, config.critic_channels)

    def score(self, stack: np.ndarray) -> float:
        x = torch.from_numpy(np.ascontiguousarray(stack, dtype=np.float32)).unsqueeze(0)
        with torch.no_grad():
            return float(self.net(x)[0])

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            kind="critic",
            env_id=self.env_id,
            config={"h": self.h, "height": self.height, "width": self.width,
                    "gan": self.config.to_dict()},
            arrays=module_arrays(self.net),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "CriticModel":
        if ckpt.kind != "critic":
            raise ConfigurationError(f"checkpoint kind {ckpt.kind!r} is not a critic")
        c = ckpt.config
        config = GANConfig.from_dict(c["gan"])
        model = cls(c["h"], c["height"], c["width"], ckpt.env_id, config)
        load_module_arrays(model.net, ckpt.arrays)
        model.net.eval()
        return model


# ------------------------------ losses ------------------------------


def critic_score(critic: CriticNet, stacks: torch.Tensor) -> torch.Tensor:
    return critic(stacks)


def gradient_penalty(critic: CriticNet, s: torch.Tensor, s_cf: torch.Tensor,
                     alpha) -> torch.Tensor:
    """Squared deviation of the critic's input-gradient norm from 1, averaged
    over the batch, at points interpolated between real and generated stacks."""
    if s.shape != s_cf.shape:
        raise DomainError(f"real {tuple(s.shape)} vs fake {tuple(s_cf.shape)}")
    if not torch.is_tensor(alpha):
        alpha = torch.as_tensor(alpha, dtype=s.dtype)
    alpha = alpha.reshape(-1, *([1] * (s.dim() - 1)))
    mixed = (alpha * s + (1 - alpha) * s_cf).detach().requires_grad_(True)
    scores = critic(mixed)
    grads = torch.autograd.grad(scores.sum(), mixed, create_graph=True)[0]
    if not torch.isfinite(grads).all():
        raise NumericError("non-finite critic gradient in penalty")
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def loss_discriminator(critic: CriticNet, s_batch: torch.Tensor,
                       s_cf_batch: torch.Tensor, lambda_gp: float,
                       alpha=None) -> tuple[torch.Tensor, dict]:
    """WGAN-GP critic loss: fake score up, real score down, penalty added."""
    if alpha is None:
        alpha = torch.rand(s_batch.shape[0], dtype=s_batch.dtype)
    real = critic(s_batch).mean()
    fake = critic(s_cf_batch).mean()
    gp = gradient_penalty(critic, s_batch, s_cf_batch, alpha)
    loss = fake - real + lambda_gp * gp
    parts = {"real": float(real.detach()), "fake": float(fake.detach()),
             "gp": float(gp.detach())}
    return loss, parts


def loss_cls(agent: Agent, s_cf: torch.Tensor, a_target: torch.Tensor) -> torch.Tensor:
    """Cross entropy of the frozen agent's policy against the target action."""
    logp = agent.log_policy_t(s_cf)
    return -logp.gather(1, a_target.view(-1, 1)).mean()


def loss_rec(gen: GeneratorNet, s: torch.Tensor, m: torch.Tensor,
             a_factual: torch.Tensor, a_target: torch.Tensor) -> torch.Tensor:
    """Cycle reconstruction: generate the counterfactual, translate it back
    with the factual action, and take the per-element L1 over states and maps.
    The backward pass is fed the predicted counterfactual saliency."""
    content, att, sal_pred = gen(s, m, a_target)
    s_cf = compose(content, att.unsqueeze(1), s)
    content2, att2, sal_back = gen(s_cf, sal_pred, a_factual)
    s_back = compose(content2, att2.unsqueeze(1), s_cf)
    diffs = torch.cat([(s - s_back).abs().flatten(1),
                       (m - sal_back).abs().flatten(1)], dim=1)
    return diffs.mean()


def loss_fuse(s: torch.Tensor, s_cf: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Penalty on changes outside the salient region, averaged per element."""
    if s.shape != s_cf.shape:
        raise DomainError(f"shapes differ: {tuple(s.shape)} vs {tuple(s_cf.shape)}")
    if m.shape[-2:] != s.shape[-2:]:
        raise DomainError(f"saliency shape {tuple(m.shape)} does not match frames")
    mask = (1 - m).unsqueeze(-3)  # broadcast across the frame axis
    return ((s - s_cf).abs() * mask).mean()


def loss_pred(agent: Agent, m_cf_predicted: torch.Tensor,
              s_cf: torch.Tensor) -> torch.Tensor:
    """L1 between the predicted counterfactual saliency and the agent's actual
    saliency on the generated stack (target detached)."""
    target = eigen_cam_batch(agent, s_cf)
    return (m_cf_predicted - target).abs().mean()


def loss_generator_total(adv, cls, rec, fuse, pred, config: GANConfig):
    """Weighted sum of the generator objectives; `adv` is already the
    negated mean critic score of the generated batch."""
    return (adv
            + config.lambda_cls * cls
            + config.lambda_rec * rec
            + config.lambda_fuse * fuse
            + config.lambda_pred * pred)
