"""Eigen-CAM saliency maps from conv-trunk activations.

The activation volume of the last conv layer is flattened to a
positions-by-channels matrix and projected onto its first right singular
vector. The projection is sign-fixed, clamped at zero, bilinearly upsampled
to the input resolution, and min-max normalized so the output spans [0, 1];
a constant projection falls back to an all-0.5 map.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .agents import Agent
from .errors import NumericError

DEGENERATE_VALUE = 0.5


def spatial_projection(acts: torch.Tensor) -> torch.Tensor:
    """Rank-1 spatial projection of a (B, C, H', W') activation batch.

    Returns raw (B, H', W') maps: sign-fixed so the largest-magnitude entry
    is positive, with the remaining negative tail clamped to zero.
    """
    if not torch.isfinite(acts).all():
        raise NumericError("non-finite activations in saliency projection")
    B, C, Hp, Wp = acts.shape
    obs_matrix = acts.permute(0, 2, 3, 1).reshape(B, Hp * Wp, C)
    _, _, vh = torch.linalg.svd(obs_matrix, full_matrices=False)
    v1 = vh[:, 0, :]
    raw = torch.bmm(obs_matrix, v1.unsqueeze(2)).reshape(B, Hp * Wp)

    peak = raw.gather(1, raw.abs().argmax(dim=1, keepdim=True)).squeeze(1)
    sign = torch.where(peak < 0, -torch.ones_like(peak), torch.ones_like(peak))
    raw = raw * sign.unsqueeze(1)
    return raw.clamp_min(0.0).reshape(B, Hp, Wp)


def normalize_maps(maps: torch.Tensor) -> torch.Tensor:
    """Min-max normalize (B, H, W) maps to [0, 1]; constant maps become 0.5."""
    B = maps.shape[0]
    flat = maps.reshape(B, -1)
    lo = flat.min(dim=1).values
    hi = flat.max(dim=1).values
    degenerate = hi == lo
    span = torch.where(degenerate, torch.ones_like(hi), hi - lo)
    norm = (flat - lo.unsqueeze(1)) / span.unsqueeze(1)
    norm = torch.where(degenerate.unsqueeze(1),
                       torch.full_like(norm, DEGENERATE_VALUE), norm)
    return norm.reshape(maps.shape)


def upsample_maps(maps: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear (align_corners=False) resize of (B, H', W') maps to (B, H, W)."""
    return F.interpolate(maps.unsqueeze(1), size=(height, width),
                         mode="bilinear", align_corners=False).squeeze(1)


def eigen_cam_batch(agent: Agent, stacks: torch.Tensor) -> torch.Tensor:
    """Saliency maps for a (B, h, H, W) batch; detached from any input graph."""
    with torch.no_grad():
        acts = agent.trunk_features_t(stacks.detach(), layer=-1)
        raw = spatial_projection(acts)
        return normalize_maps(upsample_maps(raw, stacks.shape[2], stacks.shape[3]))


def eigen_cam(agent: Agent, obs: np.ndarray) -> np.ndarray:
    """Saliency map for one (h, H, W) observation, as (H, W) float32 in [0, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(obs, dtype=np.float32)).unsqueeze(0)
    return eigen_cam_batch(agent, x)[0].numpy()
