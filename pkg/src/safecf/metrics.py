"""Counterfactual quality metrics: validity, proximity, sparsity, and
feature-space realism (Fréchet and perceptual distances).

The realism metrics embed states with the frozen agent's own conv trunk
instead of a pretrained perception network, so absolute values are only
comparable within one agent; directional comparisons are what they are for.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .agents import Agent
from .data import Dataset, quantize
from .errors import DomainError, NumericError
from .gan import CFGenerator

COVARIANCE_EPS = 1e-6


def _as_batch(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return arr


def validity(agent: Agent, pairs) -> float:
    """Percentage of (cf_stack, target_action) pairs the agent maps to the
    target. `pairs` is a list of tuples or an (stacks, targets) pair."""
    if isinstance(pairs, tuple) and len(pairs) == 2:
        stacks, targets = pairs
    else:
        pairs = list(pairs)
        if not pairs:
            raise DomainError("validity needs at least one pair")
        stacks = np.stack([np.asarray(s, dtype=np.float32) for s, _ in pairs])
        targets = np.array([a for _, a in pairs], dtype=np.int64)
    stacks = np.asarray(stacks, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.int64)
    if len(stacks) == 0:
        raise DomainError("validity needs at least one pair")
    with torch.no_grad():
        q = agent.q_values_t(torch.from_numpy(stacks))
    achieved = q.argmax(dim=1).numpy()
    return float(100.0 * np.mean(achieved == targets))


def proximity(s, s_cf) -> float:
    """Mean absolute pixel change in 8-bit units over all stack elements."""
    a, b = np.asarray(s, dtype=np.float64), np.asarray(s_cf, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)) * 255.0)


def sparsity(s, s_cf) -> float:
    """Percentage of pixels whose 8-bit quantization differs."""
    a, b = np.asarray(s), np.asarray(s_cf)
    if a.shape != b.shape:
        raise DomainError(f"shapes differ: {a.shape} vs {b.shape}")
    return float(100.0 * np.mean(quantize(a) != quantize(b)))


def frechet_distance(feats_real: np.ndarray, feats_cf: np.ndarray) -> float:
    """Gaussian-embedding distance between two feature sets (rows = samples).

    The covariance square root is taken through the eigendecomposition of
    the symmetrized product S2 @ C1 @ S2 with negative eigenvalues clamped;
    both covariances get a +1e-6 I regularizer first.
    """
    a = np.asarray(feats_real, dtype=np.float64)
    b = np.asarray(feats_cf, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DomainError(f"feature dims differ: {a.shape} vs {b.shape}")
    mu1, mu2 = a.mean(axis=0), b.mean(axis=0)
    c1 = np.cov(a, rowvar=False) + COVARIANCE_EPS * np.eye(a.shape[1])
    c2 = np.cov(b, rowvar=False) + COVARIANCE_EPS * np.eye(b.shape[1])

    vals2, vecs2 = np.linalg.eigh(c2)
    sqrt_c2 = (vecs2 * np.sqrt(np.clip(vals2, 0, None))) @ vecs2.T
    product = sqrt_c2 @ c1 @ sqrt_c2
    product = (product + product.T) / 2.0
    eigvals = np.linalg.eigvalsh(product)
    trace_sqrt = np.sum(np.sqrt(np.clip(eigvals, 0, None)))

    dist = float(np.sum((mu1 - mu2) ** 2) + np.trace(c1) + np.trace(c2) - 2.0 * trace_sqrt)
    if not np.isfinite(dist):
        raise NumericError("non-finite Frechet distance")
    return dist


def perceptual_distance(agent: Agent, s, s_cf) -> float:
    """Mean squared difference of channel-unit-normalized trunk activations,
    averaged over conv layers (a perceptual-similarity analogue on the
    agent's own features)."""
    a = torch.from_numpy(_as_batch(s))
    b = torch.from_numpy(_as_batch(s_cf))
    if a.shape != b.shape:
        raise DomainError(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    total = 0.0
    with torch.no_grad():
        acts_a = agent.net.conv_activations(a)
        acts_b = agent.net.conv_activations(b)
    for fa, fb in zip(acts_a, acts_b):
        na = fa / fa.norm(dim=1, keepdim=True).clamp_min(1e-10)
        nb = fb / fb.norm(dim=1, keepdim=True).clamp_min(1e-10)
        total += float(((na - nb) ** 2).mean())
    return total / len(acts_a)


def embed_stacks(agent: Agent, stacks: np.ndarray) -> np.ndarray:
    """Global-average-pooled last-conv activations, one row per stack."""
    with torch.no_grad():
        acts = agent.trunk_features_t(torch.from_numpy(_as_batch(stacks)), layer=-1)
    return acts.mean(dim=(2, 3)).numpy()


@dataclass
class MetricsReport:
    split: str
    sample_count: int
    validity: float
    proximity: float
    sparsity: float
    frechet: float
    perceptual: float
    per_action: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def csv_row(self, lambda_fuse: float, lambda_pred: float) -> str:
        return (f"{lambda_fuse:g},{lambda_pred:g},{self.frechet:.6f},"
                f"{self.perceptual:.6f},{self.proximity:.6f},"
                f"{self.sparsity:.6f},{self.validity:.6f}")


CSV_HEADER = "lambda_fuse,lambda_pred,FID,LPIPS,Prx,Spr,Vld"


def evaluate(dataset: Dataset, split: str, generator: CFGenerator, agent: Agent,
             eval_limit: int | None = None, batch_size: int = 64,
             progress: bool = False) -> MetricsReport:
    """Generate a counterfactual for every split sample and every
    complementary action, then aggregate all five metrics."""
    indices = dataset.manifest.splits.get(split, [])
    if not indices:
        raise DomainError(f"split {split!r} is empty")
    if eval_limit is not None:
        indices = indices[:eval_limit]

    n_actions = generator.n_actions
    action_names = dataset.manifest.action_names
    generator.net.eval()

    real_feats: list[np.ndarray] = []
    cf_feats: list[np.ndarray] = []
    valid_flags: list[np.ndarray] = []
    prox_sum = 0.0
    spars_sum = 0.0
    percep_sum = 0.0
    pair_targets: list[np.ndarray] = []
    pair_count = 0

    for lo in range(0, len(indices), batch_size):
        chunk = indices[lo:lo + batch_size]
        stacks, sals, _actions = dataset.batch(chunk)
        real_feats.append(embed_stacks(agent, stacks))
        s_t = torch.from_numpy(stacks)
        m_t = torch.from_numpy(sals)
        factual = torch.from_numpy(_actions)
        for shift in range(1, n_actions):
            targets = (factual + shift) % n_actions
            with torch.no_grad():
                _, _, cf_stacks, _ = generator.forward_batch(s_t, m_t, targets)
            cf_np = cf_stacks.numpy()
            cf_feats.append(embed_stacks(agent, cf_np))
            with torch.no_grad():
                achieved = agent.q_values_t(cf_stacks).argmax(dim=1).numpy()
            valid_flags.append(achieved == targets.numpy())
            pair_targets.append(targets.numpy())
            prox_sum += sum(proximity(stacks[i], cf_np[i]) for i in range(len(chunk)))
            spars_sum += sum(sparsity(stacks[i], cf_np[i]) for i in range(len(chunk)))
            percep_sum += perceptual_distance(agent, stacks, cf_np) * len(chunk)
            pair_count += len(chunk)
        if progress:
            print(f"[evaluate] {min(lo + batch_size, len(indices))}/{len(indices)} "
                  f"samples", flush=True)

    flags = np.concatenate(valid_flags)
    targets_all = np.concatenate(pair_targets)
    per_action = {}
    for a in range(n_actions):
        mask = targets_all == a
        if mask.any():
            per_action[action_names[a]] = {
                "count": int(mask.sum()),
                "validity": float(100.0 * flags[mask].mean()),
            }

    return MetricsReport(
        split=split,
        sample_count=pair_count,
        validity=float(100.0 * flags.mean()),
        proximity=prox_sum / pair_count,
        sparsity=spars_sum / pair_count,
        frechet=frechet_distance(np.concatenate(real_feats), np.concatenate(cf_feats)),
        perceptual=percep_sum / pair_count,
        per_action=per_action,
    )
