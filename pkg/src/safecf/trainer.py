"""Adversarial training loop binding dataset, frozen agent, and the
counterfactual GAN, plus the lambda-grid ablation harness.

One iteration consumes n_critic batches for critic updates followed by one
batch for a generator update; an epoch is one pass of the train split
through that combined stream. Everything is deterministic for a fixed seed
and thread count.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .agents import Agent
from .data import Dataset
from .errors import ConfigurationError, TrainingError
from .gan import (
    CFGenerator,
    CriticModel,
    GANConfig,
    compose,
    loss_cls,
    loss_discriminator,
    loss_fuse,
    loss_generator_total,
    loss_pred,
)
from .metrics import MetricsReport, evaluate

ABLATION_GRID = ((0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0))


@dataclass
class TrainingLog:
    seed: int
    events: list[dict] = field(default_factory=list)

    def add(self, **event) -> None:
        self.events.append(event)

    def of_type(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["type"] == kind]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"type": "header", "seed": self.seed}) + "\n")
            for event in self.events:
                f.write(json.dumps(event, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TrainingLog":
        events = []
        seed = 0
        with open(path, encoding="utf-8") as f:
            for line in f:
                record = json.loads(line)
                if record.get("type") == "header":
                    seed = record["seed"]
                else:
                    events.append(record)
        return cls(seed=seed, events=events)


class _BatchStream:
    """Shuffled pass over the train indices, re-shuffled each epoch."""

    def __init__(self, indices: np.ndarray, batch_size: int, rng: np.random.Generator):
        self.indices = np.asarray(indices)
        self.batch_size = batch_size
        self.rng = rng
        self._order = rng.permutation(len(self.indices))
        self._pos = 0
        self.epochs_done = 0

    def next_batch(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.indices))
            self._pos = 0
            self.epochs_done += 1
        batch = self.indices[self._order[self._pos:self._pos + self.batch_size]]
        self._pos += self.batch_size
        return batch


def _complementary_targets(actions: torch.Tensor, n_actions: int,
                           rng: np.random.Generator) -> torch.Tensor:
    shift = torch.from_numpy(
        rng.integers(1, n_actions, size=len(actions)).astype(np.int64))
    return (actions + shift) % n_actions


def train_cf(dataset: Dataset, agent: Agent, config: GANConfig,
             max_iterations: int | None = None,
             progress: bool = False) -> tuple[CFGenerator, CriticModel, TrainingLog]:
    manifest = dataset.manifest
    if manifest.agent_hash != agent.hash:
        raise ConfigurationError("dataset was collected with a different agent")
    train_idx = manifest.splits.get("train", [])
    if not train_idx:
        raise ConfigurationError("train split is empty")
    n_actions = agent.n_actions

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    generator = CFGenerator(manifest.h, n_actions, manifest.height,
                            manifest.width, manifest.env_id, config)
    critic = CriticModel(manifest.h, manifest.height, manifest.width,
                         manifest.env_id, config)
    g_net, d_net = generator.net, critic.net
    g_opt = torch.optim.Adam(g_net.parameters(), lr=config.lr,
                             betas=(config.beta1, config.beta2))
    d_opt = torch.optim.Adam(d_net.parameters(), lr=config.lr,
                             betas=(config.beta1, config.beta2))

    stream = _BatchStream(np.asarray(train_idx), config.batch_size, rng)
    batches_per_epoch = max(1, len(train_idx) // config.batch_size)
    total_iterations = max(1, (config.epochs * batches_per_epoch) // (config.n_critic + 1))
    if max_iterations is not None:
        total_iterations = min(total_iterations, max_iterations)

    probe = _make_probe(dataset, n_actions, config, rng)
    log = TrainingLog(seed=config.seed)
    agent_hash_before = agent.hash
    start = time.time()

    def fetch(indices):
        stacks, sals, actions = dataset.batch(indices)
        return (torch.from_numpy(stacks), torch.from_numpy(sals),
                torch.from_numpy(actions))

    for iteration in range(total_iterations):
        warming_up = iteration < config.adv_warmup and total_iterations > config.adv_warmup
        for step in range(config.n_critic):
            s, m, a = fetch(stream.next_batch())
            a_cf = _complementary_targets(a, n_actions, rng)
            with torch.no_grad():
                _, att, s_cf, _ = generator.forward_batch(s, m, a_cf)
            d_loss, parts = loss_discriminator(d_net, s, s_cf, config.lambda_gp)
            if not torch.isfinite(d_loss):
                raise TrainingError("non-finite critic loss", step=iteration)
            if not warming_up:
                d_opt.zero_grad()
                d_loss.backward()
                d_opt.step()
            log.add(type="critic", iter=iteration, step=step,
                    loss=float(d_loss.detach()), **parts)

        s, m, a = fetch(stream.next_batch())
        if config.target_sampling == "exhaustive":
            s = s.repeat_interleave(n_actions - 1, dim=0)
            m = m.repeat_interleave(n_actions - 1, dim=0)
            a = a.repeat_interleave(n_actions - 1)
            shift = torch.arange(1, n_actions).repeat(len(a) // (n_actions - 1))
            a_cf = (a + shift) % n_actions
        else:
            a_cf = _complementary_targets(a, n_actions, rng)

        for p in d_net.parameters():
            p.requires_grad_(False)
        content, att, s_cf, m_cf = generator.forward_batch(s, m, a_cf)
        # During warmup the whole adversarial game idles: the generator
        # settles into the action-flip basin before the critic gets a say.
        if warming_up:
            adv = torch.zeros(())
        else:
            adv = -d_net(s_cf).mean()
        cls = loss_cls(agent, s_cf, a_cf)
        rec = _cycle_loss(generator, s, m, a, s_cf, m_cf)
        fuse = loss_fuse(s, s_cf, m)
        pred = loss_pred(agent, m_cf, s_cf)
        g_loss = loss_generator_total(adv, cls, rec, fuse, pred, config)
        if not torch.isfinite(g_loss):
            raise TrainingError("non-finite generator loss", step=iteration)
        g_opt.zero_grad()
        g_loss.backward()
        g_opt.step()
        for p in d_net.parameters():
            p.requires_grad_(True)

        log.add(type="generator", iter=iteration, adv=float(adv.detach()),
                cls=float(cls.detach()), rec=float(rec.detach()),
                fuse=float(fuse.detach()), pred=float(pred.detach()),
                total=float(g_loss.detach()))

        if probe is not None and (iteration + 1) % config.probe_every == 0:
            log.add(type="probe", iter=iteration,
                    validity=_probe_validity(generator, agent, probe))
        if progress and (iteration + 1) % 50 == 0:
            print(f"[train-cf] iter {iteration + 1}/{total_iterations} "
                  f"d={float(d_loss.detach()):.3f} g={float(g_loss.detach()):.3f} "
                  f"cls={float(cls.detach()):.3f}", flush=True)

    if agent.hash != agent_hash_before:
        raise TrainingError("frozen agent was mutated during training")
    log.add(type="summary", iterations=total_iterations,
            seconds=time.time() - start, seed=config.seed)
    g_net.eval()
    d_net.eval()
    return generator, critic, log


def _cycle_loss(generator: CFGenerator, s, m, a, s_cf, m_cf) -> torch.Tensor:
    """Reconstruction built on the already-computed forward outputs so the
    generator runs twice, not three times, per step."""
    content2, att2, s_back, m_back = generator.forward_batch(s_cf, m_cf, a)
    diffs = torch.cat([(s - s_back).abs().flatten(1),
                       (m - m_back).abs().flatten(1)], dim=1)
    return diffs.mean()


def _make_probe(dataset: Dataset, n_actions: int, config: GANConfig,
                rng: np.random.Generator):
    val_idx = dataset.manifest.splits.get("val", [])
    if not val_idx:
        return None
    size = min(config.probe_size, len(val_idx))
    chosen = rng.choice(np.asarray(val_idx), size=size, replace=False)
    stacks, sals, actions = dataset.batch(chosen)
    a = torch.from_numpy(actions)
    a_cf = _complementary_targets(a, n_actions, rng)
    return (torch.from_numpy(stacks), torch.from_numpy(sals), a_cf)


def _probe_validity(generator: CFGenerator, agent: Agent, probe) -> float:
    s, m, a_cf = probe
    with torch.no_grad():
        _, _, s_cf, _ = generator.forward_batch(s, m, a_cf)
        achieved = agent.q_values_t(s_cf).argmax(dim=1)
    return float(100.0 * (achieved == a_cf).float().mean())


@dataclass
class AblationCell:
    lambda_fuse: float
    lambda_pred: float
    reports: list[MetricsReport]

    def median(self, metric: str) -> float:
        return float(np.median([getattr(r, metric) for r in self.reports]))


@dataclass
class AblationTable:
    cells: list[AblationCell]

    def cell(self, lambda_fuse: float, lambda_pred: float) -> AblationCell:
        for c in self.cells:
            if c.lambda_fuse == lambda_fuse and c.lambda_pred == lambda_pred:
                return c
        raise KeyError((lambda_fuse, lambda_pred))

    def to_csv(self) -> str:
        from .metrics import CSV_HEADER

        lines = [CSV_HEADER]
        for c in self.cells:
            lines.append(
                f"{c.lambda_fuse:g},{c.lambda_pred:g},"
                f"{c.median('frechet'):.6f},{c.median('perceptual'):.6f},"
                f"{c.median('proximity'):.6f},{c.median('sparsity'):.6f},"
                f"{c.median('validity'):.6f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = [
            {
                "lambda_fuse": c.lambda_fuse,
                "lambda_pred": c.lambda_pred,
                "reports": [json.loads(r.to_json()) for r in c.reports],
            }
            for c in self.cells
        ]
        return json.dumps(payload, sort_keys=True, indent=1)


def ablate(dataset: Dataset, agent: Agent, base_config: GANConfig,
           seeds=(0, 1, 2), grid=ABLATION_GRID, eval_limit: int | None = None,
           out_dir=None, max_iterations: int | None = None,
           progress: bool = False) -> AblationTable:
    """Train one model per (lambda_fuse, lambda_pred) cell per seed and
    evaluate each on the test split."""
    import dataclasses as dc

    cells = []
    for lam_fuse, lam_pred in grid:
        reports = []
        for seed in seeds:
            config = dc.replace(base_config, lambda_fuse=lam_fuse,
                                lambda_pred=lam_pred, seed=seed)
            if progress:
                print(f"[ablate] training fuse={lam_fuse:g} pred={lam_pred:g} "
                      f"seed={seed}", flush=True)
            generator, _, _ = train_cf(dataset, agent, config,
                                       max_iterations=max_iterations,
                                       progress=progress)
            report = evaluate(dataset, "test", generator, agent,
                              eval_limit=eval_limit)
            reports.append(report)
            if out_dir is not None:
                run_dir = Path(out_dir) / f"fuse{lam_fuse:g}_pred{lam_pred:g}_seed{seed}"
                run_dir.mkdir(parents=True, exist_ok=True)
                from .checkpoint import write_checkpoint

                write_checkpoint(run_dir / "generator.ckpt", generator.to_checkpoint())
                (run_dir / "metrics.json").write_text(report.to_json(), encoding="utf-8")
        cells.append(AblationCell(lam_fuse, lam_pred, reports))

    table = AblationTable(cells)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.csv").write_text(table.to_csv(), encoding="utf-8")
        (Path(out_dir) / "ablation.json").write_text(table.to_json(), encoding="utf-8")
    return table
