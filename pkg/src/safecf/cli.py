"""Single entry point (`safe-cf`) driving the pipeline end to end.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every flag can
also come from a JSON file via --config; explicit flags win.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import SafeCFError

DEFAULTS = {
    "env": "mini-highway",
    "steps": 30_000,
    "seed": 0,
    "n": 20_000,
    "epochs": 12,
    "lambda_fuse": 1.0,
    "lambda_pred": 1.0,
    "lambda_cls": 1.0,
    "lambda_gp": 10.0,
    "lambda_rec": 10.0,
    "batch": 32,
    "split": "test",
    "port": 8099,
    "seeds": "0,1,2",
}


def _setup_torch() -> None:
    import torch

    torch.set_num_threads(max(1, os.cpu_count() or 1))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safe-cf",
        description="Counterfactual explanations for deep-RL agents on "
                    "stacked visual states.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file with flag defaults")
        p.add_argument("--seed", type=int)
        return p

    p = add("train-agent", "train a DQN on a mini environment")
    p.add_argument("--env", choices=["mini-highway", "mini-pong"])
    p.add_argument("--steps", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--out", required=True, help="agent checkpoint path")

    p = add("collect", "roll out a frozen agent into a dataset")
    p.add_argument("--agent", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--out", required=True, help="dataset directory")

    p = add("train-cf", "train the counterfactual GAN")
    p.add_argument("--dataset", required=True)
    p.add_argument("--agent", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--iterations", type=int, help="hard cap, for smoke runs")
    for lam in ("fuse", "pred", "cls", "gp", "rec"):
        p.add_argument(f"--lambda-{lam}", type=float, dest=f"lambda_{lam}")

    p = add("evaluate", "compute the metrics report on a split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--agent", required=True)
    p.add_argument("--split")
    p.add_argument("--limit", type=int)
    p.add_argument("--out")

    p = add("ablate", "lambda-grid ablation over fuse/pred")
    p.add_argument("--dataset", required=True)
    p.add_argument("--agent", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--limit", type=int)

    p = add("explain", "write an all-counter-action explanation grid")
    p.add_argument("--dataset", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--agent", required=True)
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = add("serve", "HTTP explain service")
    p.add_argument("--dataset", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--agent", required=True)
    p.add_argument("--port", type=int)
    p.add_argument("--metrics")
    p.add_argument("--ui", help="static UI directory to serve at /")

    return parser


def resolve(args: argparse.Namespace, key: str, file_config: dict):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in file_config:
        return file_config[key]
    return DEFAULTS.get(key)


def _load_file_config(args) -> dict:
    if getattr(args, "config", None):
        return json.loads(Path(args.config).read_text(encoding="utf-8"))
    return {}


def cmd_train_agent(args, cfg) -> int:
    from .agents import default_agent_config, save_agent, train_dqn
    from .envs import EnvConfig

    env_id = resolve(args, "env", cfg)
    seed = resolve(args, "seed", cfg)
    env_config = EnvConfig(env_id=env_id, seed=seed,
                           horizon=resolve(args, "horizon", cfg) or 0)
    agent_config = default_agent_config(
        env_config, total_steps=resolve(args, "steps", cfg), seed=seed)
    agent = train_dqn(env_config, agent_config, progress=True)
    save_agent(agent, args.out)
    recent = agent.return_curve[-20:]
    mean_ret = sum(recent) / len(recent) if recent else float("nan")
    print(f"saved agent to {args.out} (recent mean return {mean_ret:.2f})")
    return 0


def cmd_collect(args, cfg) -> int:
    from .agents import load_agent
    from .data import collect
    from .envs import EnvConfig

    agent = load_agent(args.agent)
    env_config = EnvConfig(env_id=agent.env_id,
                           horizon=resolve(args, "horizon", cfg) or 0)
    manifest = collect(agent, env_config, n=resolve(args, "n", cfg),
                       seed=resolve(args, "seed", cfg), out_dir=args.out,
                       progress=True)
    sizes = {k: len(v) for k, v in manifest.splits.items()}
    print(f"collected {manifest.n} samples into {args.out} (splits {sizes})")
    return 0


def _gan_config(args, cfg):
    from .gan import GANConfig

    kwargs = {"seed": resolve(args, "seed", cfg)}
    for key, field in (("epochs", "epochs"), ("batch", "batch_size"),
                       ("lambda_fuse", "lambda_fuse"), ("lambda_pred", "lambda_pred"),
                       ("lambda_cls", "lambda_cls"), ("lambda_gp", "lambda_gp"),
                       ("lambda_rec", "lambda_rec")):
        value = resolve(args, key, cfg)
        if value is not None:
            kwargs[field] = value
    # Pass through net-shape knobs only available via --config.
    for field in ("base_channels", "n_resblocks", "critic_channels",
                  "n_critic", "lr", "target_sampling", "probe_every",
                  "probe_size", "rgb_head"):
        if field in cfg:
            kwargs[field] = cfg[field]
    return GANConfig(**kwargs)


def cmd_train_cf(args, cfg) -> int:
    from .agents import load_agent
    from .checkpoint import write_checkpoint
    from .data import Dataset
    from .trainer import train_cf

    dataset = Dataset(args.dataset)
    agent = load_agent(args.agent)
    config = _gan_config(args, cfg)
    generator, critic, log = train_cf(dataset, agent, config,
                                      max_iterations=args.iterations,
                                      progress=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_checkpoint(out / "generator.ckpt", generator.to_checkpoint())
    write_checkpoint(out / "critic.ckpt", critic.to_checkpoint())
    log.save(out / "train_log.jsonl")
    probes = log.of_type("probe")
    tail = f", final probe validity {probes[-1]['validity']:.1f}%" if probes else ""
    print(f"saved generator/critic/log to {out}{tail}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    from .agents import load_agent
    from .checkpoint import read_checkpoint
    from .data import Dataset
    from .gan import CFGenerator
    from .metrics import evaluate

    dataset = Dataset(args.dataset)
    agent = load_agent(args.agent)
    generator = CFGenerator.from_checkpoint(read_checkpoint(args.generator))
    split = resolve(args, "split", cfg)
    report = evaluate(dataset, split, generator, agent,
                      eval_limit=args.limit, progress=True)
    out = args.out or str(Path(args.dataset) / f"metrics-{split}.json")
    Path(out).write_text(report.to_json(), encoding="utf-8")
    print(f"validity {report.validity:.2f}% proximity {report.proximity:.3f} "
          f"sparsity {report.sparsity:.2f}% frechet {report.frechet:.4f} "
          f"perceptual {report.perceptual:.5f}")
    print(f"wrote {out}")
    return 0


def cmd_ablate(args, cfg) -> int:
    from .agents import load_agent
    from .data import Dataset
    from .trainer import ablate

    dataset = Dataset(args.dataset)
    agent = load_agent(args.agent)
    config = _gan_config(args, cfg)
    seeds = [int(s) for s in str(resolve(args, "seeds", cfg)).split(",") if s != ""]
    table = ablate(dataset, agent, config, seeds=seeds,
                   eval_limit=args.limit, out_dir=args.out, progress=True)
    print(table.to_csv())
    print(f"wrote {Path(args.out) / 'ablation.csv'}")
    return 0


def cmd_explain(args, cfg) -> int:
    from .agents import load_agent
    from .checkpoint import read_checkpoint
    from .data import Dataset, dequantize
    from .envs import colorize
    from .gan import CFGenerator
    from .images import image_grid, rescaled_diff, save_png, to_uint8_image
    from .metrics import proximity, sparsity

    dataset = Dataset(args.dataset)
    agent = load_agent(args.agent)
    generator = CFGenerator.from_checkpoint(read_checkpoint(args.generator))
    sample = dataset.read_sample(args.sample)
    stack = dequantize(sample.gray_stack)
    saliency = dequantize(sample.saliency)
    blank = np.zeros_like(saliency)

    rows = [[
        to_uint8_image(dequantize(sample.rgb)),
        to_uint8_image(stack[-1]),
        to_uint8_image(saliency),
        to_uint8_image(blank),
    ]]
    row_info = [{"row": 0, "kind": "factual", "action": sample.action,
                 "action_name": dataset.manifest.action_names[sample.action]}]

    for target in range(generator.n_actions):
        if target == sample.action:
            continue
        out = generator.generate(stack, saliency, target)
        rgb = out.cf_rgb if out.cf_rgb is not None else colorize(
            out.cf_stack[-1], dataset.manifest.env_id)
        achieved = int(np.argmax(agent.q_values(out.cf_stack)))
        rows.append([
            to_uint8_image(rgb),
            to_uint8_image(out.cf_stack[-1]),
            to_uint8_image(out.cf_saliency),
            to_uint8_image(rescaled_diff(stack, out.cf_stack)[-1]),
        ])
        row_info.append({
            "row": len(rows) - 1,
            "kind": "counterfactual",
            "target_action": target,
            "target_name": dataset.manifest.action_names[target],
            "achieved_action": achieved,
            "valid": achieved == target,
            "proximity": proximity(stack, out.cf_stack),
            "sparsity": sparsity(stack, out.cf_stack),
        })

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_png(image_grid(rows), out_dir / "explain_grid.png")
    (out_dir / "explain.json").write_text(
        json.dumps({"sample": args.sample,
                    "columns": ["rgb", "current_frame", "saliency", "diff"],
                    "rows": row_info}, indent=1),
        encoding="utf-8")
    print(f"wrote {out_dir / 'explain_grid.png'} ({len(rows)} rows)")
    return 0


def cmd_serve(args, cfg) -> int:
    from .service import serve

    metrics_path = args.metrics
    if metrics_path is None:
        candidate = Path(args.dataset) / f"metrics-test.json"
        metrics_path = str(candidate) if candidate.exists() else None
    serve(args.dataset, args.agent, args.generator,
          port=resolve(args, "port", cfg), metrics_path=metrics_path,
          ui_dir=args.ui)
    return 0


COMMANDS = {
    "train-agent": cmd_train_agent,
    "collect": cmd_collect,
    "train-cf": cmd_train_cf,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "explain": cmd_explain,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors; map the latter to 1.
        return 0 if exc.code == 0 else 1
    _setup_torch()
    try:
        cfg = _load_file_config(args)
        return COMMANDS[args.command](args, cfg)
    except (SafeCFError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2


if __name__ == "__main__":
    sys.exit(main())
