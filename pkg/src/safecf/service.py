"""HTTP service exposing the dataset, frozen agent, and trained generator.

All endpoints are read-only and stateless between requests; counterfactual
generation runs synchronously per request and identical requests produce
byte-identical responses.
"""

from __future__ import annotations

import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .agents import Agent, load_agent
from .checkpoint import read_checkpoint
from .data import Dataset, dequantize
from .errors import ConfigurationError
from .gan import CFGenerator
from .images import png_base64, rescaled_diff
from .metrics import proximity, sparsity


class CFRequest(BaseModel):
    sample_index: int
    target_action: int


def create_app(dataset_dir, agent_path, generator_path,
               metrics_path=None, ui_dir=None) -> FastAPI:
    dataset = Dataset(dataset_dir)
    agent = load_agent(agent_path)
    generator = CFGenerator.from_checkpoint(read_checkpoint(generator_path))
    manifest = dataset.manifest

    if manifest.agent_hash != agent.hash:
        raise ConfigurationError("dataset was collected with a different agent")
    if (generator.h, generator.height, generator.width) != (
            manifest.h, manifest.height, manifest.width):
        raise ConfigurationError("generator shape does not match the dataset")

    app = FastAPI(title="safe-cf explain service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
        expose_headers=["X-Total-Count"],
    )

    @app.exception_handler(Exception)
    async def internal_error(request: Request, exc: Exception):
        error_id = uuid.uuid4().hex[:12]
        return JSONResponse(
            status_code=500,
            content={"detail": "internal error", "error_id": error_id},
        )

    def sample_summary(idx: int) -> dict:
        sample = dataset.read_sample(idx)
        return {
            "index": idx,
            "action": sample.action,
            "action_name": manifest.action_names[sample.action],
            "episode_index": sample.episode_index,
            "step_index": sample.step_index,
        }

    @app.get("/api/meta")
    def meta():
        return {
            "env_id": manifest.env_id,
            "action_names": manifest.action_names,
            "h": manifest.h,
            "height": manifest.height,
            "width": manifest.width,
            "n": manifest.n,
            "splits": {name: len(idx) for name, idx in manifest.splits.items()},
            "action_counts": manifest.action_counts,
            "agent_hash": manifest.agent_hash,
            "has_rgb_cf": generator.config.rgb_head,
        }

    @app.get("/api/samples")
    def samples(response: Response, split: str = "", offset: int = 0, limit: int = 50):
        if split:
            if split not in manifest.splits:
                raise HTTPException(404, f"unknown split {split!r}")
            indices = manifest.splits[split]
        else:
            indices = list(range(manifest.n))
        limit = max(0, min(limit, 500))
        offset = max(0, offset)
        page = indices[offset:offset + limit]
        response.headers["X-Total-Count"] = str(len(indices))
        return {"items": [sample_summary(int(i)) for i in page],
                "total": len(indices)}

    @app.get("/api/samples/{idx}")
    def sample_detail(idx: int):
        if not 0 <= idx < manifest.n:
            raise HTTPException(404, f"sample {idx} not found")
        sample = dataset.read_sample(idx)
        frames = dequantize(sample.gray_stack)
        return {
            **sample_summary(idx),
            "frames": [png_base64(frames[j]) for j in range(manifest.h)],
            "rgb": png_base64(dequantize(sample.rgb)),
            "saliency": png_base64(dequantize(sample.saliency)),
        }

    @app.post("/api/counterfactual")
    def counterfactual(req: CFRequest):
        if not 0 <= req.sample_index < manifest.n:
            raise HTTPException(404, f"sample {req.sample_index} not found")
        sample = dataset.read_sample(req.sample_index)
        if not 0 <= req.target_action < generator.n_actions:
            raise HTTPException(422, f"target action {req.target_action} out of range")
        if req.target_action == sample.action:
            raise HTTPException(422, "target action equals the factual action")

        stack = dequantize(sample.gray_stack)
        saliency = dequantize(sample.saliency)
        out = generator.generate(stack, saliency, req.target_action)
        achieved = int(np.argmax(agent.q_values(out.cf_stack)))
        return {
            "cf_frames": [png_base64(out.cf_stack[j]) for j in range(manifest.h)],
            "cf_rgb": png_base64(out.cf_rgb) if out.cf_rgb is not None else None,
            "saliency": png_base64(saliency),
            "cf_saliency": png_base64(out.cf_saliency),
            "diff_map": png_base64(rescaled_diff(stack[-1], out.cf_stack[-1])),
            "attention": png_base64(out.att),
            "achieved_action": achieved,
            "valid": achieved == req.target_action,
            "proximity": proximity(stack, out.cf_stack),
            "sparsity": sparsity(stack, out.cf_stack),
            "factual_action": sample.action,
            "target_action": req.target_action,
            "action_names": manifest.action_names,
        }

    @app.get("/api/metrics/summary")
    def metrics_summary():
        path = Path(metrics_path) if metrics_path else None
        if path is None or not path.exists():
            raise HTTPException(404, "no metrics report available")
        import json

        return json.loads(path.read_text(encoding="utf-8"))

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def serve(dataset_dir, agent_path, generator_path, port: int = 8099,
          metrics_path=None, ui_dir=None) -> None:
    import uvicorn

    app = create_app(dataset_dir, agent_path, generator_path,
                     metrics_path=metrics_path, ui_dir=ui_dir)
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="info")
