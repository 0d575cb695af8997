from __future__ import annotations

import json

import numpy as np
import pytest
from PIL import Image

from safecf.cli import main


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """A tiny end-to-end pipeline produced through the CLI itself."""
    root = tmp_path_factory.mktemp("cli-pipeline")
    agent_path = root / "agent.ckpt"
    dataset_dir = root / "dataset"
    cf_dir = root / "cf"

    assert main(["train-agent", "--env", "mini-highway", "--steps", "300",
                 "--seed", "1", "--out", str(agent_path)]) == 0
    assert main(["collect", "--agent", str(agent_path), "--n", "90",
                 "--seed", "2", "--horizon", "25", "--out", str(dataset_dir)]) == 0
    config = root / "gan.json"
    config.write_text(json.dumps({
        "base_channels": 8, "n_resblocks": 1, "critic_channels": 8,
        "probe_every": 100,
    }), encoding="utf-8")
    assert main(["train-cf", "--dataset", str(dataset_dir), "--agent",
                 str(agent_path), "--out", str(cf_dir), "--batch", "8",
                 "--iterations", "2", "--seed", "3",
                 "--config", str(config)]) == 0
    return root


class TestPipeline:
    def test_artifacts_exist(self, pipeline_dir):
        assert (pipeline_dir / "agent.ckpt").exists()
        assert (pipeline_dir / "dataset" / "manifest.json").exists()
        assert (pipeline_dir / "cf" / "generator.ckpt").exists()
        assert (pipeline_dir / "cf" / "critic.ckpt").exists()
        assert (pipeline_dir / "cf" / "train_log.jsonl").exists()

    def test_evaluate_writes_report(self, pipeline_dir):
        out = pipeline_dir / "metrics.json"
        code = main(["evaluate", "--dataset", str(pipeline_dir / "dataset"),
                     "--generator", str(pipeline_dir / "cf" / "generator.ckpt"),
                     "--agent", str(pipeline_dir / "agent.ckpt"),
                     "--split", "test", "--limit", "3", "--out", str(out)])
        assert code == 0
        report = json.loads(out.read_text())
        assert report["split"] == "test"
        assert report["sample_count"] == 12

    def test_explain_writes_grid_with_counter_action_rows(self, pipeline_dir):
        out_dir = pipeline_dir / "explain"
        code = main(["explain", "--dataset", str(pipeline_dir / "dataset"),
                     "--generator", str(pipeline_dir / "cf" / "generator.ckpt"),
                     "--agent", str(pipeline_dir / "agent.ckpt"),
                     "--sample", "4", "--out", str(out_dir)])
        assert code == 0
        info = json.loads((out_dir / "explain.json").read_text())
        # 5-action env: one factual row plus four counter-action rows
        assert len(info["rows"]) == 1 + 4
        img = np.asarray(Image.open(out_dir / "explain_grid.png"))
        assert img.ndim == 3 and img.shape[2] == 3

    def test_deterministic_collect_via_cli(self, pipeline_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["collect", "--agent", str(pipeline_dir / "agent.ckpt"),
                         "--n", "40", "--seed", "9", "--horizon", "10",
                         "--out", str(out)]) == 0
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
        assert (a / "shard-00000.bin").read_bytes() == (b / "shard-00000.bin").read_bytes()


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self):
        assert main(["evaluate", "--no-such-flag"]) == 1

    def test_unknown_command_is_usage_error(self):
        assert main(["frobnicate"]) == 1

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0

    def test_missing_artifact_is_runtime_error(self, tmp_path):
        assert main(["collect", "--agent", str(tmp_path / "missing.ckpt"),
                     "--n", "20", "--out", str(tmp_path / "d")]) == 2

    def test_invalid_config_file_is_runtime_error(self, pipeline_dir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        assert main(["collect", "--agent", str(pipeline_dir / "agent.ckpt"),
                     "--n", "20", "--out", str(tmp_path / "d"),
                     "--config", str(bad)]) == 2


class TestConfigMerging:
    def test_config_file_supplies_defaults_flags_override(self, pipeline_dir, tmp_path):
        config = tmp_path / "c.json"
        config.write_text(json.dumps({"n": 40, "seed": 9, "horizon": 10}),
                          encoding="utf-8")
        out1 = tmp_path / "d1"
        assert main(["collect", "--agent", str(pipeline_dir / "agent.ckpt"),
                     "--out", str(out1), "--config", str(config)]) == 0
        manifest = json.loads((out1 / "manifest.json").read_text())
        assert manifest["n"] == 40
        assert manifest["seed"] == 9
        out2 = tmp_path / "d2"
        assert main(["collect", "--agent", str(pipeline_dir / "agent.ckpt"),
                     "--out", str(out2), "--config", str(config),
                     "--n", "50"]) == 0
        manifest2 = json.loads((out2 / "manifest.json").read_text())
        assert manifest2["n"] == 50
