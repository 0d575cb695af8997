from __future__ import annotations

import numpy as np
import pytest
import torch

from safecf.data import dequantize
from safecf.errors import DomainError
from safecf.metrics import (
    embed_stacks,
    evaluate,
    frechet_distance,
    perceptual_distance,
    proximity,
    sparsity,
    validity,
)

from conftest import random_obs


class TestValidity:
    def test_all_succeed(self, tiny_agent):
        rng = np.random.default_rng(0)
        stacks, targets = [], []
        for _ in range(6):
            obs = random_obs(rng)
            stacks.append(obs)
            targets.append(int(np.argmax(tiny_agent.q_values(obs))))
        assert validity(tiny_agent, list(zip(stacks, targets))) == 100.0

    def test_three_of_four(self, tiny_agent):
        rng = np.random.default_rng(1)
        pairs = []
        for i in range(4):
            obs = random_obs(rng)
            best = int(np.argmax(tiny_agent.q_values(obs)))
            target = best if i < 3 else (best + 1) % 5
            pairs.append((obs, target))
        assert validity(tiny_agent, pairs) == 75.0

    def test_identity_state_with_factual_target(self, tiny_agent, tiny_dataset):
        sample = tiny_dataset.read_sample(2)
        stack = dequantize(sample.gray_stack)
        assert validity(tiny_agent, [(stack, sample.action)]) == 100.0

    def test_empty_rejected(self, tiny_agent):
        with pytest.raises(DomainError):
            validity(tiny_agent, [])

    def test_invariant_under_q_rescaling(self, tiny_agent):
        rng = np.random.default_rng(2)
        pairs = [(random_obs(rng), int(rng.integers(5))) for _ in range(8)]
        base = validity(tiny_agent, pairs)
        scaled = type(tiny_agent)(tiny_agent.config, "mini-highway")
        scaled.net.load_state_dict(tiny_agent.net.state_dict())
        with torch.no_grad():
            scaled.net.head.weight.mul_(3.0)
            scaled.net.head.bias.mul_(3.0)
        assert validity(scaled, pairs) == base


class TestProximity:
    def test_identical_is_zero(self):
        s = np.random.default_rng(3).random((4, 8, 8)).astype(np.float32)
        assert proximity(s, s) == 0.0

    def test_full_range_shift(self):
        s = np.zeros((4, 8, 8), dtype=np.float32)
        assert proximity(s, np.ones_like(s)) == pytest.approx(255.0, abs=1e-6)

    def test_single_pixel_half_change(self):
        s = np.zeros((1, 8, 8), dtype=np.float32)
        s_cf = s.copy()
        s_cf[0, 3, 4] = 0.5
        assert proximity(s, s_cf) == pytest.approx(255 * 0.5 / 64, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            proximity(np.zeros((4, 8, 8)), np.zeros((4, 8, 7)))


class TestSparsity:
    def test_identical_is_zero(self):
        s = np.random.default_rng(4).random((4, 4, 4)).astype(np.float32)
        assert sparsity(s, s) == 0.0

    def test_one_pixel_of_64(self):
        s = np.zeros((4, 4, 4), dtype=np.float32)
        s_cf = s.copy()
        s_cf[1, 2, 3] = 1.0
        assert sparsity(s, s_cf) == pytest.approx(100 / 64, abs=1e-9)

    def test_sub_quantum_change_is_invisible(self):
        rng = np.random.default_rng(5)
        s = rng.integers(0, 256, (4, 4, 4)).astype(np.float32) / 255.0
        s_cf = s + 0.001  # 0.255 of one 8-bit step: rounds to the same bin
        assert sparsity(s, s_cf) == 0.0

    def test_proximity_zero_iff_sparsity_zero_on_quantized(self):
        rng = np.random.default_rng(6)
        s = rng.integers(0, 256, (2, 6, 6)).astype(np.float32) / 255.0
        s_cf = s.copy()
        assert proximity(s, s_cf) == 0.0 and sparsity(s, s_cf) == 0.0
        s_cf[0, 0, 0] += 2 / 255
        assert proximity(s, s_cf) > 0.0 and sparsity(s, s_cf) > 0.0


class TestFrechet:
    def test_identical_sets_near_zero(self):
        rng = np.random.default_rng(7)
        feats = rng.standard_normal((256, 16))
        assert frechet_distance(feats, feats) <= 1e-4

    def test_one_dimensional_mean_shift(self):
        rng = np.random.default_rng(0)
        a = rng.normal(0.0, 1.0, size=(10_000, 1))
        b = rng.normal(1.0, 1.0, size=(10_000, 1))
        dist = frechet_distance(a, b)
        # exact 1-D closed form on the sample moments ...
        closed = ((a.mean() - b.mean()) ** 2
                  + (a.std(ddof=1) - b.std(ddof=1)) ** 2)
        assert dist == pytest.approx(closed, abs=1e-6)
        # ... and the population value within sampling tolerance
        assert dist == pytest.approx(1.0, abs=0.05)

    def test_one_dimensional_scale_shift(self):
        rng = np.random.default_rng(0)
        a = rng.normal(0.0, 1.0, size=(10_000, 1))
        b = rng.normal(0.0, 2.0, size=(10_000, 1))
        dist = frechet_distance(a, b)
        closed = ((a.mean() - b.mean()) ** 2
                  + (a.std(ddof=1) - b.std(ddof=1)) ** 2)
        assert dist == pytest.approx(closed, abs=1e-6)
        assert dist == pytest.approx(1.0, abs=0.05)

    def test_symmetry(self):
        rng = np.random.default_rng(10)
        a = rng.standard_normal((300, 8))
        b = rng.standard_normal((280, 8)) * 1.5 + 0.3
        assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8

    def test_dim_mismatch(self):
        with pytest.raises(DomainError):
            frechet_distance(np.zeros((10, 3)), np.zeros((10, 4)))


class TestPerceptual:
    def test_identical_is_zero(self, tiny_agent):
        s = random_obs(np.random.default_rng(11))
        assert perceptual_distance(tiny_agent, s, s) == 0.0

    def test_symmetric(self, tiny_agent):
        rng = np.random.default_rng(12)
        a, b = random_obs(rng), random_obs(rng)
        assert perceptual_distance(tiny_agent, a, b) == pytest.approx(
            perceptual_distance(tiny_agent, b, a), rel=1e-9)

    def test_matches_straight_line_reimplementation(self, tiny_agent):
        rng = np.random.default_rng(13)
        a, b = random_obs(rng), random_obs(rng)

        # independent reimplementation: explicit loops over layers/positions
        total = 0.0
        layers = len(tiny_agent.net.convs)
        for layer in range(layers):
            fa = tiny_agent.trunk_features(a, layer).astype(np.float64)
            fb = tiny_agent.trunk_features(b, layer).astype(np.float64)
            C, H, W = fa.shape
            acc = 0.0
            for y in range(H):
                for x in range(W):
                    va, vb = fa[:, y, x], fb[:, y, x]
                    na = va / max(np.linalg.norm(va), 1e-10)
                    nb = vb / max(np.linalg.norm(vb), 1e-10)
                    acc += float(np.sum((na - nb) ** 2))
            total += acc / (C * H * W)
        expected = total / layers
        assert perceptual_distance(tiny_agent, a, b) == pytest.approx(expected, rel=1e-4)


class TestEvaluate:
    def test_identity_generator_stub(self, tiny_dataset, tiny_agent, identity_generator):
        report = evaluate(tiny_dataset, "test", identity_generator, tiny_agent)
        n_pairs = len(tiny_dataset.manifest.splits["test"]) * 4
        assert report.sample_count == n_pairs
        assert report.proximity == 0.0
        assert report.sparsity == 0.0
        # complementary targets never match the greedy action on an unchanged state
        assert report.validity == 0.0
        assert report.frechet <= 1e-4

    def test_per_action_breakdown_sums_to_aggregate(self, tiny_dataset, tiny_agent,
                                                    tiny_generator):
        report = evaluate(tiny_dataset, "test", tiny_generator, tiny_agent)
        weighted = sum(v["validity"] * v["count"] for v in report.per_action.values())
        counts = sum(v["count"] for v in report.per_action.values())
        assert counts == report.sample_count
        assert weighted / counts == pytest.approx(report.validity, abs=1e-9)

    def test_eval_limit(self, tiny_dataset, tiny_agent, identity_generator):
        report = evaluate(tiny_dataset, "test", identity_generator, tiny_agent,
                          eval_limit=3)
        assert report.sample_count == 3 * 4

    def test_empty_split_rejected(self, tiny_dataset, tiny_agent, tiny_generator):
        with pytest.raises(DomainError):
            evaluate(tiny_dataset, "nope", tiny_generator, tiny_agent)

    def test_report_serialization_round_trip(self, tiny_dataset, tiny_agent,
                                             identity_generator):
        from safecf.metrics import MetricsReport

        report = evaluate(tiny_dataset, "val", identity_generator, tiny_agent,
                          eval_limit=2)
        again = MetricsReport.from_json(report.to_json())
        assert again == report


class TestEmbedding:
    def test_shape_and_determinism(self, tiny_agent):
        rng = np.random.default_rng(14)
        stacks = np.stack([random_obs(rng) for _ in range(5)])
        feats = embed_stacks(tiny_agent, stacks)
        assert feats.shape == (5, tiny_agent.config.conv_output_shape()[0])
        assert np.array_equal(feats, embed_stacks(tiny_agent, stacks))
