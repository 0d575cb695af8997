from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safecf.data import (
    Dataset,
    DatasetManifest,
    Sample,
    collect,
    decode_record,
    dequantize,
    encode_record,
    quantize,
    record_size,
    split,
)
from safecf.envs import EnvConfig
from safecf.errors import ConfigurationError, DomainError, EncodingError, IntegrityError


def make_sample(rng: np.random.Generator, h=4, height=48, width=96) -> Sample:
    return Sample(
        gray_stack=rng.integers(0, 256, (h, height, width), dtype=np.uint8),
        rgb=rng.integers(0, 256, (3, height, width), dtype=np.uint8),
        saliency=rng.integers(0, 256, (height, width), dtype=np.uint8),
        action=int(rng.integers(5)),
    )


class TestRecordCodec:
    def test_record_length_default_geometry(self):
        assert record_size(4, 48, 96) == 4 * 4608 + 3 * 4608 + 4608 + 1 == 36865
        sample = make_sample(np.random.default_rng(0))
        assert len(encode_record(sample)) == 36865

    def test_all_zero_sample(self):
        sample = Sample(
            gray_stack=np.zeros((4, 48, 96), dtype=np.uint8),
            rgb=np.zeros((3, 48, 96), dtype=np.uint8),
            saliency=np.zeros((48, 96), dtype=np.uint8),
            action=7,
        )
        buf = encode_record(sample)
        assert buf[:-1] == b"\0" * 36864
        assert buf[-1] == 7

    def test_round_trip(self):
        sample = make_sample(np.random.default_rng(1))
        back = decode_record(encode_record(sample), 4, 48, 96)
        assert np.array_equal(back.gray_stack, sample.gray_stack)
        assert np.array_equal(back.rgb, sample.rgb)
        assert np.array_equal(back.saliency, sample.saliency)
        assert back.action == sample.action

    @settings(max_examples=220, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1),
           h=st.integers(1, 6),
           height=st.integers(4, 24),
           width=st.integers(4, 24))
    def test_round_trip_property(self, seed, h, height, width):
        rng = np.random.default_rng(seed)
        sample = make_sample(rng, h, height, width)
        buf = encode_record(sample)
        assert len(buf) == record_size(h, height, width)
        back = decode_record(buf, h, height, width)
        assert np.array_equal(back.gray_stack, sample.gray_stack)
        assert np.array_equal(back.rgb, sample.rgb)
        assert np.array_equal(back.saliency, sample.saliency)
        assert back.action == sample.action

    def test_shape_mismatch_raises(self):
        sample = make_sample(np.random.default_rng(2))
        sample.rgb = sample.rgb[:, :24]
        with pytest.raises(EncodingError):
            encode_record(sample)

    def test_wrong_dtype_raises(self):
        sample = make_sample(np.random.default_rng(3))
        sample.saliency = sample.saliency.astype(np.float32)
        with pytest.raises(EncodingError):
            encode_record(sample)


class TestQuantization:
    def test_round_trip_error_bound(self):
        rng = np.random.default_rng(4)
        m = rng.random((48, 96)).astype(np.float32)
        err = np.abs(dequantize(quantize(m)) - m)
        assert err.max() <= 1 / 510 + 1e-7

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        q = quantize(rng.random((16, 16)))
        assert np.array_equal(quantize(dequantize(q)), q)


class TestCollect:
    def test_deterministic_manifests_and_shards(self, tiny_agent, env_config, tmp_path):
        m1 = collect(tiny_agent, env_config, n=60, seed=1, out_dir=tmp_path / "a")
        m2 = collect(tiny_agent, env_config, n=60, seed=1, out_dir=tmp_path / "b")
        assert m1.to_json() == m2.to_json()
        for name in m1.shards:
            assert ((tmp_path / "a" / name).read_bytes()
                    == (tmp_path / "b" / name).read_bytes())

    def test_action_counts_sum_to_n(self, tiny_dataset):
        m = tiny_dataset.manifest
        assert sum(m.action_counts) == m.n

    def test_action_histogram_matches_recount(self, tiny_dataset):
        counts = [0] * len(tiny_dataset.manifest.action_counts)
        for i in range(len(tiny_dataset)):
            counts[tiny_dataset.read_sample(i).action] += 1
        assert counts == tiny_dataset.manifest.action_counts

    def test_greedy_actions_match_argmax_replay(self, tiny_dataset, tiny_agent):
        m = tiny_dataset.manifest
        rng = np.random.default_rng(0)
        greedy = [i for i in range(m.n) if i not in set(m.explored)]
        for idx in rng.choice(greedy, size=20, replace=False):
            sample = tiny_dataset.read_sample(int(idx))
            stack = dequantize(sample.gray_stack)
            assert sample.action == int(np.argmax(tiny_agent.q_values(stack)))

    def test_stack_consistency_within_episode(self, tiny_dataset):
        m = tiny_dataset.manifest
        for ep in range(len(m.episode_starts)):
            start, end = m.episode_bounds(ep)
            for t in range(start, min(end - 1, start + 5)):
                a = tiny_dataset.read_sample(t)
                b = tiny_dataset.read_sample(t + 1)
                assert np.array_equal(a.gray_stack[1:], b.gray_stack[:-1])

    def test_current_frame_is_last(self, tiny_dataset, env_config):
        # First sample of an episode: all frames equal (reset padding).
        first = tiny_dataset.read_sample(0)
        for j in range(env_config.h - 1):
            assert np.array_equal(first.gray_stack[j], first.gray_stack[-1])

    def test_n_too_small(self, tiny_agent, env_config, tmp_path):
        with pytest.raises(ConfigurationError):
            collect(tiny_agent, env_config, n=5, seed=0, out_dir=tmp_path / "x")

    def test_saliency_values_dequantize_into_unit_interval(self, tiny_dataset):
        s = tiny_dataset.read_sample(3)
        d = dequantize(s.saliency)
        assert d.min() >= 0.0 and d.max() <= 1.0


class TestRead:
    def test_read_returns_written_record(self, tiny_dataset):
        sample = tiny_dataset.read_sample(17)
        raw = tiny_dataset.record_bytes(17)
        m = tiny_dataset.manifest
        again = decode_record(raw, m.h, m.height, m.width)
        assert np.array_equal(again.gray_stack, sample.gray_stack)
        assert again.action == sample.action

    def test_index_out_of_range(self, tiny_dataset):
        with pytest.raises(DomainError):
            tiny_dataset.read_sample(tiny_dataset.manifest.n)
        with pytest.raises(DomainError):
            tiny_dataset.read_sample(-1)

    def test_truncated_shard_names_the_shard(self, tiny_agent, env_config, tmp_path):
        out = tmp_path / "ds"
        manifest = collect(tiny_agent, env_config, n=30, seed=2, out_dir=out)
        shard = out / manifest.shards[0]
        shard.write_bytes(shard.read_bytes()[:-10])
        ds = Dataset(out)
        with pytest.raises(IntegrityError, match=manifest.shards[0]):
            ds.read_sample(0)

    def test_episode_and_step_indices(self, tiny_dataset):
        m = tiny_dataset.manifest
        start, _ = m.episode_bounds(1)
        s = tiny_dataset.read_sample(start + 2)
        assert s.episode_index == 1
        assert s.step_index == 2


def fabricated_manifest(n=100, n_episodes=10) -> DatasetManifest:
    lengths = [n // n_episodes] * n_episodes
    starts = list(np.cumsum([0] + lengths[:-1]))
    return DatasetManifest(
        env_id="mini-highway", h=4, height=48, width=96,
        action_names=["a", "b", "c", "d", "e"], agent_hash="x", n=n,
        shards=["shard-00000.bin"], splits={"train": [], "val": [], "test": []},
        seed=0, action_counts=[n, 0, 0, 0, 0], episode_starts=starts,
        explored=[],
    )


class TestSplit:
    def test_equal_episodes_split_exactly(self):
        m = split(fabricated_manifest(), (0.8, 0.1, 0.1), seed=0)
        assert len(m.splits["train"]) == 80
        assert len(m.splits["val"]) == 10
        assert len(m.splits["test"]) == 10

    def test_same_seed_same_split(self):
        a = split(fabricated_manifest(), (0.8, 0.1, 0.1), seed=4)
        b = split(fabricated_manifest(), (0.8, 0.1, 0.1), seed=4)
        assert a.splits == b.splits

    def test_disjoint_and_exhaustive(self, tiny_dataset):
        splits = tiny_dataset.manifest.splits
        all_idx = sorted(i for idx in splits.values() for i in idx)
        assert all_idx == list(range(tiny_dataset.manifest.n))

    def test_episodes_stay_whole(self, tiny_dataset):
        m = tiny_dataset.manifest
        for name, indices in m.splits.items():
            episodes = {m.episode_of(i) for i in indices}
            for ep in episodes:
                start, end = m.episode_bounds(ep)
                assert set(range(start, end)) <= set(indices)

    def test_ratios_must_sum_to_one(self):
        with pytest.raises(ConfigurationError):
            split(fabricated_manifest(), (0.8, 0.1, 0.2), seed=0)

    def test_fewer_episodes_than_splits(self):
        m = fabricated_manifest(n=10, n_episodes=2)
        with pytest.raises(ConfigurationError):
            split(m, (0.8, 0.1, 0.1), seed=0)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 1000), n_episodes=st.integers(3, 30))
    def test_split_property_disjoint_exhaustive(self, seed, n_episodes):
        m = split(fabricated_manifest(n=n_episodes * 7, n_episodes=n_episodes),
                  (0.8, 0.1, 0.1), seed=seed)
        all_idx = sorted(i for idx in m.splits.values() for i in idx)
        assert all_idx == list(range(m.n))
        for name in ("train", "val", "test"):
            assert m.splits[name], f"{name} split is empty"


class TestManifestSerialization:
    def test_json_round_trip(self, tiny_dataset):
        m = tiny_dataset.manifest
        again = DatasetManifest.from_json(m.to_json())
        assert dataclasses.asdict(again) == dataclasses.asdict(m)

    def test_manifest_is_valid_utf8_json(self, tiny_dataset):
        parsed = json.loads((tiny_dataset.directory / "manifest.json")
                            .read_text(encoding="utf-8"))
        assert parsed["env_id"] == "mini-highway"
        assert parsed["n"] == tiny_dataset.manifest.n
