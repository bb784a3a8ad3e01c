"""Checkpoint container: byte format, channel naming, lossless round-trips."""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import pytest
import torch

from storydesk.checkpoint import (
    CHECKPOINT_FORMAT_VERSION,
    CONTAINER_VERSION,
    MAGIC,
    _from_channel_name,
    _to_channel_name,
    checkpoint_hash,
    load_checkpoint,
    read_container,
    read_metadata,
    save_checkpoint,
    write_container,
)
from storydesk.errors import CheckpointError
from storydesk.layout import FrameMask
from storydesk.model import ModelConfig, build_story_model
from storydesk.sampler import SamplerConfig, ddim_masked_sample
from tests.test_sampler import make_board, make_story

CHANNELS = ("base.", "lora_frame.", "lora_story.", "context.", "textenc.")


def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "base.block.weight": rng.normal(size=(4, 3, 3, 3)).astype("<f4"),
        "context.scalar": np.float32(2.5),
        "lora_frame.q.up": rng.normal(size=(8, 2)).astype("<f4"),
        "textenc.table": rng.normal(size=(20,)).astype("<f4"),
    }


class TestContainer:
    def test_round_trip_preserves_everything(self, tmp_path):
        path = tmp_path / "c.ckpt"
        meta = {"format_version": 1, "kind": "demo", "step": 42,
                "nested": {"a": [1, 2], "b": "x"}}
        tensors = sample_tensors()
        write_container(path, meta, tensors)
        got_meta, got_tensors = read_container(path)
        assert got_meta["step"] == 42
        assert got_meta["nested"] == {"a": [1, 2], "b": "x"}
        assert got_meta["tensor_count"] == len(tensors)
        assert set(got_tensors) == set(tensors)
        for name, arr in tensors.items():
            assert got_tensors[name].dtype == np.float32
            assert np.array_equal(got_tensors[name],
                                  np.asarray(arr, dtype=np.float32))

    def test_writes_are_canonical(self, tmp_path):
        tensors = sample_tensors()
        shuffled = dict(reversed(list(tensors.items())))
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        write_container(a, {"kind": "demo", "z": 1, "a": 2}, tensors)
        write_container(b, {"a": 2, "kind": "demo", "z": 1}, shuffled)
        assert a.read_bytes() == b.read_bytes()

    def test_float64_input_is_stored_as_float32(self, tmp_path):
        path = tmp_path / "c.ckpt"
        wide = np.array([1.0, 1e-9, np.pi], dtype=np.float64)
        write_container(path, {"kind": "demo"}, {"base.x": wide})
        _, tensors = read_container(path)
        assert tensors["base.x"].dtype == np.float32
        assert np.array_equal(tensors["base.x"], wide.astype(np.float32))

    def test_header_layout_is_as_documented(self, tmp_path):
        path = tmp_path / "c.ckpt"
        write_container(path, {"kind": "demo"}, {})
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        assert struct.unpack("<I", raw[4:8])[0] == CONTAINER_VERSION
        (meta_len,) = struct.unpack("<Q", raw[8:16])
        meta = json.loads(raw[16:16 + meta_len])
        assert meta == {"kind": "demo", "tensor_count": 0}
        assert len(raw) == 16 + meta_len


class TestContainerCorruption:
    def write_good(self, tmp_path):
        path = tmp_path / "c.ckpt"
        write_container(path, {"kind": "demo"}, sample_tensors())
        return path

    def test_bad_magic(self, tmp_path):
        path = self.write_good(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="bad magic"):
            read_container(path)

    def test_unsupported_container_version(self, tmp_path):
        path = self.write_good(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version 99"):
            read_container(path)

    @pytest.mark.parametrize("keep", [2, 10, 17, 40, 90])
    def test_truncation_is_reported_not_crashed(self, tmp_path, keep):
        path = self.write_good(tmp_path)
        path.write_bytes(path.read_bytes()[:keep])
        with pytest.raises(CheckpointError, match="truncated"):
            read_container(path)

    def test_metadata_must_be_json(self, tmp_path):
        path = tmp_path / "c.ckpt"
        blob = b"not json at all"
        path.write_bytes(MAGIC + struct.pack("<I", CONTAINER_VERSION)
                         + struct.pack("<Q", len(blob)) + blob)
        with pytest.raises(CheckpointError, match="not valid JSON"):
            read_container(path)

    def test_tensor_count_required(self, tmp_path):
        path = tmp_path / "c.ckpt"
        blob = b"{}"
        path.write_bytes(MAGIC + struct.pack("<I", CONTAINER_VERSION)
                         + struct.pack("<Q", len(blob)) + blob)
        with pytest.raises(CheckpointError, match="tensor_count"):
            read_container(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = self.write_good(tmp_path)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(CheckpointError, match="trailing"):
            read_container(path)


class TestMetadataOnlyRead:
    def test_matches_full_read_without_tensor_cost(self, tmp_path):
        path = tmp_path / "c.ckpt"
        meta = {"kind": "demo", "step": 42, "train_config": {"steps": 42}}
        write_container(path, meta, sample_tensors())
        full_meta, _ = read_container(path)
        assert read_metadata(path) == full_meta

    def test_header_corruption_reported(self, tmp_path):
        path = tmp_path / "c.ckpt"
        write_container(path, {"kind": "demo"}, sample_tensors())
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="bad magic"):
            read_metadata(path)

    def test_truncated_metadata_reported(self, tmp_path):
        path = tmp_path / "c.ckpt"
        write_container(path, {"kind": "demo"}, sample_tensors())
        path.write_bytes(path.read_bytes()[:20])
        with pytest.raises(CheckpointError, match="truncated"):
            read_metadata(path)

    def test_ignores_tensor_corruption(self, tmp_path):
        path = tmp_path / "c.ckpt"
        write_container(path, {"kind": "demo"}, sample_tensors())
        raw = bytearray(path.read_bytes())
        raw[-8:] = b"\xff" * 8
        path.write_bytes(bytes(raw))
        assert read_metadata(path)["kind"] == "demo"


class TestChannelNames:
    def test_every_model_key_round_trips(self, tiny_model):
        for key in tiny_model.state_dict():
            name = _to_channel_name(key)
            assert name.startswith(CHANNELS)
            assert _from_channel_name(name) == key

    def test_adapters_live_in_their_own_channels(self, tiny_model):
        state = tiny_model.state_dict()
        frame_keys = [k for k in state if ".frame_adapters." in k]
        story_keys = [k for k in state if ".story_adapters." in k]
        assert frame_keys and story_keys
        for key in frame_keys:
            assert _to_channel_name(key).startswith("lora_frame.")
        for key in story_keys:
            assert _to_channel_name(key).startswith("lora_story.")

    def test_unknown_key_rejected(self):
        with pytest.raises(CheckpointError, match="no checkpoint channel"):
            _to_channel_name("optimizer.step")
        with pytest.raises(CheckpointError, match="channel prefix"):
            _from_channel_name("mystery.weight")

    def test_malformed_adapter_name_rejected(self):
        with pytest.raises(CheckpointError, match="malformed"):
            _from_channel_name("lora_frame.up")


@pytest.fixture(scope="module")
def trained_like_model(tiny_config):
    """Randomized model standing in for a trained one."""
    model = build_story_model(tiny_config, seed=9)
    g = torch.Generator().manual_seed(10)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.1)
    model.eval()
    return model


class TestModelCheckpoint:
    def test_parameters_round_trip_bit_exactly(self, trained_like_model,
                                               tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained_like_model, path, step=123,
                        train_config={"p_full": 0.5})
        loaded, meta = load_checkpoint(path)
        assert meta["step"] == 123
        assert meta["kind"] == "model"
        assert meta["format_version"] == CHECKPOINT_FORMAT_VERSION
        assert meta["train_config"] == {"p_full": 0.5}
        assert ModelConfig.from_json(meta["model_config"]) \
            == trained_like_model.config
        want = trained_like_model.state_dict()
        got = loaded.state_dict()
        assert set(got) == set(want)
        for key in want:
            assert torch.equal(got[key], want[key]), key

    def test_save_load_save_is_byte_identical(self, trained_like_model,
                                              tmp_path):
        first = tmp_path / "a.ckpt"
        second = tmp_path / "b.ckpt"
        save_checkpoint(trained_like_model, first, step=7)
        loaded, meta = load_checkpoint(first)
        save_checkpoint(loaded, second, step=meta["step"],
                        train_config=meta["train_config"])
        assert first.read_bytes() == second.read_bytes()

    def test_reloaded_model_samples_bit_exactly(self, trained_like_model,
                                                tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained_like_model, path)
        loaded, _ = load_checkpoint(path)
        layout = trained_like_model.layout
        board = make_board(layout, seed=3)
        story = make_story(layout, seed=4)
        mask = FrameMask.from_string("1011")
        cfg = SamplerConfig(steps=4, seed=21)
        before = ddim_masked_sample(trained_like_model, board, mask, story, cfg)
        after = ddim_masked_sample(loaded, board, mask, story, cfg)
        assert torch.equal(before.data, after.data)

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "p.ckpt"
        write_container(path, {"format_version": CHECKPOINT_FORMAT_VERSION,
                               "kind": "probe"}, {})
        with pytest.raises(CheckpointError, match="kind"):
            load_checkpoint(path)

    def test_format_version_checked(self, trained_like_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained_like_model, path)
        meta, tensors = read_container(path)
        meta["format_version"] = CHECKPOINT_FORMAT_VERSION + 1
        del meta["tensor_count"]
        write_container(path, meta, tensors)
        with pytest.raises(CheckpointError, match="format_version"):
            load_checkpoint(path)

    def test_missing_tensor_reported_as_mismatch(self, trained_like_model,
                                                 tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained_like_model, path)
        meta, tensors = read_container(path)
        del meta["tensor_count"]
        tensors.pop(sorted(tensors)[0])
        write_container(path, meta, tensors)
        with pytest.raises(CheckpointError, match="parameter mismatch"):
            load_checkpoint(path)


class TestHash:
    def test_matches_sha256_of_bytes(self, tmp_path):
        path = tmp_path / "c.ckpt"
        write_container(path, {"kind": "demo"}, sample_tensors())
        want = hashlib.sha256(path.read_bytes()).hexdigest()
        assert checkpoint_hash(path) == want

    def test_distinguishes_files(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        write_container(a, {"kind": "demo", "step": 1}, {})
        write_container(b, {"kind": "demo", "step": 2}, {})
        assert checkpoint_hash(a) != checkpoint_hash(b)
