import numpy as np
import pytest
import torch

from oracles import TINY_ENCODER, TINY_PREDICTOR, tiny_model
from siamlab.checkpoint import (
    checkpoint_handle,
    digest_of,
    load_checkpoint,
    model_digest,
    read_metadata,
    save_checkpoint,
)
from siamlab.data import ImageDataset
from siamlab.errors import IntegrityError
from siamlab.model import EncoderSpec, PredictorSpec, build_model
from siamlab.trainer import TrainConfig, TrainState, pretrain, train_step


def _dataset(n=12, size=8):
    g = torch.Generator().manual_seed(5)
    return ImageDataset(torch.rand(n, 3, size, size, generator=g), None, "train", "test-fixture")


def _trained_state(steps=2):
    state = TrainState.fresh(tiny_model(), 3, config_digest="abc123")
    imgs = torch.rand(4, 3, 8, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    for _ in range(steps):
        train_step(state, imgs, TrainConfig(), 0.05)
    return state


def _assert_same_state(a, b):
    for (n, p), (_, q) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert p.dtype == q.dtype, n
        assert p.numpy().tobytes() == q.numpy().tobytes(), n
    for u, v in zip(a.momentum_buffers, b.momentum_buffers):
        assert u.numpy().tobytes() == v.numpy().tobytes()
    assert (a.global_step, a.epoch, a.rng_state, a.config_digest) == (b.global_step, b.epoch, b.rng_state, b.config_digest)


class TestRoundTrip:
    def test_state_restored_bitwise(self, tmp_path):
        state = _trained_state()
        handle = save_checkpoint(state, tmp_path / "a.ckpt", train_config=TrainConfig())
        restored = load_checkpoint(tmp_path / "a.ckpt")
        _assert_same_state(state, restored)
        assert handle.global_step == 2 and handle.config_digest == "abc123"
        assert checkpoint_handle(tmp_path / "a.ckpt") == handle

    def test_recipe_round_trips(self, tmp_path):
        save_checkpoint(_trained_state(1), tmp_path / "a.ckpt", train_config=TrainConfig())
        meta = read_metadata(tmp_path / "a.ckpt")
        assert meta["train_config"]["weight_decay"] == 1e-4
        assert meta["train_config"]["momentum"] == 0.9
        assert TrainConfig(**meta["train_config"]) == TrainConfig()

    def test_float32_model(self, tmp_path):
        state = TrainState.fresh(build_model(TINY_ENCODER, TINY_PREDICTOR, 1), 1)
        save_checkpoint(state, tmp_path / "f.ckpt")
        _assert_same_state(state, load_checkpoint(tmp_path / "f.ckpt"))

    def test_no_temp_file_left(self, tmp_path):
        save_checkpoint(_trained_state(0), tmp_path / "a.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]


class TestIntegrity:
    @pytest.fixture
    def path(self, tmp_path):
        p = tmp_path / "a.ckpt"
        save_checkpoint(_trained_state(1), p)
        return p

    def test_truncated(self, path):
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(IntegrityError, match="truncated"):
            load_checkpoint(path)

    def test_padded(self, path):
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(IntegrityError):
            load_checkpoint(path)

    def test_flipped_byte(self, path):
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(IntegrityError, match="checksum"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"hello world" * 10)
        with pytest.raises(IntegrityError):
            load_checkpoint(p)

    def test_config_digest_mismatch(self, path):
        load_checkpoint(path, expected_config_digest="abc123")
        with pytest.raises(IntegrityError, match="config digest"):
            load_checkpoint(path, expected_config_digest="fff000")

    def test_model_digest_mismatch(self, path):
        other = build_model(EncoderSpec(), PredictorSpec(), 0)
        with pytest.raises(IntegrityError, match="different model"):
            load_checkpoint(path, expected_model_digest=model_digest(other))


class TestDigest:
    def test_key_order_irrelevant(self):
        assert digest_of({"a": 1, "b": {"c": 2, "d": 3}}) == digest_of({"b": {"d": 3, "c": 2}, "a": 1})

    def test_value_sensitive(self):
        assert digest_of({"a": 1}) != digest_of({"a": 2})


def test_resume_is_bitwise_identical(tmp_path):
    # interrupt after 5 steps, restore, continue for 10 more; compare with one uninterrupted run
    cfg = TrainConfig(method="ensiam", K=4, batch_size=4, epochs=5, warmup_epochs=1)
    data = _dataset()
    full = pretrain(cfg, data, TINY_ENCODER, TINY_PREDICTOR, max_steps=15)
    part = pretrain(cfg, data, TINY_ENCODER, TINY_PREDICTOR, max_steps=5)
    save_checkpoint(part.state, tmp_path / "mid.ckpt", train_config=cfg)
    restored = load_checkpoint(tmp_path / "mid.ckpt")
    resumed = pretrain(cfg, data, state=restored, max_steps=15)
    assert resumed.state.global_step == 15
    _assert_same_state(full.state, resumed.state)
    np.testing.assert_array_equal(full.state.model.flat_parameters().numpy(), resumed.state.model.flat_parameters().numpy())
