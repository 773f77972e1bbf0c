"""Checkpoint files: bit-exact round trips and corruption handling."""

import numpy as np
import pytest

from xsmae.checkpoint import (CHECKPOINT_MAGIC, Checkpoint, load_checkpoint,
                              save_checkpoint)
from xsmae.config import TrainConfig, config_hash
from xsmae.errors import CheckpointError
from xsmae.train import pretrain


def tiny_config(**overrides):
    base = dict(max_steps=3, batch_size=4, base_lr=1e-3, seed=0,
                image_size=16, patch_size=4, channels=1,
                enc_width=16, enc_depth=1, enc_heads=2,
                dec_width=16, dec_depth=1, dec_heads=2, proj_dim=8)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(1)
    images = rng.uniform(size=(8, 16, 16, 1)).astype(np.float32)
    ckpt, _ = pretrain(tiny_config(), images)
    return ckpt


class TestRoundTrip:
    def test_save_load_save_identical_bytes(self, trained, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, trained)
        save_checkpoint(b, load_checkpoint(a))
        assert a.read_bytes() == b.read_bytes()

    def test_loaded_state_matches_exactly(self, trained, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, trained)
        loaded = load_checkpoint(path)
        assert loaded.step == trained.step
        assert loaded.config == trained.config
        assert loaded.rng_state == trained.rng_state
        assert loaded.params.names() == trained.params.names()
        for name in trained.params.names():
            a, b = loaded.params[name].data, trained.params[name].data
            assert a.dtype == b.dtype and np.array_equal(a, b)
            assert loaded.params[name].requires_grad
        for name in trained.adam_m:
            assert np.array_equal(loaded.adam_m[name], trained.adam_m[name])
            assert np.array_equal(loaded.adam_v[name], trained.adam_v[name])

    def test_identical_runs_write_identical_files(self, tmp_path):
        rng = np.random.default_rng(1)
        images = rng.uniform(size=(8, 16, 16, 1)).astype(np.float32)
        paths = []
        for tag in ("x", "y"):
            ckpt, _ = pretrain(tiny_config(), images)
            path = tmp_path / f"{tag}.ckpt"
            save_checkpoint(path, ckpt)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_no_temp_file_left_behind(self, trained, tmp_path):
        path = tmp_path / "d.ckpt"
        save_checkpoint(path, trained)
        assert [p.name for p in tmp_path.iterdir()] == ["d.ckpt"]


class TestValidation:
    def test_file_starts_with_magic(self, trained, tmp_path):
        path = tmp_path / "e.ckpt"
        save_checkpoint(path, trained)
        assert path.read_bytes().startswith(CHECKPOINT_MAGIC)

    def test_corrupted_magic_rejected(self, trained, tmp_path):
        path = tmp_path / "f.ckpt"
        save_checkpoint(path, trained)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(raw)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, trained, tmp_path):
        path = tmp_path / "g.ckpt"
        save_checkpoint(path, trained)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_tampered_config_text_fails_hash_check(self, trained, tmp_path):
        path = tmp_path / "h.ckpt"
        save_checkpoint(path, trained)
        raw = path.read_bytes()
        tampered = raw.replace(b"base_gsd = 1.0", b"base_gsd = 9.0")
        assert tampered != raw
        path.write_bytes(tampered)
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(path)

    def test_expected_config_mismatch_rejected(self, trained, tmp_path):
        path = tmp_path / "i.ckpt"
        save_checkpoint(path, trained)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected=tiny_config(seed=99))
        load_checkpoint(path, expected=tiny_config())

    def test_stored_hash_matches_config(self, trained, tmp_path):
        path = tmp_path / "j.ckpt"
        save_checkpoint(path, trained)
        raw = path.read_bytes()
        assert raw[6:38] == config_hash(trained.config)


class TestResumeViaFile:
    def test_resume_from_disk_matches_straight_run(self, tmp_path):
        rng = np.random.default_rng(2)
        images = rng.uniform(size=(8, 16, 16, 1)).astype(np.float32)
        cfg = tiny_config(max_steps=6)
        half, _ = pretrain(cfg, images, stop_after_step=3)
        path = tmp_path / "half.ckpt"
        save_checkpoint(path, half)
        resumed, _ = pretrain(cfg, images, resume=load_checkpoint(path, expected=cfg))
        straight, _ = pretrain(cfg, images)
        for name in straight.params.names():
            assert resumed.params[name].data.tobytes() == straight.params[name].data.tobytes()
