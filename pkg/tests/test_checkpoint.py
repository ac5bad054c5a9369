"""Checkpoint container: byte determinism, round trips, corruption handling."""

import numpy as np
import pytest

from prefcurate.checkpoint import load_checkpoint, save_checkpoint, sha256_file
from prefcurate.errors import InputError, ManifestError
from prefcurate.models import (
    LinearConfig,
    LinearRewardModel,
    TinyTransformerRewardModel,
    TransformerConfig,
)

RNG = np.random.default_rng(5)

SMALL = TransformerConfig(
    vocab_size=32, max_len=8, width=4, layers=1, heads=2,
    ffn_mult=2, adapter_rank=1, adapter_dropout=0.0,
)


def models():
    linear = LinearRewardModel(LinearConfig(vocab_size=32, feature_dim=4))
    return [linear.with_params(RNG.standard_normal(4)), TinyTransformerRewardModel(SMALL)]


class TestRoundTrip:
    def test_rebuild_matches_original(self, tmp_path):
        for i, model in enumerate(models()):
            path = tmp_path / f"m{i}.ckpt"
            save_checkpoint(model, path)
            loaded, _ = load_checkpoint(path)
            assert np.array_equal(loaded.params, model.params)
            tokens = tuple(int(t) for t in RNG.integers(0, 32, size=5))
            assert loaded.reward(tokens) == model.reward(tokens)
            assert loaded.architecture() == model.architecture()

    def test_resave_is_byte_identical(self, tmp_path):
        model = models()[1]
        first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        id_first = save_checkpoint(model, first)
        loaded, load_id = load_checkpoint(first)
        id_second = save_checkpoint(loaded, second)
        assert first.read_bytes() == second.read_bytes()
        assert id_first == id_second == load_id

    def test_id_is_file_sha256(self, tmp_path):
        path = tmp_path / "m.ckpt"
        checkpoint_id = save_checkpoint(models()[0], path)
        assert checkpoint_id == sha256_file(path)
        assert len(checkpoint_id) == 64


class TestCorruption:
    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError, match="not found"):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(models()[0], path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ManifestError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_truncated_body(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(models()[0], path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])
        with pytest.raises(ManifestError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(models()[0], path)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(ManifestError, match="trailing"):
            load_checkpoint(path)

    def test_garbled_header(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(models()[0], path)
        raw = path.read_bytes()
        magic_end = raw.index(b"\n") + 1
        body = raw[magic_end:]
        garbled = raw[:magic_end] + b"\xff\xfe{" + body[3:]
        path.write_bytes(garbled)
        with pytest.raises(ManifestError):
            load_checkpoint(path)
