"""Checkpoint container round-trips."""

import numpy as np
import pytest

from tgcritic.nn import CheckpointError, load_checkpoint, save_checkpoint

rng = np.random.default_rng(4242)


def test_round_trip_values(tmp_path):
    tensors = {
        "a/w": rng.standard_normal((3, 4)),
        "a/b": rng.standard_normal(4),
        "scalar": np.array(2.5),
    }
    save_checkpoint(tmp_path / "ck", tensors, extra={"seed": 7})
    loaded, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["seed"] == 7
    assert list(loaded) == list(tensors)
    for name, arr in tensors.items():
        assert loaded[name].dtype == np.float32
        np.testing.assert_array_equal(loaded[name], arr.astype(np.float32))


def test_save_load_save_is_bit_exact(tmp_path):
    tensors = {"w": rng.standard_normal((16, 16)), "b": rng.standard_normal(16)}
    p1 = save_checkpoint(tmp_path / "c1", tensors)
    loaded, _ = load_checkpoint(p1)
    p2 = save_checkpoint(tmp_path / "c2", loaded)
    assert (p1 / "weights.bin").read_bytes() == (p2 / "weights.bin").read_bytes()
    assert (p1 / "manifest.json").read_bytes() == (p2 / "manifest.json").read_bytes()


def test_truncated_blob_rejected(tmp_path):
    p = save_checkpoint(tmp_path / "ck", {"w": rng.standard_normal(8)})
    blob = (p / "weights.bin").read_bytes()
    (p / "weights.bin").write_bytes(blob[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_missing_manifest_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope")
