"""Container round-trips and rejection of malformed checkpoint files."""

import json

import numpy as np
import pytest

from magprompt.checkpoint import read_checkpoint, write_checkpoint


def test_round_trip_bit_identical(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([[3.25]])}
    path = tmp_path / "ck.json"
    write_checkpoint(path, "MAGP-CKPT-1", {"k": 1}, arrays)
    meta, back = read_checkpoint(path, "MAGP-CKPT-1")
    assert meta == {"k": 1}
    assert list(back) == ["a", "b"]  # blob order preserved
    for name in arrays:
        assert np.array_equal(back[name], arrays[name])
        assert back[name].dtype == np.float64


def test_write_is_deterministic(tmp_path):
    arrays = {"w": np.linspace(0, 1, 7).reshape(7, 1)}
    write_checkpoint(tmp_path / "x.json", "MAGP-CKPT-1", {"seed": 3}, arrays)
    write_checkpoint(tmp_path / "y.json", "MAGP-CKPT-1", {"seed": 3}, arrays)
    x = (tmp_path / "x.json").read_text().replace('"x.bin"', '"z.bin"')
    y = (tmp_path / "y.json").read_text().replace('"y.bin"', '"z.bin"')
    assert x == y
    assert (tmp_path / "x.bin").read_bytes() == (tmp_path / "y.bin").read_bytes()


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "ck.json"
    write_checkpoint(path, "MAGP-CKPT-1", {}, {"a": np.zeros((1, 1))})
    with pytest.raises(ValueError, match="magic"):
        read_checkpoint(path, "MAGP-PROMPT-1")


def test_truncated_blob_rejected(tmp_path):
    path = tmp_path / "ck.json"
    write_checkpoint(path, "MAGP-CKPT-1", {}, {"a": np.zeros((4, 2))})
    blob = tmp_path / "ck.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        read_checkpoint(path, "MAGP-CKPT-1")


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "ck.json"
    write_checkpoint(path, "MAGP-CKPT-1", {}, {"a": np.zeros((1, 1))})
    blob = tmp_path / "ck.bin"
    blob.write_bytes(blob.read_bytes() + b"\x00" * 4)
    with pytest.raises(ValueError, match="trailing"):
        read_checkpoint(path, "MAGP-CKPT-1")


def test_missing_files_rejected(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "nope.json", "MAGP-CKPT-1")
    path = tmp_path / "ck.json"
    write_checkpoint(path, "MAGP-CKPT-1", {}, {"a": np.zeros((1, 1))})
    (tmp_path / "ck.bin").unlink()
    with pytest.raises(FileNotFoundError, match="blob"):
        read_checkpoint(path, "MAGP-CKPT-1")


def test_little_endian_layout(tmp_path):
    path = tmp_path / "ck.json"
    write_checkpoint(path, "MAGP-CKPT-1", {}, {"a": np.array([[1.0]])})
    manifest = json.loads(path.read_text())
    assert manifest["arrays"] == [{"name": "a", "shape": [1, 1]}]
    raw = (tmp_path / "ck.bin").read_bytes()
    assert np.frombuffer(raw, dtype="<f8")[0] == 1.0
