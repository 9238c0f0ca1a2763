"""Checkpoint container tests: bitwise roundtrip, corruption detection,
and the checksum helper used for freeze verification."""

import numpy as np
import pytest

from trimodal.checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
    state_checksums,
)


@pytest.fixture
def sample_state(rng):
    return {
        "enc.weight": rng.standard_normal((4, 3)).astype(np.float32),
        "enc.bias": rng.standard_normal(3).astype(np.float32),
        "scalar": np.float32(2.5),
        "deep": rng.standard_normal((2, 3, 2, 2)).astype(np.float32),
    }


def test_roundtrip_is_bitwise(tmp_path, sample_state):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, sample_state, meta={"seed": 7, "stage": "gen"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"seed": 7, "stage": "gen"}
    assert set(loaded) == set(sample_state)
    for name, arr in sample_state.items():
        got = loaded[name]
        assert got.dtype == np.float32
        np.testing.assert_array_equal(got, np.asarray(arr, dtype=np.float32))
        assert got.tobytes() == np.ascontiguousarray(arr, dtype="<f4").tobytes()


def test_roundtrip_without_meta(tmp_path, sample_state):
    path = tmp_path / "bare.ckpt"
    save_checkpoint(path, sample_state)
    loaded, meta = load_checkpoint(path)
    assert meta is None
    assert set(loaded) == set(sample_state)


def test_save_is_deterministic(tmp_path, sample_state):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, sample_state, meta={"k": 1})
    save_checkpoint(p2, sample_state, meta={"k": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path, sample_state):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, sample_state)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_unsupported_version_rejected(tmp_path, sample_state):
    path = tmp_path / "v.ckpt"
    save_checkpoint(path, sample_state)
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_truncation_rejected(tmp_path, sample_state):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, sample_state)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path, sample_state):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, sample_state)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_state_checksums_detect_single_element_change(sample_state):
    before = state_checksums(sample_state)
    assert before == state_checksums({k: v.copy() for k, v in sample_state.items()})
    mutated = {k: np.array(v, copy=True) for k, v in sample_state.items()}
    mutated["enc.weight"].flat[0] += 1.0
    after = state_checksums(mutated)
    assert after != before
    assert after["enc.bias"] == before["enc.bias"]
    assert after["enc.weight"] == pytest.approx(before["enc.weight"] + 1.0)
