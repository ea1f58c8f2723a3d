import struct

import numpy as np
import pytest

from tinygiant.checkpoint import CheckpointError, encode_checkpoint, load_checkpoint, save_checkpoint


def test_round_trip_is_bitwise(tmp_path, rng):
    arrays = {"a.weight": rng.normal(size=(3, 4)), "b": rng.normal(size=7), "scalar": np.array(2.5)}
    save_checkpoint(tmp_path / "m.tgvm", arrays)
    back = load_checkpoint(tmp_path / "m.tgvm")
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()


def test_layout():
    payload = encode_checkpoint({"w": np.array([[1.0, 2.0]])})
    assert payload[:4] == b"TGVM"
    assert struct.unpack_from("<I", payload, 4) == (1,)
    assert struct.unpack_from("<I", payload, 8) == (1,)
    assert payload[12:13] == b"w"
    assert struct.unpack_from("<I2Q2d", payload, 13) == (2, 1, 2, 1.0, 2.0)


def test_shape_mismatch_names_parameter(tmp_path):
    save_checkpoint(tmp_path / "m.tgvm", {"a": np.zeros(3), "b": np.zeros((2, 2))})
    with pytest.raises(CheckpointError, match="parameter b"):
        load_checkpoint(tmp_path / "m.tgvm", expected={"a": (3,), "b": (2, 3)})
    with pytest.raises(CheckpointError, match="missing parameter c"):
        load_checkpoint(tmp_path / "m.tgvm", expected={"a": (3,), "b": (2, 2), "c": (1,)})


def test_bad_magic_and_truncation(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x")
    payload = encode_checkpoint({"w": np.ones(10)})
    (tmp_path / "y").write_bytes(payload[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "y")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    save_checkpoint(tmp_path / "m.tgvm", {"w": np.ones(2)})
    save_checkpoint(tmp_path / "m.tgvm", {"w": np.zeros(2)})
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.tgvm"]
    np.testing.assert_array_equal(load_checkpoint(tmp_path / "m.tgvm")["w"], [0, 0])
