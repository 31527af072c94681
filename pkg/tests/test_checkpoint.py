"""Binary container round-trips and corruption detection."""

import struct

import numpy as np
import pytest

from hikfs.checkpoint import MAGIC, load_arrays, save_arrays


class TestContainer:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "encoder.W0": rng.normal(size=(7, 5)),
            "scalar": np.float64(3.25),
            "bank.M": rng.normal(size=(3, 4, 5)),
            "empty_axis": np.zeros((0, 4)),
        }
        path = tmp_path / "model.ckpt"
        save_arrays(path, arrays)
        loaded = load_arrays(path)
        assert list(loaded) == list(arrays)
        for k in arrays:
            assert loaded[k].shape == np.asarray(arrays[k]).shape
            assert np.array_equal(loaded[k], np.asarray(arrays[k], dtype=np.float64))

    def test_magic_written(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_arrays(path, {"a": np.ones(2)})
        assert path.read_bytes().startswith(MAGIC)

    def test_crc_detects_flipped_byte(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_arrays(path, {"a": np.ones(4)})
        blob = bytearray(path.read_bytes())
        blob[len(MAGIC) + 10] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="corrupt"):
            load_arrays(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        body = b"NOTHIK1" + b"\x00" * 8
        path.write_bytes(body + struct.pack("<I", __import__("zlib").crc32(body)))
        with pytest.raises(ValueError, match="magic"):
            load_arrays(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"HI")
        with pytest.raises(ValueError, match="truncated"):
            load_arrays(path)
