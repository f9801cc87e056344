import struct

import numpy as np
import numpy.testing as npt
import pytest

from metanorm.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from metanorm.errors import CheckpointError


def _arrays():
    rng = np.random.default_rng(0)
    return {
        "conv.weight": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "norm.omega": rng.standard_normal(4),
        "scalarish": np.array(2.5),
    }


class TestRoundTrip:
    def test_bitwise_identity(self, tmp_path):
        path = str(tmp_path / "a.ckpt")
        arrays = _arrays()
        save_checkpoint(path, arrays)
        loaded = load_checkpoint(path)
        assert list(loaded) == list(arrays)
        for name in arrays:
            assert loaded[name].dtype == arrays[name].dtype
            npt.assert_array_equal(loaded[name], arrays[name])

    def test_save_twice_identical_bytes(self, tmp_path):
        a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(a, _arrays())
        save_checkpoint(b, _arrays())
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_empty_mapping(self, tmp_path):
        path = str(tmp_path / "e.ckpt")
        save_checkpoint(path, {})
        assert load_checkpoint(path) == {}


class TestCorruption:
    def _saved(self, tmp_path):
        path = str(tmp_path / "c.ckpt")
        save_checkpoint(path, _arrays())
        return path

    def test_flipped_payload_byte_fails_crc(self, tmp_path):
        path = self._saved(tmp_path)
        blob = bytearray(open(path, "rb").read())
        blob[len(blob) // 2] ^= 0xFF
        open(path, "wb").write(bytes(blob))
        with pytest.raises(CheckpointError, match="CRC"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = self._saved(tmp_path)
        blob = bytearray(open(path, "rb").read())
        blob[:8] = b"NOTACKPT"
        body = bytes(blob[:-4])
        import zlib

        open(path, "wb").write(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        path = self._saved(tmp_path)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[: len(MAGIC) + 2])
        with pytest.raises(CheckpointError, match="too short"):
            load_checkpoint(path)

    def test_unsupported_dtype_rejected_at_save(self, tmp_path):
        with pytest.raises(CheckpointError, match="dtype"):
            save_checkpoint(str(tmp_path / "x.ckpt"),
                            {"ints": np.arange(3, dtype=np.int64)})
