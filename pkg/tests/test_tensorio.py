import numpy as np
import pytest

from meatkit.errors import MeatkitError
from meatkit.tensorio import MAGIC, read_tensor, write_tensor


class TestRoundTrip:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int32, np.uint8])
    @pytest.mark.parametrize("rank", list(range(1, 9)))
    def test_lossless(self, tmp_path, dtype, rank):
        rng = np.random.default_rng(rank)
        shape = tuple(int(rng.integers(1, 4)) for _ in range(rank))
        if np.issubdtype(dtype, np.floating):
            arr = rng.standard_normal(shape).astype(dtype)
        else:
            arr = rng.integers(0, 120, size=shape).astype(dtype)
        path = tmp_path / "t.tnsr"
        write_tensor(path, arr)
        back = read_tensor(path)
        assert back.dtype == np.dtype(dtype)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)

    def test_bool_written_as_u8(self, tmp_path):
        path = tmp_path / "b.tnsr"
        write_tensor(path, np.array([True, False, True]))
        back = read_tensor(path)
        assert back.dtype == np.uint8
        assert (back == [1, 0, 1]).all()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "h.tnsr"
        write_tensor(path, np.zeros((2, 3), dtype=np.float32))
        raw = path.read_bytes()
        assert raw[:7] == MAGIC
        assert raw[7] == 0 and raw[8] == 2  # f32, rank 2
        assert int.from_bytes(raw[9:13], "little") == 2
        assert int.from_bytes(raw[13:17], "little") == 3
        assert len(raw) == 17 + 24


class TestValidation:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.tnsr"
        path.write_bytes(b"NOTMAGIC" + b"\0" * 16)
        with pytest.raises(MeatkitError):
            read_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.tnsr"
        write_tensor(path, np.zeros(8, dtype=np.float64))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(MeatkitError):
            read_tensor(path)

    def test_rank_limit(self, tmp_path):
        with pytest.raises(MeatkitError):
            write_tensor(tmp_path / "r.tnsr", np.zeros((1,) * 9, dtype=np.float32))

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(MeatkitError):
            write_tensor(tmp_path / "c.tnsr", np.zeros(3, dtype=np.complex64))
