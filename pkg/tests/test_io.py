import numpy as np
import pytest

from himat import pngio
from himat.himt import read_himt, write_himt


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(4,), (3, 5), (2, 3, 4, 5)])
def test_himt_roundtrip(tmp_path, dtype, shape):
    arr = np.random.default_rng(0).standard_normal(shape).astype(dtype)
    path = tmp_path / "t.himt"
    write_himt(path, arr)
    back = read_himt(path)
    assert back.dtype == dtype
    assert back.shape == shape
    assert np.array_equal(back, arr)


def test_himt_rejects_garbage(tmp_path):
    p = tmp_path / "bad.himt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        read_himt(p)


def test_himt_rejects_int_arrays(tmp_path):
    with pytest.raises(ValueError):
        write_himt(tmp_path / "x.himt", np.arange(4))


@pytest.mark.parametrize("bit_depth,atol", [(8, 1 / 255), (16, 1 / 65535)])
@pytest.mark.parametrize("channels", ["gray", "rgb"])
def test_png_roundtrip(tmp_path, bit_depth, atol, channels):
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (6, 7) if channels == "gray" else (6, 7, 3))
    path = tmp_path / "img.png"
    pngio.write_png(path, img, bit_depth=bit_depth)
    back = pngio.read_png(path)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= atol


def test_png_bad_inputs(tmp_path):
    with pytest.raises(ValueError):
        pngio.write_png(tmp_path / "x.png", np.zeros((4, 4, 2)))
    with pytest.raises(ValueError):
        pngio.write_png(tmp_path / "x.png", np.zeros((4, 4)), bit_depth=12)
    with pytest.raises(OSError):
        pngio.read_png(tmp_path / "missing.png")
