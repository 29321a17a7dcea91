import numpy as np
import pytest
from PIL import Image

from tvic.grid import ImageGrid
from tvic.io import (
    RAW_HEADER,
    ImageIOError,
    read_config,
    read_image,
    read_raw,
    write_image,
    write_png,
    write_raw,
)


def test_raw_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    g = ImageGrid(rng.standard_normal((5, 7)))
    p = write_raw(tmp_path / "a.raw", g)
    assert p.stat().st_size == 16 + 8 * 35
    back = read_raw(p)
    assert back.data.tobytes() == g.data.tobytes()
    assert read_image(p).shape == (5, 7)


def test_raw_header_layout(tmp_path):
    p = write_raw(tmp_path / "b.raw", ImageGrid(np.zeros((2, 3))))
    magic, rows, cols, _ = RAW_HEADER.unpack_from(p.read_bytes())
    assert (magic, rows, cols) == (b"TVIC", 2, 3)


@pytest.mark.parametrize("blob", [b"", b"XXXX" + bytes(12), RAW_HEADER.pack(b"TVIC", 2, 2, 0) + bytes(8)])
def test_malformed_raw_rejected(tmp_path, blob):
    p = tmp_path / "bad.raw"
    p.write_bytes(blob)
    with pytest.raises(ImageIOError):
        read_raw(p)


@pytest.mark.parametrize("bits", [8, 16])
def test_png_round_trip_within_quantization(tmp_path, bits):
    rng = np.random.default_rng(bits)
    g = ImageGrid(rng.uniform(0, 1, (6, 4)))
    back = read_image(write_png(tmp_path / "x.png", g, bits))
    assert np.max(np.abs(back.data - g.data)) <= 0.5 / (2**bits - 1) + 1e-12


def test_integer_mapping_and_pgm(tmp_path):
    Image.fromarray(np.array([[0, 255], [51, 102]], dtype=np.uint8)).save(tmp_path / "p.pgm")
    np.testing.assert_allclose(read_image(tmp_path / "p.pgm").data, [[0, 1], [0.2, 0.4]])


def test_write_image_adds_sidecar(tmp_path):
    png, raw = write_image(tmp_path / "u.png", ImageGrid(np.full((3, 3), 0.25)))
    assert png.exists() and raw.name == "u.raw"
    assert read_raw(raw).data[0, 0] == 0.25


def test_missing_and_non_grayscale_inputs(tmp_path):
    with pytest.raises(ImageIOError):
        read_image(tmp_path / "nope.png")
    Image.new("RGB", (4, 4)).save(tmp_path / "rgb.png")
    with pytest.raises(ImageIOError):
        read_image(tmp_path / "rgb.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(ImageIOError):
        read_image(tmp_path / "junk.png")


def test_png_bits_validated(tmp_path):
    with pytest.raises(ValueError):
        write_png(tmp_path / "x.png", ImageGrid(np.zeros((2, 2))), bits=12)


def test_read_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nlambda1 = 3.5\nmax-iter=12  # trailing\n\nCOST = huber\n")
    assert read_config(p) == {"lambda1": "3.5", "max_iter": "12", "cost": "huber"}
    p.write_text("just words\n")
    with pytest.raises(ValueError):
        read_config(p)
    with pytest.raises(ImageIOError):
        read_config(tmp_path / "missing.cfg")
