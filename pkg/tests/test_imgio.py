"""PNG and depth codec round trips."""

import numpy as np
import pytest

from attrfield import imgio


def test_quantize_rounds_half_up():
    vals = np.array([[[0.0, 1.0, 0.5], [2.0, -1.0, 127.4 / 255.0]]])
    out = imgio.quantize(vals)
    assert out.dtype == np.uint8
    assert list(out[0, 0]) == [0, 255, 128]
    assert list(out[0, 1]) == [255, 0, 127]


def test_rgb_png_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.uniform(0, 1, (9, 7, 3))
    path = tmp_path / "img.png"
    imgio.write_rgb_png(path, rgb)
    back = imgio.read_png(path)
    assert back.shape == (9, 7, 3)
    assert np.array_equal(back, imgio.quantize(rgb))


def test_rgb_png_encoding_deterministic():
    rgb = np.random.default_rng(1).uniform(0, 1, (16, 16, 3))
    assert imgio.encode_rgb_png(rgb) == imgio.encode_rgb_png(rgb.copy())


def test_rgb_png_rejects_bad_shape():
    with pytest.raises(ValueError):
        imgio.encode_rgb_png(np.zeros((4, 4)))


def test_semantic_png_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 12, (11, 13))  # 11 attributes + background value
    path = tmp_path / "sem.png"
    imgio.write_semantic_png(path, labels, n_labels=11)
    back = imgio.read_png(path)
    assert back.shape == (11, 13)
    assert np.array_equal(back, labels)


def test_semantic_palette_distinct():
    flat = imgio.semantic_palette(11)
    assert len(flat) == (11 + 1) * 3
    colors = {tuple(flat[i:i + 3]) for i in range(0, len(flat), 3)}
    assert len(colors) == 12


def test_semantic_png_rejects_out_of_range():
    with pytest.raises(ValueError):
        imgio.encode_semantic_png(np.full((4, 4), 5), n_labels=4)


def test_depth_round_trip(tmp_path):
    depth = np.random.default_rng(3).uniform(0.5, 4.0, (6, 10)) \
        .astype(np.float32)
    path = tmp_path / "depth.bin"
    imgio.write_depth(path, depth)
    raw = path.read_bytes()
    assert raw[:8] == b"ATTRDPTH"
    assert len(raw) == 16 + 6 * 10 * 4
    back = imgio.read_depth(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, depth)


def test_depth_header_little_endian():
    blob = imgio.encode_depth(np.zeros((2, 3), dtype=np.float32))
    assert blob[8:12] == (3).to_bytes(4, "little")   # width first
    assert blob[12:16] == (2).to_bytes(4, "little")


def test_depth_decode_rejects_garbage():
    with pytest.raises(ValueError):
        imgio.decode_depth(b"NOTDEPTH" + b"\0" * 16)
    good = imgio.encode_depth(np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        imgio.decode_depth(good[:-4])
