"""PNG and raw-depth encoding for rendered images.

RGB goes out as 8-bit PNG, semantic label maps as paletted PNG with a fixed
deterministic palette, and depth as raw little-endian float32 behind a
16-byte header. All encoders are bit-deterministic for equal inputs.
"""

import colorsys
import io
import struct

import numpy as np
from PIL import Image

DEPTH_MAGIC = b"ATTRDPTH"

# hue spacing by the golden angle keeps neighboring labels far apart
_GOLDEN = 0.6180339887498949
_BACKGROUND_COLOR = (245, 245, 245)


def quantize(rgb) -> np.ndarray:
    """Float [0,1] image to uint8 with round-half-up."""
    rgb = np.asarray(rgb)
    return np.clip(rgb * 255.0 + 0.5, 0, 255).astype(np.uint8)


def encode_rgb_png(rgb) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("rgb image must be (H, W, 3)")
    buf = io.BytesIO()
    Image.fromarray(quantize(rgb), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_rgb_png(path, rgb):
    with open(path, "wb") as fh:
        fh.write(encode_rgb_png(rgb))


def label_color(label: int) -> tuple:
    h = (label * _GOLDEN) % 1.0
    r, g, b = colorsys.hsv_to_rgb(h, 0.65, 0.95)
    return (int(r * 255), int(g * 255), int(b * 255))


def semantic_palette(n_labels: int) -> list:
    """Flat RGB palette: one color per label, then the background entry."""
    flat = []
    for label in range(n_labels):
        flat.extend(label_color(label))
    flat.extend(_BACKGROUND_COLOR)
    return flat


def encode_semantic_png(semantic, n_labels: int) -> bytes:
    semantic = np.asarray(semantic)
    if semantic.ndim != 2:
        raise ValueError("semantic image must be (H, W)")
    if n_labels >= 255:
        raise ValueError("palette holds at most 254 labels plus background")
    if semantic.min() < 0 or semantic.max() > n_labels:
        raise ValueError("semantic values must lie in [0, n_labels]")
    img = Image.fromarray(semantic.astype(np.uint8), mode="P")
    img.putpalette(semantic_palette(n_labels))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def write_semantic_png(path, semantic, n_labels: int):
    with open(path, "wb") as fh:
        fh.write(encode_semantic_png(semantic, n_labels))


def encode_depth(depth) -> bytes:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError("depth image must be (H, W)")
    h, w = depth.shape
    header = DEPTH_MAGIC + struct.pack("<II", w, h)
    return header + np.ascontiguousarray(depth, dtype="<f4").tobytes()


def write_depth(path, depth):
    with open(path, "wb") as fh:
        fh.write(encode_depth(depth))


def decode_depth(blob: bytes) -> np.ndarray:
    if len(blob) < 16 or blob[:8] != DEPTH_MAGIC:
        raise ValueError("not a depth image")
    w, h = struct.unpack("<II", blob[8:16])
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    if data.size != w * h:
        raise ValueError("depth payload size does not match header")
    return data.reshape(h, w).astype(np.float32)


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_depth(fh.read())


def read_png(path_or_bytes) -> np.ndarray:
    """PNG to array: RGB images as (H, W, 3) uint8, paletted as (H, W) indices."""
    if isinstance(path_or_bytes, (bytes, bytearray)):
        img = Image.open(io.BytesIO(path_or_bytes))
    else:
        img = Image.open(path_or_bytes)
    return np.asarray(img)
