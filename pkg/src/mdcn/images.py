"""Minimal image ingestion: binary PPM (P6), MDT1 tensors, bilinear resize."""

from pathlib import Path

import numpy as np

from .tensor import load_mdt

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def _ppm_tokens(buf, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def decode_ppm(buf):
    """Decode a P6 image into a float array [3, H, W] with values in [0, 1]."""
    (magic, w, h, maxval), pos = _ppm_tokens(buf, 4)
    if magic != b"P6":
        raise ValueError(f"unsupported image format {magic!r}; only binary PPM (P6)")
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    data = np.frombuffer(buf, dtype=dtype, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def encode_ppm(image):
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + img.transpose(1, 2, 0).tobytes()


def load_image(path):
    path = Path(path)
    if path.suffix.lower() == ".mdt":
        img = load_mdt(path)
        if img.ndim == 4:
            img = img[0]
        return img
    return decode_ppm(path.read_bytes())


def resize_bilinear(image, height, width):
    """Half-pixel-centred bilinear resize of [C, H, W]."""
    c, h, w = image.shape
    if (h, w) == (height, width):
        return image.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bot = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def preprocess(image, size):
    """Resize to the network input and standardize pixel values."""
    return (resize_bilinear(image, size, size) - PIXEL_MEAN) / PIXEL_STD
