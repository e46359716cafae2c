"""Binary PPM (P6) / PGM (P5) reading and writing, plus bilinear resize.

Images travel as float64 arrays in [0, 1]: color as [3, h, w], grayscale as
[h, w]. Files use 8-bit samples (maxval up to 255).
"""

from __future__ import annotations

import numpy as np

__all__ = ["read_image", "write_ppm", "write_pgm", "bilinear_resize"]


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Write a [3, h, w] float image in [0, 1] as binary P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3, h, w], got {img.shape}")
    _, h, w = img.shape
    data = _quantize(img).transpose(1, 2, 0).tobytes()  # interleave to RGB rows
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data)


def write_pgm(path, img: np.ndarray) -> None:
    """Write an [h, w] float image in [0, 1] as binary P5."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected [h, w], got {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(img).tobytes())


def _read_header_token(fh) -> bytes:
    """Next whitespace-delimited token, skipping `#` comments."""
    token = b""
    while True:
        ch = fh.read(1)
        if ch == b"":
            raise ValueError("unexpected end of file in header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_image(path) -> np.ndarray:
    """Read binary P6 -> [3, h, w] or P5 -> [h, w], scaled to [0, 1]."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic not in (b"P6", b"P5"):
            raise ValueError(f"unsupported image magic {magic!r} in {path} (want binary P6/P5)")
        w = int(_read_header_token(fh))
        h = int(_read_header_token(fh))
        maxval = int(_read_header_token(fh))
        if not 0 < maxval <= 255:
            raise ValueError(f"unsupported maxval {maxval} in {path} (only 8-bit samples)")
        channels = 3 if magic == b"P6" else 1
        raw = fh.read(w * h * channels)
        if len(raw) != w * h * channels:
            raise ValueError(f"truncated pixel data in {path}")
    arr = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / maxval
    if channels == 3:
        return arr.reshape(h, w, 3).transpose(2, 0, 1)
    return arr.reshape(h, w)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the trailing two axes with bilinear interpolation
    (pixel-center alignment, edge clamped)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2], img.shape[-1]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)
    wx = np.clip(xs - x0, 0.0, 1.0)

    top = img[..., y0, :][..., :, x0] * (1 - wx) + img[..., y0, :][..., :, x1] * wx
    bot = img[..., y1, :][..., :, x0] * (1 - wx) + img[..., y1, :][..., :, x1] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]
