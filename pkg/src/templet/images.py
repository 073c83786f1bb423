"""Image arrays (H, W, 3) float32 in [0, 1], binary PPM I/O and resampling."""

from __future__ import annotations

import numpy as np


class ImageFormatError(ValueError):
    pass


def encode_ppm(img: np.ndarray) -> bytes:
    """P6, maxval 255; values are rounded after clamping to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected (H, W, 3) image, got {img.shape}")
    h, w, _ = img.shape
    px = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def write_ppm(path, img: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_ppm(img))


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    out, i = [], 0
    while len(out) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ImageFormatError("truncated PPM header")
        out.append(data[i:j])
        i = j
    return out, i + 1


def decode_ppm(data: bytes) -> np.ndarray:
    (magic, w, h, maxval), start = _tokens(data, 4)
    if magic != b"P6":
        raise ImageFormatError(f"not a binary PPM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    body = data[start:start + w * h * 3]
    if len(body) != w * h * 3:
        raise ImageFormatError("truncated PPM payload")
    px = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return (px.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_ppm(f.read())


def read_mask(path) -> np.ndarray:
    """Binary (H, W) mask from a PPM: any channel above mid-gray counts as 1."""
    img = read_ppm(path)
    return (img.max(axis=2) > 0.5).astype(np.float32)


def avg_pool(img: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = img.shape
    if h % factor or w % factor:
        raise ValueError(f"size {w}x{h} not divisible by {factor}")
    return img.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3)).astype(img.dtype)


def bilinear_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling with edge clamping."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[:2]

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(np.float32)

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    return (top * (1 - fy)[:, None, None] + bot * fy[:, None, None]).astype(np.float32)


def luminance(img: np.ndarray) -> np.ndarray:
    return (0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]).astype(np.float32)
