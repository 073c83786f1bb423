"""Control signals measured directly from images."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..images import luminance

# A unit luminance step gives a Sobel response of 4; scaled by that and clipped, magnitudes lie in [0, 1].
SOBEL_NORM = 4.0
EDGE_THRESHOLD = 0.25


def brightness_signal(img: np.ndarray) -> float:
    return float(np.mean(img, dtype=np.float64))


def channel_means(img: np.ndarray) -> tuple[float, float, float]:
    m = np.mean(img.reshape(-1, img.shape[-1]), axis=0, dtype=np.float64)
    return float(m[0]), float(m[1]), float(m[2])


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    lum = luminance(img).astype(np.float64)
    gx = ndimage.sobel(lum, axis=1, mode="nearest")
    gy = ndimage.sobel(lum, axis=0, mode="nearest")
    return np.minimum(np.hypot(gx, gy) / SOBEL_NORM, 1.0)


def edge_map(img: np.ndarray, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Binary (H, W) edge mask."""
    return gradient_magnitude(img) > threshold


def edge_fraction(img: np.ndarray) -> float:
    return float(edge_map(img).mean())


def edge_image(img: np.ndarray) -> np.ndarray:
    """Edge mask as a 3-channel image, the structural-control condition."""
    e = edge_map(img).astype(np.float32)
    return np.repeat(e[..., None], 3, axis=-1)


class EmpiricalCDF:
    """Quantile normalization against a calibration corpus, ties at the midpoint."""

    def __init__(self, values):
        v = np.sort(np.asarray(values, dtype=np.float64))
        if v.size == 0:
            raise ValueError("empirical CDF needs at least one calibration value")
        self.values = v

    def __call__(self, x: float) -> float:
        lo = np.searchsorted(self.values, x, side="left")
        hi = np.searchsorted(self.values, x, side="right")
        return float((lo + 0.5 * (hi - lo)) / self.values.size)

    def __len__(self) -> int:
        return self.values.size


def sharpness_signal(img: np.ndarray, calibration: EmpiricalCDF) -> float:
    if calibration is None or len(calibration) == 0:
        raise ValueError("sharpness_signal needs a non-empty calibration")
    return calibration(edge_fraction(img))


def contrast(img: np.ndarray) -> float:
    return float(np.std(luminance(img), dtype=np.float64))
