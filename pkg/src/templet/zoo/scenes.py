"""Synthetic scenes and the self-consistent datasets built from them."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, replace
from typing import Any

import numpy as np
from scipy import ndimage

from .. import manifest
from ..backbone import IMAGE_SIZE, SHAPES
from ..images import avg_pool, bilinear_resize, luminance, read_mask, read_ppm, write_ppm
from ..rng import SplitMix64, derive_seed
from .signals import EmpiricalCDF, brightness_signal, channel_means, edge_fraction, edge_image

KINDS = ("brightness", "color", "sharpness", "structural", "edit", "superres",
         "inpaint", "preference", "reference")


@dataclass(frozen=True)
class SyntheticScene:
    shape: int
    fill: tuple[float, float, float]
    background: float
    center: tuple[float, float]
    radius: float
    blur: float

    @classmethod
    def draw(cls, rng: SplitMix64) -> "SyntheticScene":
        u = rng.uniform(9)
        shape = min(int(u[0] * len(SHAPES)), len(SHAPES) - 1)
        return cls(
            shape=shape,
            fill=(float(u[1]), float(u[2]), float(u[3])),
            background=float(u[4]),
            center=(10.0 + 12.0 * float(u[5]), 10.0 + 12.0 * float(u[6])),
            radius=5.0 + 4.0 * float(u[7]),
            blur=1.5 * float(u[8]) ** 2,
        )

    def coverage(self, size: int = IMAGE_SIZE) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
        cx, cy = self.center
        r = self.radius
        if SHAPES[self.shape] == "circle":
            inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        elif SHAPES[self.shape] == "square":
            inside = (np.abs(xx - cx) <= r * 0.85) & (np.abs(yy - cy) <= r * 0.85)
        else:
            top, base = cy - r, cy + 0.8 * r
            half = (yy - top) / (base - top) * r
            inside = (yy >= top) & (yy <= base) & (np.abs(xx - cx) <= half)
        return inside.astype(np.float64)

    def render(self, size: int = IMAGE_SIZE) -> np.ndarray:
        """Deterministic render, quantized to 8-bit levels so PPM round trips are exact."""
        cov = self.coverage(size)
        if self.blur > 0:
            cov = ndimage.gaussian_filter(cov, self.blur, mode="nearest")
        fill = np.asarray(self.fill)
        img = cov[..., None] * fill + (1.0 - cov[..., None]) * self.background
        return quantize(img)


def quantize(img: np.ndarray) -> np.ndarray:
    levels = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.float32)
    return levels / np.float32(255.0)


@dataclass
class Sample:
    kind: str
    condition_id: int
    target: np.ndarray
    input: Any
    extra: dict[str, np.ndarray]

    def meta(self) -> dict[str, Any]:
        m: dict[str, Any] = {"kind": self.kind, "condition_id": self.condition_id}
        if isinstance(self.input, tuple) and all(isinstance(v, float) for v in self.input):
            m.update({f"input.{i}": v for i, v in enumerate(self.input)})
        elif isinstance(self.input, float):
            m["input.0"] = self.input
        return m


def _recolor(s: SyntheticScene) -> SyntheticScene:
    r, g, b = s.fill
    return replace(s, fill=(b, r, g))


def _low_contrast(img: np.ndarray) -> np.ndarray:
    return quantize(0.5 + 0.5 * (img.astype(np.float64) - 0.5))


def _rect_mask(rng: SplitMix64, size: int = IMAGE_SIZE) -> np.ndarray:
    u = rng.uniform(4)
    w, h = 6 + int(u[0] * 12), 6 + int(u[1] * 12)
    x0, y0 = int(u[2] * (size - w)), int(u[3] * (size - h))
    mask = np.zeros((size, size), np.float32)
    mask[y0:y0 + h, x0:x0 + w] = 1.0
    return mask


def superres_condition(img: np.ndarray, factor: int = 4) -> np.ndarray:
    low = avg_pool(img, factor)
    return quantize(bilinear_resize(low, img.shape[0], img.shape[1]))


MIN_LUMINANCE_GAP = {"preference": 0.15, "sharpness": 0.5}


def _luminance_gap(s: SyntheticScene) -> float:
    return abs(float(luminance(np.asarray(s.fill)[None, None]).item()) - s.background)


def make_dataset(kind: str, n: int, seed: int = 0) -> list[Sample]:
    """``n`` samples of ``kind``; control signals are measured from the rendered targets."""
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {', '.join(KINDS)}")
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for i in range(n):
        rng = SplitMix64(derive_seed(seed, i))
        scene = SyntheticScene.draw(rng)
        if kind in MIN_LUMINANCE_GAP:
            # preference needs a strict contrast ordering, sharpness needs edges that blur can remove
            while _luminance_gap(scene) < MIN_LUMINANCE_GAP[kind]:
                scene = SyntheticScene.draw(rng)
        target = scene.render()
        extra: dict[str, np.ndarray] = {}
        if kind == "brightness":
            inp: Any = brightness_signal(target)
        elif kind == "color":
            inp = channel_means(target)
        elif kind == "sharpness":
            inp = None
        elif kind == "structural":
            inp = edge_image(target)
        elif kind == "edit":
            inp = _recolor(scene).render()
        elif kind == "superres":
            inp = superres_condition(target)
        elif kind == "inpaint":
            inp = (target, _rect_mask(rng))
        elif kind == "preference":
            inp = 1.0
            extra["other"] = _low_contrast(target)
        else:  # reference
            u = rng.uniform(3)
            ref = replace(scene, center=(scene.center[0] + 4 * (u[0] - 0.5), scene.center[1] + 4 * (u[1] - 0.5)),
                          blur=1.5 * float(u[2]) ** 2)
            inp = ref.render()
        out.append(Sample(kind, scene.shape, target, inp, extra))
    if kind == "sharpness":
        cdf = EmpiricalCDF([edge_fraction(s.target) for s in out])
        for s in out:
            s.input = cdf(edge_fraction(s.target))
        out[0].extra["calibration"] = cdf.values.astype(np.float32)
    return out


# --------------------------------------------------------------------------- on-disk form

def save_dataset(samples: list[Sample], directory) -> None:
    os.makedirs(directory, exist_ok=True)
    for i, s in enumerate(samples):
        stem = os.path.join(directory, f"{i:05d}")
        write_ppm(stem + ".target.ppm", s.target)
        meta = s.meta()
        if isinstance(s.input, np.ndarray):
            write_ppm(stem + ".cond.ppm", s.input)
        elif isinstance(s.input, tuple) and isinstance(s.input[0], np.ndarray):
            write_ppm(stem + ".cond.ppm", s.input[0])
            write_ppm(stem + ".mask.ppm", np.repeat(s.input[1][..., None], 3, axis=-1))
        if "other" in s.extra:
            write_ppm(stem + ".other.ppm", s.extra["other"])
        with open(stem + ".txt", "w", encoding="utf-8", newline="\n") as f:
            f.write(manifest.dumps(meta))


def load_dataset(directory) -> list[Sample]:
    stems = sorted(f[:-4] for f in os.listdir(directory) if f.endswith(".txt"))
    out = []
    for stem in stems:
        base = os.path.join(directory, stem)
        with open(base + ".txt", encoding="utf-8") as f:
            meta = manifest.loads(f.read())
        target = read_ppm(base + ".target.ppm")
        scalars = [meta[k] for k in sorted(k for k in meta if k.startswith("input."))]
        inp: Any
        if os.path.exists(base + ".mask.ppm"):
            inp = (read_ppm(base + ".cond.ppm"), read_mask(base + ".mask.ppm"))
        elif os.path.exists(base + ".cond.ppm"):
            inp = read_ppm(base + ".cond.ppm")
        elif len(scalars) == 1:
            inp = float(scalars[0])
        else:
            inp = tuple(float(v) for v in scalars)
        extra = {}
        if os.path.exists(base + ".other.ppm"):
            extra["other"] = read_ppm(base + ".other.ppm")
        out.append(Sample(meta["kind"], int(meta["condition_id"]), target, inp, extra))
    return out


def directory_digest(directory) -> str:
    h = hashlib.sha256()
    for name in sorted(os.listdir(directory)):
        h.update(name.encode("utf-8") + b"\0")
        with open(os.path.join(directory, name), "rb") as f:
            h.update(f.read())
    return h.hexdigest()
