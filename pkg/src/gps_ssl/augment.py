"""Seedable image augmentation pipelines.

Images are H x W x C float arrays in [0, 1].  A pipeline applied with an
explicit RNG state is a pure function of (image, rng state): every op draws
its application coin first, then its parameters only when it fires.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Union

import numpy as np

from .errors import ArgumentError

RngLike = Union[int, np.random.Generator]
SETTINGS = ("strong", "rhflip", "none")


@dataclass(frozen=True)
class AugOp:
    name: str
    p: float = 1.0
    params: Mapping = field(default_factory=dict)

    def describe(self) -> dict:
        return {"name": self.name, "p": self.p, **dict(self.params)}


@dataclass(frozen=True)
class AugmentationPipeline:
    ops: tuple
    setting_name: str
    out_hw: int

    def describe(self) -> list[dict]:
        return [op.describe() for op in self.ops]

    def __call__(self, image: np.ndarray, rng_state: RngLike) -> np.ndarray:
        return apply(self, image, rng_state)


def _default_ops(setting: str, out_hw: int) -> list[AugOp]:
    if setting == "none":
        return []
    if setting == "rhflip":
        return [AugOp("hflip", 0.5)]
    return [
        AugOp("random_resized_crop", 1.0, {"scale": (0.2, 1.0), "ratio": (3 / 4, 4 / 3), "size": out_hw}),
        AugOp("hflip", 0.5),
        AugOp("color_jitter", 0.8, {"brightness": 0.4, "contrast": 0.4, "saturation": 0.4, "hue": 0.1}),
        AugOp("grayscale", 0.2),
        AugOp("gaussian_blur", 0.5, {"sigma": (0.1, 2.0)}),
        AugOp("solarize", 0.2, {"threshold": 0.5}),
    ]


def make_pipeline(setting_name: str, out_hw: int, overrides: Optional[Mapping[str, Mapping]] = None) -> AugmentationPipeline:
    """Build one of the named settings.

    ``overrides`` maps an op name to replacement values, e.g.
    ``{"hflip": {"p": 1.0}, "solarize": {"threshold": 0.6}}``.
    """
    if setting_name not in SETTINGS:
        raise ArgumentError(f"unknown augmentation setting {setting_name!r}; expected one of {SETTINGS}")
    if out_hw < 1:
        raise ArgumentError(f"out_hw must be positive, got {out_hw}")
    ops = _default_ops(setting_name, out_hw)
    overrides = dict(overrides or {})
    known = {op.name for op in ops}
    unknown = set(overrides) - known
    if unknown:
        raise ArgumentError(f"overrides for ops not in the {setting_name!r} pipeline: {sorted(unknown)}")
    for i, op in enumerate(ops):
        if op.name in overrides:
            upd = dict(overrides[op.name])
            p = float(upd.pop("p", op.p))
            bad = set(upd) - set(op.params)
            if bad:
                raise ArgumentError(f"{op.name}: unknown parameters {sorted(bad)}")
            ops[i] = replace(op, p=p, params={**op.params, **upd})
    for op in ops:
        if not 0.0 <= op.p <= 1.0:
            raise ArgumentError(f"{op.name}: probability {op.p} outside [0, 1]")
    return AugmentationPipeline(tuple(ops), setting_name, out_hw)


def apply(pipeline: AugmentationPipeline, image: np.ndarray, rng_state: RngLike) -> np.ndarray:
    rng = np.random.default_rng(rng_state) if not isinstance(rng_state, np.random.Generator) else rng_state
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    for op in pipeline.ops:
        fire = rng.random() < op.p
        if fire:
            img = _OPS[op.name](img, rng, **op.params)
    if img.shape[:2] != (pipeline.out_hw, pipeline.out_hw):
        img = resize(img, pipeline.out_hw, pipeline.out_hw)
    return np.clip(img, 0.0, 1.0)


# -- primitive ops ----------------------------------------------------------

def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers; exact identity when sizes match."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        i0 = np.minimum(np.floor(x).astype(int), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, x - i0

    r0, r1, tr = coords(h, out_h)
    c0, c1, tc = coords(w, out_w)
    rows = img[r0] * (1 - tr)[:, None, None] + img[r1] * tr[:, None, None]
    return rows[:, c0] * (1 - tc)[None, :, None] + rows[:, c1] * tc[None, :, None]


def _hflip(img, rng):
    return img[:, ::-1, :].copy()


def _random_resized_crop(img, rng, scale, ratio, size):
    h, w = img.shape[:2]
    area = h * w
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return resize(img[top:top + ch, left:left + cw], size, size)
    # fallback: centered crop at the clamped aspect ratio
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    top, left = (h - ch) // 2, (w - cw) // 2
    return resize(img[top:top + ch, left:left + cw], size, size)


def _gray(img):
    if img.shape[2] != 3:
        return img.mean(axis=2, keepdims=True)
    return (0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2])[..., None]


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    safe = np.where(delta > 0, delta, 1.0)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    hue = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    hue = np.where(delta > 0, (hue / 6.0) % 1.0, 0.0)
    sat = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    return np.stack([hue, sat, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _color_jitter(img, rng, brightness, contrast, saturation, hue):
    b = rng.uniform(max(0.0, 1 - brightness), 1 + brightness)
    c = rng.uniform(max(0.0, 1 - contrast), 1 + contrast)
    s = rng.uniform(max(0.0, 1 - saturation), 1 + saturation)
    dh = rng.uniform(-hue, hue)
    img = np.clip(img * b, 0, 1)
    mean = _gray(img).mean()
    img = np.clip((img - mean) * c + mean, 0, 1)
    if img.shape[2] == 3:
        gray = _gray(img)
        img = np.clip((img - gray) * s + gray, 0, 1)
        hsv = rgb_to_hsv(img)
        hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
        img = np.clip(hsv_to_rgb(hsv), 0, 1)
    return img


def _grayscale(img, rng):
    return np.repeat(_gray(img), img.shape[2], axis=2)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflected borders, kernel radius ceil(3 sigma)."""
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for t, kt in enumerate(k):
            sl = [slice(None)] * 3
            sl[axis] = slice(t, t + n)
            acc += kt * padded[tuple(sl)]
        out = acc
    return out


def _gaussian_blur(img, rng, sigma):
    return blur(img, rng.uniform(sigma[0], sigma[1]))


def solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(img >= threshold, 1.0 - img, img)


def _solarize(img, rng, threshold):
    return solarize(img, threshold)


_OPS = {
    "hflip": _hflip,
    "random_resized_crop": _random_resized_crop,
    "color_jitter": _color_jitter,
    "grayscale": _grayscale,
    "gaussian_blur": _gaussian_blur,
    "solarize": _solarize,
}


def custom_pipeline(ops, out_hw: int, setting_name: str = "custom") -> AugmentationPipeline:
    """Pipeline from explicit ops, e.g. ``[AugOp("hflip", 1.0)]`` for a deterministic flip."""
    ops = tuple(ops)
    for op in ops:
        if op.name not in _OPS:
            raise ArgumentError(f"unknown op {op.name!r}")
    return AugmentationPipeline(ops, setting_name, out_hw)
