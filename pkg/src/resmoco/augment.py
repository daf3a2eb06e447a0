"""Two-view augmentation pipeline (random resized crop, flip, colour jitter, blur, solarise).

Images are ``H x W x 3`` arrays on the byte scale [0, 255]; every random draw
comes from a generator seeded per sample so the output is a pure function of
``(image, seed)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class AugmentParams:
    min_scale: float = 0.2
    crop_size: int = 32
    crop_p: float = 1.0
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    jitter_apply_p: float = 0.8
    blur_p: float = 1.0
    solarize_p: float = 0.0
    hflip_p: float = 0.5
    grayscale_p: float = 0.0

    def __post_init__(self) -> None:
        for name in ("crop_p", "jitter_apply_p", "blur_p", "solarize_p", "hflip_p", "grayscale_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        if not 0.0 < self.min_scale <= 1.0:
            raise ValueError("min_scale must lie in (0, 1]")
        if not 0.0 <= self.hue <= 0.5:
            raise ValueError("hue intensity must lie in [0, 0.5]")
        if self.crop_size < 1:
            raise ValueError("crop_size must be positive")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def cifar_pair(crop_size: int = 32, strict: bool = False) -> Tuple[AugmentParams, AugmentParams]:
    """The asymmetric CIFAR transform pair: blur always on view 1, solarise sometimes on view 2.

    ``strict=True`` drops the flip and the jitter gate, keeping only the listed intensities.
    """
    extra = dict(hflip_p=0.0, jitter_apply_p=1.0) if strict else {}
    t1 = AugmentParams(crop_size=crop_size, blur_p=1.0, solarize_p=0.0, **extra)
    t2 = replace(t1, blur_p=0.1, solarize_p=0.2)
    return t1, t2


class ViewPair(NamedTuple):
    x1: np.ndarray
    x2: np.ndarray


# ---------------------------------------------------------------------------
# individual transforms
# ---------------------------------------------------------------------------


def sample_crop(
    rng: np.random.Generator, height: int, width: int, min_scale: float, max_tries: int = 10
) -> Tuple[int, int, int, int]:
    """Sample ``(top, left, h, w)`` with area fraction in [min_scale, 1] and aspect in [3/4, 4/3]."""
    area = height * width
    log_lo, log_hi = math.log(3 / 4), math.log(4 / 3)
    for _ in range(max_tries):
        target = rng.uniform(min_scale, 1.0) * area
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height and h * w >= min_scale * area:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    return 0, 0, height, width


def _bilinear_coords(start: np.ndarray, extent: np.ndarray, size: int) -> Tuple[np.ndarray, ...]:
    pos = start[:, None] + (np.arange(size) + 0.5) * extent[:, None] / size - 0.5
    pos = np.clip(pos, start[:, None], (start + extent - 1)[:, None])
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, (start + extent - 1)[:, None])
    return lo, hi, pos - lo


def resize_crops(imgs: np.ndarray, boxes: np.ndarray, size: int) -> np.ndarray:
    """Bilinearly resample one ``(top, left, h, w)`` box per image to ``size x size``.

    Sample centres sit at half-pixel offsets and are clamped to the box.
    """
    n = len(imgs)
    y0, y1, wy = _bilinear_coords(boxes[:, 0], boxes[:, 2], size)
    x0, x1, wx = _bilinear_coords(boxes[:, 1], boxes[:, 3], size)
    b = np.arange(n)[:, None, None]
    wy = wy[:, :, None, None]
    wx = wx[:, None, :, None]

    def at(ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        return imgs[b, ys[:, :, None], xs[:, None, :]]

    top = at(y0, x0) * (1 - wx) + at(y0, x1) * wx
    bottom = at(y1, x0) * (1 - wx) + at(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def resize_bilinear(img: np.ndarray, top: int, left: int, h: int, w: int, size: int) -> np.ndarray:
    """Resample the ``h x w`` window at ``(top, left)`` of one image to ``size x size``."""
    box = np.array([[top, left, h, w]])
    return resize_crops(np.asarray(img, dtype=np.float64)[None], box, size)[0]


def grayscale(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """RGB in [0, 1] to HSV in [0, 1]."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    safe = np.where(delta > 0, delta, 1.0)
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., :1], hsv[..., 1:2], hsv[..., 2:3]
    k = (np.array([5.0, 3.0, 1.0]) + h * 6.0) % 6.0
    return v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def _per_image(v, imgs: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape((-1,) + (1,) * (imgs.ndim - 1))


def color_jitter(imgs: np.ndarray, brightness, contrast, saturation, hue) -> np.ndarray:
    """Apply already-sampled jitter factors in the order brightness, contrast, saturation, hue.

    ``imgs`` is ``N x H x W x 3``; each factor is a scalar or one value per image.
    """
    out = np.clip(imgs * _per_image(brightness, imgs), 0, 255)
    mean = grayscale(out).mean(axis=(1, 2))
    mean = _per_image(mean, imgs)
    out = np.clip((out - mean) * _per_image(contrast, imgs) + mean, 0, 255)
    gray = grayscale(out)[..., None]
    out = np.clip((out - gray) * _per_image(saturation, imgs) + gray, 0, 255)
    hsv = rgb_to_hsv(out / 255.0)
    hsv[..., 0] = (hsv[..., 0] + _per_image(hue, imgs)[..., 0]) % 1.0
    return hsv_to_rgb(hsv) * 255.0


def blur_kernel_size(image_size: int) -> int:
    """10% of the image side, rounded and bumped to the next odd integer."""
    k = max(1, int(round(0.1 * image_size)))
    return k if k % 2 == 1 else k + 1


def gaussian_blur(imgs: np.ndarray, sigma, ksize: int) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; ``sigma`` may differ per image."""
    if ksize <= 1:
        return imgs
    r = ksize // 2
    t = np.arange(-r, r + 1)
    sig = np.asarray(sigma, dtype=np.float64).reshape(-1, 1)
    k = np.exp(-(t**2) / (2 * sig**2))
    k /= k.sum(axis=1, keepdims=True)
    k = k.reshape(-1, ksize, 1, 1, 1)
    pad = np.pad(imgs, ((0, 0), (r, r), (r, r), (0, 0)), mode="reflect")
    h, w = imgs.shape[1:3]
    rows = sum(k[:, i] * pad[:, i : i + h] for i in range(ksize))
    return sum(k[:, i] * rows[:, :, i : i + w] for i in range(ksize))


def solarize(img: np.ndarray, threshold: float = 128) -> np.ndarray:
    """Invert (``255 - v``) every value at or above ``threshold``."""
    return np.where(img >= threshold, 255 - img, img)


# ---------------------------------------------------------------------------
# the full pipeline
# ---------------------------------------------------------------------------


@dataclass
class _Draws:
    box: Tuple[int, int, int, int]
    flip: bool
    jitter: Optional[Tuple[float, float, float, float]]
    gray: bool
    sigma: Optional[float]
    solarize: bool


def _draw(rng: np.random.Generator, p: AugmentParams, height: int, width: int) -> _Draws:
    box = sample_crop(rng, height, width, p.min_scale) if rng.random() < p.crop_p else (0, 0, height, width)
    flip = bool(rng.random() < p.hflip_p)
    jitter = None
    if rng.random() < p.jitter_apply_p:
        jitter = (
            rng.uniform(max(0.0, 1 - p.brightness), 1 + p.brightness),
            rng.uniform(max(0.0, 1 - p.contrast), 1 + p.contrast),
            rng.uniform(max(0.0, 1 - p.saturation), 1 + p.saturation),
            rng.uniform(-p.hue, p.hue),
        )
    gray = bool(rng.random() < p.grayscale_p)
    sigma = rng.uniform(0.1, 2.0) if rng.random() < p.blur_p else None
    sol = bool(rng.random() < p.solarize_p)
    return _Draws(box, flip, jitter, gray, sigma, sol)


def augment_batch(imgs: np.ndarray, p: AugmentParams, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """One random view per image (``rngs[i]`` drives image ``i``); byte scale, float64 NHWC.

    Order: resized crop, horizontal flip, colour jitter, grayscale, blur, solarise.
    """
    imgs = np.asarray(imgs, dtype=np.float64)
    n, height, width = imgs.shape[:3]
    draws = [_draw(rng, p, height, width) for rng in rngs]
    out = resize_crops(imgs, np.array([d.box for d in draws]), p.crop_size)

    sel = np.array([d.flip for d in draws])
    if sel.any():
        out[sel] = out[sel][:, :, ::-1]
    sel = np.array([d.jitter is not None for d in draws])
    if sel.any():
        f = np.array([d.jitter for d in draws if d.jitter is not None])
        out[sel] = color_jitter(out[sel], f[:, 0], f[:, 1], f[:, 2], f[:, 3])
    sel = np.array([d.gray for d in draws])
    if sel.any():
        out[sel] = np.repeat(grayscale(out[sel])[..., None], 3, axis=-1)
    sel = np.array([d.sigma is not None for d in draws])
    if sel.any():
        sig = [d.sigma for d in draws if d.sigma is not None]
        out[sel] = gaussian_blur(out[sel], sig, blur_kernel_size(p.crop_size))
    sel = np.array([d.solarize for d in draws])
    if sel.any():
        out[sel] = solarize(out[sel])
    return out


def augment(img: np.ndarray, p: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """One random view of a single ``H x W x 3`` image."""
    return augment_batch(np.asarray(img)[None], p, [rng])[0]


def to_normalized_chw(img: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    """Byte-scale ``...HWC`` image(s) to normalised float32 ``...CHW``."""
    x = (np.asarray(img, dtype=np.float64) / 255.0 - np.asarray(mean)) / np.asarray(std)
    return np.ascontiguousarray(np.moveaxis(x, -1, -3), dtype=np.float32)


def _view_rngs(seeds: Sequence[int]) -> Tuple[list, list]:
    pairs = [np.random.SeedSequence(int(s)).spawn(2) for s in seeds]
    return [np.random.default_rng(a) for a, _ in pairs], [np.random.default_rng(b) for _, b in pairs]


def make_views_batch(
    imgs: np.ndarray,
    p1: AugmentParams,
    p2: AugmentParams,
    seeds: Sequence[int],
    mean: Sequence[float] = (0.5, 0.5, 0.5),
    std: Sequence[float] = (0.25, 0.25, 0.25),
) -> ViewPair:
    """Two views of every image, NCHW float32; image ``i`` is driven only by ``seeds[i]``."""
    r1, r2 = _view_rngs(seeds)
    return ViewPair(
        to_normalized_chw(augment_batch(imgs, p1, r1), mean, std),
        to_normalized_chw(augment_batch(imgs, p2, r2), mean, std),
    )


def make_views(
    img: np.ndarray,
    p1: AugmentParams,
    p2: AugmentParams,
    rng_seed: int,
    mean: Sequence[float] = (0.5, 0.5, 0.5),
    std: Sequence[float] = (0.25, 0.25, 0.25),
) -> ViewPair:
    """Two views (``T1``, ``T2``) of one image, each ``C x H x W`` float32, fully determined by ``rng_seed``."""
    v = make_views_batch(np.asarray(img)[None], p1, p2, [rng_seed], mean, std)
    return ViewPair(v.x1[0], v.x2[0])


def center_view(img: np.ndarray, size: int, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    """Deterministic evaluation view: the full image resized to ``size``."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] != size or img.shape[1] != size:
        img = resize_bilinear(img, 0, 0, img.shape[0], img.shape[1], size)
    return to_normalized_chw(img, mean, std)
