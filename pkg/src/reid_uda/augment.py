"""Pixel-space augmentation for 8-bit RGB images (H x W x 3 uint8 arrays).

Grayscale output stays 3-channel with R = G = B so image shapes never change.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AugmentationError
from .rng import Rng

NTSC_WEIGHTS = (0.299, 0.587, 0.114)
NTSC_WEIGHTS_MILLI = (299, 587, 114)
MAX_REGION_TRIES = 100
# tolerated shortfall of a floored rectangle against the sampled area/aspect range
REGION_SLACK = 0.1


@dataclass(frozen=True)
class AugmentConfig:
    p_flip: float = 0.5
    p_global: float = 0.05
    p_local: float = 0.4
    p_erase: float = 0.5
    s_min: float = 0.02
    s_max: float = 0.4
    r_local: float = 0.3
    pad: int = 10

    def __post_init__(self):
        for name in ("p_flip", "p_global", "p_local", "p_erase"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} is not a probability")
        if not 0.0 < self.s_min <= self.s_max < 1.0:
            raise ValueError("need 0 < s_min <= s_max < 1")
        if not 0.0 < self.r_local <= 1.0:
            raise ValueError("need 0 < r_local <= 1")
        if self.pad < 0:
            raise ValueError("pad must be >= 0")


def _check_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    return img


def rgb_to_grayscale_ntsc(img) -> np.ndarray:
    img = _check_image(img)
    rgb = img.astype(np.int64)
    # integer weights in thousandths keep exact .5 cases exact; halves round up
    w = NTSC_WEIGHTS_MILLI
    g = (w[0] * rgb[..., 0] + w[1] * rgb[..., 1] + w[2] * rgb[..., 2] + 500) // 1000
    g = np.clip(g, 0, 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=2)


def global_grayscale(img, p_global: float, rng: Rng) -> np.ndarray:
    img = _check_image(img)
    if rng.uniform() >= p_global:
        return img.copy()
    return rgb_to_grayscale_ntsc(img)


def sample_region(height: int, width: int, cfg: AugmentConfig, rng: Rng) -> tuple[int, int, int, int]:
    """Random rectangle ``(x, y, w, h)`` inside a ``height x width`` image.

    Area is drawn from ``[s_min, s_max]`` of the image, aspect ``r`` from
    ``[r_local, 1 / r_local]``; sides are ``floor(sqrt(area / r))`` by
    ``floor(sqrt(area * r))``. Rectangles that are empty, do not fit, or
    whose floored area/aspect strays more than ``REGION_SLACK`` outside the
    configured range are redrawn, at most ``MAX_REGION_TRIES`` times.
    """
    area = height * width
    min_area = (1.0 - REGION_SLACK) * cfg.s_min * area
    lo_aspect = (1.0 - REGION_SLACK) * cfg.r_local
    hi_aspect = (1.0 + REGION_SLACK) / cfg.r_local
    for _ in range(MAX_REGION_TRIES):
        s_t = rng.uniform(cfg.s_min, cfg.s_max) * area
        r_t = rng.uniform(cfg.r_local, 1.0 / cfg.r_local)
        w_t = int(np.floor(np.sqrt(s_t / r_t)))
        h_t = int(np.floor(np.sqrt(s_t * r_t)))
        x_t = rng.integers(width)
        y_t = rng.integers(height)
        if w_t == 0 or h_t == 0:
            continue
        if w_t * h_t < min_area or not lo_aspect <= w_t / h_t <= hi_aspect:
            continue
        if x_t + w_t <= width and y_t + h_t <= height:
            return x_t, y_t, w_t, h_t
    raise AugmentationError(f"no region fits a {height}x{width} image after {MAX_REGION_TRIES} tries")


def local_grayscale(img, cfg: AugmentConfig, rng: Rng, return_region: bool = False):
    img = _check_image(img)
    out = img.copy()
    region = None
    if rng.uniform() < cfg.p_local:
        x, y, w, h = region = sample_region(img.shape[0], img.shape[1], cfg, rng)
        out[y : y + h, x : x + w] = rgb_to_grayscale_ntsc(img[y : y + h, x : x + w])
    return (out, region) if return_region else out


def random_erasing(img, p_erase: float, cfg: AugmentConfig, rng: Rng, return_region: bool = False):
    """Overwrite a random rectangle with per-pixel, per-channel uniform noise."""
    img = _check_image(img)
    out = img.copy()
    region = None
    if rng.uniform() < p_erase:
        x, y, w, h = region = sample_region(img.shape[0], img.shape[1], cfg, rng)
        out[y : y + h, x : x + w] = rng.integers(256, size=(h, w, 3)).astype(np.uint8)
    return (out, region) if return_region else out


def horizontal_flip(img) -> np.ndarray:
    img = _check_image(img)
    return img[:, ::-1].copy()


def pad_and_random_crop(img, pad: int, rng: Rng) -> np.ndarray:
    img = _check_image(img)
    if pad < 0:
        raise ValueError("pad must be >= 0")
    if pad == 0:
        return img.copy()
    h, w = img.shape[:2]
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    dy = rng.integers(2 * pad + 1)
    dx = rng.integers(2 * pad + 1)
    return padded[dy : dy + h, dx : dx + w].copy()


def data_adapter(img, cfg: AugmentConfig, rng: Rng, erase: bool = False) -> np.ndarray:
    """Training-time chain: pad+crop, flip, global then local grayscale, optional erasing.

    ``erase`` is for the fine-tuning stage only.
    """
    out = pad_and_random_crop(img, cfg.pad, rng)
    if rng.uniform() < cfg.p_flip:
        out = horizontal_flip(out)
    out = global_grayscale(out, cfg.p_global, rng)
    out = local_grayscale(out, cfg, rng)
    if erase:
        out = random_erasing(out, cfg.p_erase, cfg, rng)
    return out


def read_ppm(path) -> np.ndarray:
    from PIL import Image

    with Image.open(Path(path)) as im:
        if im.format != "PPM" or im.mode != "RGB":
            raise ValueError(f"{path}: not a binary RGB PPM (P6)")
        return np.asarray(im, dtype=np.uint8).copy()


def write_ppm(path, img) -> None:
    from PIL import Image

    Image.fromarray(_check_image(img), mode="RGB").save(Path(path), format="PPM")
