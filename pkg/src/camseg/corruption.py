"""Seedable RGB-space perturbations for robustness sweeps.

Eight conditions: salt & pepper, horizontal motion blur, gaussian noise,
gaussian blur, and the four color-jitter axes (brightness, contrast,
saturation, hue).  All operate on (H, W, 3) uint8 images and return uint8.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "CorruptionError",
    "salt_pepper",
    "motion_blur",
    "gaussian_noise",
    "gaussian_blur",
    "color_jitter",
    "apply_corruption",
    "CORRUPTION_KINDS",
]

LUMA = np.array([0.299, 0.587, 0.114])

CORRUPTION_KINDS = (
    "salt_pepper",
    "motion_blur",
    "gaussian_noise",
    "gaussian_blur",
    "brightness",
    "contrast",
    "saturation",
    "hue",
)


class CorruptionError(ValueError):
    pass


def _check_img(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise CorruptionError(f"expected (H, W, 3) image, got {img.shape}")
    return img


def salt_pepper(img: np.ndarray, p: float, seed: int) -> np.ndarray:
    img = _check_img(img)
    if not 0.0 <= p <= 0.8:
        raise CorruptionError(f"salt_pepper p must be in [0, 0.8], got {p}")
    rng = np.random.default_rng(seed)
    out = img.copy()
    hit = rng.random(img.shape[:2]) < p
    salt = rng.random(img.shape[:2]) < 0.5
    out[hit & salt] = 255
    out[hit & ~salt] = 0
    return out


def _reflect_conv_axis(x: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    r = len(taps) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="reflect")
    out = np.zeros_like(x)
    for i, w in enumerate(taps):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(i, i + x.shape[axis])
        out += w * xp[tuple(sl)]
    return out


def motion_blur(img: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    img = _check_img(img)
    if k % 2 == 0 or not 3 <= k <= 151:
        raise CorruptionError(f"motion_blur kernel must be odd in [3, 151], got {k}")
    taps = np.full(k, 1.0 / k)
    out = _reflect_conv_axis(img.astype(np.float64), taps, axis=1)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def gaussian_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    img = _check_img(img)
    if not 0.0 <= sigma <= 100.0:
        raise CorruptionError(f"gaussian_noise sigma must be in [0, 100], got {sigma}")
    rng = np.random.default_rng(seed)
    out = img.astype(np.float64) + rng.normal(0.0, sigma, img.shape)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def gaussian_taps(sigma: float, k: int = 11) -> np.ndarray:
    r = k // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


def gaussian_blur(img: np.ndarray, sigma: float, k: int = 11) -> np.ndarray:
    img = _check_img(img)
    if not 1.0 <= sigma <= 50.0:
        raise CorruptionError(f"gaussian_blur sigma must be in [1, 50], got {sigma}")
    taps = gaussian_taps(sigma, k)
    out = img.astype(np.float64)
    out = _reflect_conv_axis(out, taps, axis=0)
    out = _reflect_conv_axis(out, taps, axis=1)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """rgb in [0,1] -> hsv in [0,1]; vectorized over leading axes."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        dd = np.where(delta > 0, delta, 1.0)
        h = np.select(
            [maxc == r, maxc == g],
            [(g - b) / dd, 2.0 + (b - r) / dd],
            default=4.0 + (r - g) / dd,
        )
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def color_jitter(img: np.ndarray, kind: str, v: float, contrast_pivot: str = "mean") -> np.ndarray:
    img = _check_img(img)
    x = img.astype(np.float64)
    if kind == "brightness":
        if not 0.5 <= v <= 1.5:
            raise CorruptionError(f"brightness scale must be in [0.5, 1.5], got {v}")
        out = x * v
    elif kind == "contrast":
        if not 0.5 <= v <= 1.5:
            raise CorruptionError(f"contrast scale must be in [0.5, 1.5], got {v}")
        pivot = (x @ LUMA).mean() if contrast_pivot == "mean" else 128.0
        out = pivot + (x - pivot) * v
    elif kind == "saturation":
        if not 0.0 <= v <= 2.0:
            raise CorruptionError(f"saturation scale must be in [0, 2], got {v}")
        gray = (x @ LUMA)[..., None]
        out = gray + (x - gray) * v
    elif kind == "hue":
        if not -0.2 <= v <= 0.2:
            raise CorruptionError(f"hue shift must be in [-0.2, 0.2], got {v}")
        hsv = _rgb_to_hsv(x / 255.0)
        hsv[..., 0] = (hsv[..., 0] + v) % 1.0
        out = _hsv_to_rgb(hsv) * 255.0
    else:
        raise CorruptionError(f"unknown color_jitter kind {kind!r}")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def apply_corruption(img: np.ndarray, kind: str, param: float, seed: int = 0) -> np.ndarray:
    """Dispatch by kind; used by the sweep runner."""
    if kind == "salt_pepper":
        return salt_pepper(img, param, seed)
    if kind == "motion_blur":
        return motion_blur(img, int(param), seed)
    if kind == "gaussian_noise":
        return gaussian_noise(img, param, seed)
    if kind == "gaussian_blur":
        return gaussian_blur(img, param)
    if kind in ("brightness", "contrast", "saturation", "hue"):
        return color_jitter(img, kind, param)
    raise CorruptionError(f"unknown corruption kind {kind!r}")
