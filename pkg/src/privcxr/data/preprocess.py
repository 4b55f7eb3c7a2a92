"""Image preprocessing and training-time augmentation.

Order is fixed: normalize -> equalize -> resize.
"""
from __future__ import annotations

import math

import numpy as np


def normalize_image(pixels: np.ndarray) -> np.ndarray:
    """Shift to min 0, scale max to 255 and floor to uint8. Constant images become zeros."""
    img = np.asarray(pixels, dtype=np.float64)
    if img.size == 0:
        raise ValueError("cannot normalize an empty image")
    shifted = img - img.min()
    top = shifted.max()
    if top == 0:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.floor(shifted / top * 255.0).astype(np.uint8)


def equalize_histogram(image: np.ndarray) -> np.ndarray:
    """Global equalization: out(v) = round(255 * CDF(v)), round-half-to-even."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise TypeError(f"equalize_histogram expects uint8 input, got {img.dtype}")
    hist = np.bincount(img.ravel(), minlength=256)
    cdf = np.cumsum(hist) / img.size
    lut = np.round(255.0 * cdf).astype(np.uint8)
    return lut[img]


def _axis_weights(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel-centre bilinear, edge-clamped
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[o, i0] += 1.0 - f
        if f:
            m[o, i1] += f
    return m


def resize(image: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a 2-d image; returns float64. Same-size resize is exact identity."""
    img = np.asarray(image, dtype=np.float64)
    h, w = (size, size) if isinstance(size, int) else size
    if h < 1 or w < 1:
        raise ValueError(f"target size must be >= 1, got {(h, w)}")
    if (h, w) == img.shape:
        return img.copy()
    return _axis_weights(img.shape[0], h) @ img @ _axis_weights(img.shape[1], w).T


def preprocess(pixels: np.ndarray, size: int) -> np.ndarray:
    """Raw grid to a float image in [0, 255]."""
    return resize(equalize_histogram(normalize_image(pixels)), size)


def to_model_input(images: np.ndarray) -> np.ndarray:
    """(N, H, W) images in [0, 255] to (N, 1, H, W), centred to roughly unit variance."""
    x = np.asarray(images, dtype=np.float64) / 255.0
    return ((x - 0.5) / 0.29)[:, None, :, :]


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the image centre; samples outside the frame read as 0."""
    img = np.asarray(image, dtype=np.float64)
    if degrees == 0:
        return img.copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source location
    sx = c * (xx - cx) + s * (yy - cy) + cx
    sy = -s * (xx - cx) + c * (yy - cy) + cy
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    padded = np.zeros((h + 2, w + 2))
    padded[1:-1, 1:-1] = img

    def at(yi: np.ndarray, xi: np.ndarray) -> np.ndarray:
        return padded[np.clip(yi + 1, 0, h + 1), np.clip(xi + 1, 0, w + 1)]

    return (
        at(y0, x0) * (1 - fx) * (1 - fy)
        + at(y0, x0 + 1) * fx * (1 - fy)
        + at(y0 + 1, x0) * (1 - fx) * fy
        + at(y0 + 1, x0 + 1) * fx * fy
    )


def flip(image: np.ndarray) -> np.ndarray:
    """Medio-lateral (left-right) flip."""
    return np.ascontiguousarray(np.asarray(image)[..., ::-1])


def augment(
    image: np.ndarray,
    rng: np.random.Generator | None,
    enabled: bool,
    *,
    max_degrees: float = 10.0,
    flip_prob: float = 0.5,
    angle: float | None = None,
    do_flip: bool | None = None,
) -> np.ndarray:
    """Random rotation in [-max_degrees, max_degrees] then a flip with ``flip_prob``.

    ``angle`` / ``do_flip`` force the random choices. Disabled returns the input unchanged.
    """
    if not enabled:
        return image
    if angle is None:
        angle = float(rng.uniform(-max_degrees, max_degrees))
    if do_flip is None:
        do_flip = bool(rng.random() < flip_prob)
    out = rotate(image, angle)
    return flip(out) if do_flip else out
