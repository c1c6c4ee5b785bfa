"""Fixed input transforms: edge view, noise view, patch selection, corruptions.

Sobel and SRM filtering run on exact integer arithmetic (channel sums and
integer-scaled kernels) and divide once at the end, so outputs are
bit-reproducible and can be matched against hand-evaluated stencils.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError, DataError

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.int64)
SOBEL_Y = SOBEL_X.T.copy()
SOBEL_MAX = 4 * 255 * np.sqrt(2.0)

# canonical SRM residual kernels and their normalisations
SRM_FIRST = np.array([[0, 0, 0], [0, -1, 1], [0, 0, 0]], dtype=np.int64)
SRM_SECOND = np.array([[0, 0, 0], [1, -2, 1], [0, 0, 0]], dtype=np.int64)
SRM_SQUARE = np.array([[-1, 2, -2, 2, -1],
                       [2, -6, 8, -6, 2],
                       [-2, 8, -12, 8, -2],
                       [2, -6, 8, -6, 2],
                       [-1, 2, -2, 2, -1]], dtype=np.int64)
SRM_KERNELS = ((SRM_FIRST, 1), (SRM_SECOND, 2), (SRM_SQUARE, 12))
SRM_SCALE = 12  # common denominator of the three normalisations


def _pad3(k: np.ndarray, size: int = 5) -> np.ndarray:
    off = (size - k.shape[0]) // 2
    out = np.zeros((size, size), dtype=np.int64)
    out[off:off + k.shape[0], off:off + k.shape[1]] = k
    return out


# sum of the three kernels over the common denominator, as one integer 5x5 stencil
SRM_COMBINED = sum(_pad3(k) * (SRM_SCALE // norm) for k, norm in SRM_KERNELS)


def correlate_replicate(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size cross-correlation with edge replication; exact for integers."""
    k = kernel.shape[0]
    r = k // 2
    pad = np.pad(x, r, mode="edge")
    out = np.zeros(x.shape, dtype=np.result_type(x, kernel))
    h, w = x.shape
    for i in range(k):
        for j in range(k):
            if kernel[i, j]:
                out += kernel[i, j] * pad[i:i + h, j:j + w]
    return out


def _check_image(image: np.ndarray, min_side: int = 3) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3 or min(image.shape[:2]) < min_side:
        raise ContractError(f"expected an H×W×3 image with H,W >= {min_side}, got {image.shape}")
    return image


def sobel_edges(image: np.ndarray) -> np.ndarray:
    """Gradient magnitude of the grayscale image, ``1×H×W`` in [0, 1]."""
    _check_image(image)
    s = image.astype(np.int64).sum(axis=2)  # 3 * grayscale
    gx = correlate_replicate(s, SOBEL_X)
    gy = correlate_replicate(s, SOBEL_Y)
    mag = np.sqrt((gx * gx + gy * gy).astype(np.float64)) / (3 * SOBEL_MAX)
    return mag[None].astype(np.float32)


def tile_grid(h: int, w: int, p: int) -> list[tuple[int, int]]:
    return [(r, c) for r in range(0, h - p + 1, p) for c in range(0, w - p + 1, p)]


def richest_patch(image: np.ndarray, p: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Non-overlapping ``p×p`` tile with the largest grayscale std-dev."""
    _check_image(image, 1)
    h, w = image.shape[:2]
    if p < 1 or p > min(h, w):
        raise ConfigError(f"patch size {p} does not fit a {h}x{w} image")
    gray = image.astype(np.float64).sum(axis=2) / 3.0
    tiles = tile_grid(h, w, p)
    stds = np.array([gray[r:r + p, c:c + p].std() for r, c in tiles])
    best = int(np.argmax(stds))  # first maximum = smallest row-major index
    r, c = tiles[best]
    return image[r:r + p, c:c + p].copy(), (r, c)


def srm_residuals(patch: np.ndarray) -> list[np.ndarray]:
    """Per-kernel normalised residuals (float64, 3×p×p each), unclamped."""
    _check_image(patch)
    x = patch.astype(np.int64)
    return [np.stack([correlate_replicate(x[..., ch], k) for ch in range(3)]) / (norm * 255.0)
            for k, norm in SRM_KERNELS]


def srm_noise(patch: np.ndarray) -> np.ndarray:
    """Summed SRM residual per channel, scaled by 1/255 and clamped to [-1, 1]."""
    _check_image(patch)
    x = patch.astype(np.int64)
    acc = np.stack([correlate_replicate(x[..., ch], SRM_COMBINED) for ch in range(3)])
    return np.clip(acc / (SRM_SCALE * 255.0), -1.0, 1.0).astype(np.float32)


def appearance(image: np.ndarray) -> np.ndarray:
    return (image.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def views(image: np.ndarray, patch: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Appearance (3×H×W), edge (1×H×W) and noise (3×p×p) inputs for one image."""
    noise_src, _ = richest_patch(image, patch)
    return appearance(image), sobel_edges(image), srm_noise(noise_src)


def parsing_onehot(parsing: np.ndarray, n_labels: int = 7) -> np.ndarray:
    if parsing.min() < 0 or parsing.max() >= n_labels:
        raise DataError(f"parsing labels must lie in [0, {n_labels - 1}]")
    return (np.arange(n_labels)[:, None, None] == parsing[None]).astype(np.float32)


# -- corruptions ---------------------------------------------------------------
CORRUPTION_KINDS = ("saturation", "contrast", "gaussian_noise", "blur", "pixelate", "downscale", "crop")

DEFAULT_SEVERITY_TABLES: dict[str, list[float]] = {
    "saturation": [1.0, 0.8, 0.6, 0.4, 0.2, 0.0],
    "contrast": [1.0, 0.8, 0.6, 0.45, 0.3, 0.2],
    "gaussian_noise": [0, 4, 8, 16, 24, 32],  # sigma in pixel levels (/255 in [0,1] units)
    "blur": [0.0, 0.5, 1.0, 1.5, 2.0, 3.0],
    "pixelate": [1, 2, 3, 4, 6, 8],
    "downscale": [1.0, 0.75, 0.5, 0.33, 0.25, 0.2],
    "crop": [1.0, 0.95, 0.9, 0.8, 0.7, 0.6],
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ConfigError(f"unknown corruption kind {self.kind!r}")
        if not 0 <= self.severity <= 5:
            raise ConfigError(f"severity {self.severity} outside [0, 5]")


def _nearest_resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    ri = np.minimum((np.arange(h) * img.shape[0] / h).astype(int), img.shape[0] - 1)
    ci = np.minimum((np.arange(w) * img.shape[1] / w).astype(int), img.shape[1] - 1)
    return img[ri][:, ci]


def corrupt(image: np.ndarray, spec: CorruptionSpec, seed: int,
            tables: dict[str, list[float]] | None = None) -> np.ndarray:
    """Apply one corruption at a fixed severity; deterministic in all arguments."""
    tables = tables or DEFAULT_SEVERITY_TABLES
    if spec.severity == 0:
        return image.copy()
    level = tables[spec.kind][spec.severity]
    h, w = image.shape[:2]
    x = image.astype(np.float64)
    if spec.kind == "saturation":
        gray = x.mean(axis=2, keepdims=True)
        x = gray + level * (x - gray)
    elif spec.kind == "contrast":
        mu = x.mean(axis=(0, 1), keepdims=True)
        x = mu + level * (x - mu)
    elif spec.kind == "gaussian_noise":
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, spec.severity, 0x7015E])
        x = x + rng.normal(0.0, level, x.shape)
    elif spec.kind == "blur":
        x = ndimage.gaussian_filter(x, sigma=(level, level, 0), mode="nearest")
    elif spec.kind == "pixelate":
        b = int(level)
        hh, ww = -(-h // b) * b, -(-w // b) * b
        padded = np.pad(x, ((0, hh - h), (0, ww - w), (0, 0)), mode="edge")
        blocks = padded.reshape(hh // b, b, ww // b, b, 3).mean(axis=(1, 3))
        x = np.repeat(np.repeat(blocks, b, 0), b, 1)[:h, :w]
    elif spec.kind == "downscale":
        small = _nearest_resize(x, max(1, int(round(h * level))), max(1, int(round(w * level))))
        x = _nearest_resize(small, h, w)
    elif spec.kind == "crop":
        ch, cw = max(1, int(round(h * level))), max(1, int(round(w * level)))
        r0, c0 = (h - ch) // 2, (w - cw) // 2
        x = _nearest_resize(x[r0:r0 + ch, c0:c0 + cw], h, w)
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)
