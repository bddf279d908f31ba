"""Image metrics on the unit dynamic range: SSIM, PSNR and masked squared error."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ContractError

K1, K2 = 0.01, 0.03
C1, C2 = K1**2, K2**2
WINDOW, SIGMA = 11, 1.5


def to_unit(x: np.ndarray) -> np.ndarray:
    """Model range [-1, 1] -> metric range [0, 1], clipped."""
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) * 0.5, 0.0, 1.0)


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return w / w.sum()


def _blur(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    return correlate1d(correlate1d(img, w, axis=0, mode="reflect"), w, axis=1, mode="reflect")


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Local SSIM of two single-channel ``[h, w]`` images on [0, 1]."""
    w = gaussian_window()
    mu_a, mu_b = _blur(a, w), _blur(b, w)
    var_a = _blur(a * a, w) - mu_a * mu_a
    var_b = _blur(b * b, w) - mu_b * mu_b
    cov = _blur(a * b, w) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over pixels, channels and frames.

    Inputs are unit-range grids ``[h, w]``, ``[h, w, c]`` or ``[f, h, w, c]``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return float(ssim_map(a, b).mean())
    if a.ndim == 3:
        a, b = a[None], b[None]
    per_frame = [
        np.mean([ssim_map(a[f, ..., c], b[f, ..., c]).mean() for c in range(a.shape[-1])])
        for f in range(a.shape[0])
    ]
    return float(np.mean(per_frame))


def constant_ssim(mu_a: float, mu_b: float) -> float:
    """SSIM of two constant images: only the luminance term survives."""
    return (2.0 * mu_a * mu_b + C1) / (mu_a * mu_a + mu_b * mu_b + C1)


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """``10 log10(range^2 / MSE)``; ``inf`` when the inputs are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def masked_l2(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared error over mask-true pixels (mask broadcasts over channels)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"masked_l2 shape mismatch: {a.shape} vs {b.shape}")
    m = np.broadcast_to(np.asarray(mask) > 0.5, a.shape)
    if not m.any():
        raise ContractError("masked_l2 needs a non-empty mask")
    d = (a - b)[m]
    return float(np.mean(d * d))
