"""Peak signal-to-noise ratio and structural similarity for [0, 1] images."""

import math
from dataclasses import dataclass

import numpy as np

from .blocks import unet_forward
from .data import _correlate_rows_reflect, gaussian_kernel_1d
from .tensor import Tensor

PSNR_CAP_DB = 100.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW_SIGMA = 1.5  # 11x11 Gaussian window


@dataclass
class MetricsReport:
    """Per-image metrics and their means over one evaluated split."""

    mean_psnr: float
    mean_ssim: float
    n_images: int
    psnr_values: list
    ssim_values: list


def psnr(a, b):
    """10*log10(1/MSE) for [0, 1] images; capped at 100 dB when MSE ~ 0."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def _window_mean(plane, kernel):
    rows = _correlate_rows_reflect(plane, kernel)
    return _correlate_rows_reflect(rows.T, kernel).T


def ssim(a, b, per_channel=True):
    """Windowed structural similarity, averaged over pixels and channels.

    Uses the conventional 11x11 Gaussian window (sigma 1.5) with stabilizers
    C1=(0.01)^2, C2=(0.03)^2 on the [0, 1] range and reflect padding.  When
    ``per_channel`` is false the channels are averaged into one plane first.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if not per_channel:
        a = a.mean(axis=0, keepdims=True)
        b = b.mean(axis=0, keepdims=True)
    k = gaussian_kernel_1d(SSIM_WINDOW_SIGMA)
    channel_means = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mx = _window_mean(x, k)
        my = _window_mean(y, k)
        vx = _window_mean(x * x, k) - mx * mx
        vy = _window_mean(y * y, k) - my * my
        cxy = _window_mean(x * y, k) - mx * my
        num = (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
        channel_means.append((num / den).mean())
    return float(np.mean(channel_means))


def restore_batch(model, degraded):
    """Forward a degraded batch and clamp the output to displayable range."""
    out = unet_forward(Tensor(degraded), model)
    return np.clip(out.data, 0.0, 1.0)


def evaluate_testset(model, test_pairs, batch_size=50):
    """Per-image PSNR/SSIM of clamp(model(degraded)) against clean targets."""
    degraded, clean = test_pairs
    n = len(degraded)
    psnr_values = []
    ssim_values = []
    for start in range(0, n, batch_size):
        restored = restore_batch(model, degraded[start : start + batch_size])
        for i, img in enumerate(restored):
            psnr_values.append(psnr(img, clean[start + i]))
            ssim_values.append(ssim(img, clean[start + i]))
    # fsum keeps the means exactly order-independent
    return MetricsReport(
        mean_psnr=math.fsum(psnr_values) / n,
        mean_ssim=math.fsum(ssim_values) / n,
        n_images=n,
        psnr_values=psnr_values,
        ssim_values=ssim_values,
    )
