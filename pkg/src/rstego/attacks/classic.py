"""Differentiable noise, blur, rescale and cropout attacks.

All take and return [-1, 1] images of shape [B, 3, H, W]. Sigma values are
expressed in full-scale units (1.0 = the whole 8-bit range), which maps to
2.0 in tensor units.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from ..core import check

FULL_SCALE = 2.0  # width of the [-1, 1] value range


def gaussian_noise(x: torch.Tensor, sigma: float,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """Add i.i.d. zero-mean Gaussian noise of the given full-scale sigma."""
    check(sigma >= 0.0, f"sigma must be non-negative, got {sigma}")
    if sigma == 0.0:
        return x
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype,
                        device=x.device) * (sigma * FULL_SCALE)
    return (x + noise).clamp(-1.0, 1.0)


def gaussian_kernel_1d(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    """Normalized 1-D Gaussian taps; sigma <= 0 degenerates to a delta."""
    check(size >= 1 and size % 2 == 1, f"kernel size must be odd, got {size}")
    if sigma <= 0.0:
        taps = torch.zeros(size, dtype=dtype)
        taps[size // 2] = 1.0
        return taps
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    taps = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    return taps / taps.sum()


def gaussian_blur(x: torch.Tensor, kernel_size: int, sigma: float) -> torch.Tensor:
    """Depthwise convolution with a normalized Gaussian, reflect padding."""
    taps = gaussian_kernel_1d(kernel_size, sigma, x.dtype).to(x.device)
    kernel = torch.outer(taps, taps)
    channels = x.shape[1]
    weight = kernel.view(1, 1, kernel_size, kernel_size).expand(channels, 1, -1, -1)
    pad = kernel_size // 2
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    return F.conv2d(padded, weight, groups=channels).clamp(-1.0, 1.0)


def random_scale(x: torch.Tensor, factor: float) -> torch.Tensor:
    """Bilinear rescale by ``factor`` followed by a rescale back to the
    original side, so the output keeps the input resolution."""
    check(factor > 0.0, f"scale factor must be positive, got {factor}")
    side_h, side_w = x.shape[-2:]
    new_h = max(1, round(side_h * factor))
    new_w = max(1, round(side_w * factor))
    if (new_h, new_w) == (side_h, side_w):
        return x
    scaled = F.interpolate(x, size=(new_h, new_w), mode="bilinear", align_corners=False)
    back = F.interpolate(scaled, size=(side_h, side_w), mode="bilinear", align_corners=False)
    return back.clamp(-1.0, 1.0)


def crop_rectangle(height: int, width: int, keep_ratio: float,
                   generator: torch.Generator | None = None) -> tuple[int, int, int, int]:
    """Random axis-aligned rectangle (top, left, h, w) covering ~keep_ratio
    of the area. keep_ratio 1 spans everything, 0 collapses to nothing."""
    check(0.0 <= keep_ratio <= 1.0, f"keep ratio must be in [0, 1], got {keep_ratio}")
    side_frac = math.sqrt(keep_ratio)
    keep_h = round(height * side_frac)
    keep_w = round(width * side_frac)
    if keep_h == 0 or keep_w == 0:
        return 0, 0, 0, 0
    top = int(torch.randint(0, height - keep_h + 1, (1,), generator=generator).item())
    left = int(torch.randint(0, width - keep_w + 1, (1,), generator=generator).item())
    return top, left, keep_h, keep_w


def random_crop(marked: torch.Tensor, cover: torch.Tensor, keep_ratio: float,
                generator: torch.Generator | None = None) -> torch.Tensor:
    """Cropout: keep a random rectangle of the marked image, fill the rest
    with the corresponding cover pixels so the output stays full size."""
    check(marked.shape == cover.shape,
          f"shape mismatch: {tuple(marked.shape)} vs {tuple(cover.shape)}")
    height, width = marked.shape[-2:]
    top, left, keep_h, keep_w = crop_rectangle(height, width, keep_ratio, generator)
    mask = torch.zeros(1, 1, height, width, dtype=torch.bool, device=marked.device)
    mask[..., top:top + keep_h, left:left + keep_w] = True
    return torch.where(mask, marked, cover)
