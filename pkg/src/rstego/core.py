"""Image representation, file I/O and quality metrics.

Every image in the pipeline is a float tensor of shape [batch, 3, side, side]
with values in [-1, 1] (8-bit [0, 255] mapped through x/127.5 - 1). Metrics
and file I/O de-normalize back to the 8-bit scale internally; nothing else
in the package ever leaves the [-1, 1] convention.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

_SSIM_KERNEL_CACHE: dict[torch.dtype, torch.Tensor] = {}


def check(condition: bool, message: str) -> None:
    """Raise ValueError on a broken call contract."""
    if not condition:
        raise ValueError(message)


def to_pixel_scale(x: torch.Tensor) -> torch.Tensor:
    """Map [-1, 1] values onto the 8-bit [0, 255] scale (float, unquantized)."""
    return (x + 1.0) * 127.5


def from_pixel_scale(px: torch.Tensor) -> torch.Tensor:
    """Map [0, 255] values into [-1, 1]."""
    return px / 127.5 - 1.0


def quantize_to_uint8(x: torch.Tensor) -> np.ndarray:
    """Round a [B, 3, H, W] tensor to uint8 HWC arrays, one per batch item."""
    px = to_pixel_scale(x).clamp(0.0, 255.0).round()
    return px.detach().cpu().numpy().astype(np.uint8).transpose(0, 2, 3, 1)


def from_uint8(frames: np.ndarray) -> torch.Tensor:
    """Inverse of :func:`quantize_to_uint8` (uint8 [B, H, W, 3] -> tensor)."""
    arr = frames.astype(np.float32).transpose(0, 3, 1, 2)
    return from_pixel_scale(torch.from_numpy(arr))


def load_image(path: str | Path, side: int) -> torch.Tensor:
    """Load an 8-bit raster image as a [1, 3, side, side] tensor in [-1, 1].

    The file is decoded as RGB and bilinearly resized to side x side.
    Unreadable files raise OSError; non-image payloads raise
    PIL.UnidentifiedImageError (a subclass of OSError).
    """
    check(side > 0, f"side must be positive, got {side}")
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        if rgb.size != (side, side):
            rgb = rgb.resize((side, side), Image.BILINEAR)
        arr = np.asarray(rgb, dtype=np.float32)
    tensor = torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)
    return from_pixel_scale(tensor)


def save_image(x: torch.Tensor, path: str | Path) -> None:
    """Write a [1, 3, H, W] or [3, H, W] tensor in [-1, 1] as an 8-bit PNG."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    check(x.dim() == 4 and x.shape[0] == 1 and x.shape[1] == 3,
          f"expected a single 3-channel image, got shape {tuple(x.shape)}")
    frame = quantize_to_uint8(x)[0]
    Image.fromarray(frame).save(path, format="PNG")


def psnr(a: torch.Tensor, b: torch.Tensor, cap_db: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB, computed on the 8-bit [0, 255] scale.

    Identical inputs return ``cap_db`` instead of infinity.
    """
    check(a.shape == b.shape, f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = (a.detach().double() - b.detach().double()) * 127.5
    mse = torch.mean(diff * diff).item()
    if mse == 0.0:
        return cap_db
    return min(cap_db, 20.0 * math.log10(255.0 / math.sqrt(mse)))


def _ssim_kernel(dtype: torch.dtype) -> torch.Tensor:
    if dtype not in _SSIM_KERNEL_CACHE:
        half = (SSIM_WINDOW - 1) / 2.0
        coords = np.arange(SSIM_WINDOW) - half
        g = np.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
        g /= g.sum()
        kernel = np.outer(g, g)
        _SSIM_KERNEL_CACHE[dtype] = torch.from_numpy(kernel).to(dtype).view(
            1, 1, SSIM_WINDOW, SSIM_WINDOW)
    return _SSIM_KERNEL_CACHE[dtype]


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean structural similarity over an 11x11 Gaussian window (sigma 1.5).

    Computed per channel on the de-normalized 8-bit scale with the standard
    stabilizing constants, then averaged. Windows are taken over the valid
    interior only, so boundary padding never enters the statistics.
    """
    check(a.shape == b.shape, f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    check(a.shape[-1] >= SSIM_WINDOW and a.shape[-2] >= SSIM_WINDOW,
          f"side must be >= {SSIM_WINDOW} for SSIM, got {tuple(a.shape[-2:])}")
    x = to_pixel_scale(a.detach().double())
    y = to_pixel_scale(b.detach().double())
    batch, channels = x.shape[0], x.shape[1]
    x = x.reshape(batch * channels, 1, *x.shape[-2:])
    y = y.reshape(batch * channels, 1, *y.shape[-2:])

    kernel = _ssim_kernel(torch.float64)
    mu_x = F.conv2d(x, kernel)
    mu_y = F.conv2d(y, kernel)
    sigma_x = F.conv2d(x * x, kernel) - mu_x * mu_x
    sigma_y = F.conv2d(y * y, kernel) - mu_y * mu_y
    sigma_xy = F.conv2d(x * y, kernel) - mu_x * mu_y

    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    ssim_map = ((2.0 * mu_x * mu_y + c1) * (2.0 * sigma_xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2))
    return ssim_map.mean().item()


@dataclass
class MetricReport:
    """PSNR/SSIM pair for one image comparison."""

    psnr_db: float
    ssim: float

    @staticmethod
    def compare(a: torch.Tensor, b: torch.Tensor) -> "MetricReport":
        return MetricReport(psnr_db=psnr(a, b), ssim=ssim(a, b))

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @staticmethod
    def from_json(payload: str) -> "MetricReport":
        return MetricReport(**json.loads(payload))
