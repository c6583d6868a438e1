"""Differentiable JPEG simulators and the true-codec reference.

Three approximations of the JPEG encode/decode round trip are provided, all
operating on [-1, 1] images and differentiable end to end:

* ``jpeg_mask``   - zeroes DCT coefficients outside a low-frequency zig-zag
  mask; a purely linear map.
* ``jpeg_soft``   - quantization-table division followed by a cubic soft
  staircase in place of rounding.
* ``jpeg_round``  - true rounding of quantized coefficients in the forward
  pass with a straight-through (identity) gradient.

``jpeg_mixup`` blends any set of (simulator, quality) pairs by convex
combination. ``real_jpeg`` round-trips through an actual codec and is for
evaluation only (no gradient).

Internally the simulators work on luma/chroma planes level-shifted around the
mid-range value, so the zero image maps to all-zero coefficients and is a
fixed point of every quantizer.
"""

from __future__ import annotations

import io
from contextlib import contextmanager

import numpy as np
import torch
from PIL import Image

from ..core import check, from_pixel_scale, from_uint8, quantize_to_uint8, to_pixel_scale

# Base luminance / chrominance quantization tables (8-bit JPEG defaults).
QUANT_TABLE_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

QUANT_TABLE_CHROMA = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)

# RGB <-> YCbCr on the [0, 255] scale (full-range JFIF matrix, chroma kept
# zero-centered; the +128 chroma offset is folded into the level shift).
_RGB_TO_YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
], dtype=np.float64)
_YCC_TO_RGB = np.linalg.inv(_RGB_TO_YCC)

_DCT_CACHE: dict[torch.dtype, torch.Tensor] = {}
_ZIGZAG_CACHE: list[tuple[int, int]] = []

_ST_ROUND_SURROGATE = False


def _dct_matrix(dtype: torch.dtype) -> torch.Tensor:
    """8-point orthonormal DCT-II matrix, rows indexed by frequency."""
    if dtype not in _DCT_CACHE:
        k = np.arange(8)[:, None]
        j = np.arange(8)[None, :]
        m = np.sqrt(2.0 / 8.0) * np.cos((2 * j + 1) * k * np.pi / 16.0)
        m[0, :] = 1.0 / np.sqrt(8.0)
        _DCT_CACHE[dtype] = torch.from_numpy(m).to(dtype)
    return _DCT_CACHE[dtype]


def _to_blocks(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w = x.shape
    return (x.reshape(b, c, h // 8, 8, w // 8, 8)
             .permute(0, 1, 2, 4, 3, 5)
             .reshape(b, c, -1, 8, 8))


def _from_blocks(blocks: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, c = blocks.shape[:2]
    return (blocks.reshape(b, c, h // 8, w // 8, 8, 8)
                  .permute(0, 1, 2, 4, 3, 5)
                  .reshape(b, c, h, w))


def dct_8x8(x: torch.Tensor) -> torch.Tensor:
    """Blockwise orthonormal 8x8 type-II DCT of a [B, C, H, W] tensor.

    Returns coefficients laid out in place (same shape as the input). The map
    is linear, so gradients pass through untouched.
    """
    check(x.dim() == 4, f"expected [B, C, H, W], got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    check(h % 8 == 0 and w % 8 == 0, f"height and width must be multiples of 8, got {h}x{w}")
    d = _dct_matrix(x.dtype).to(x.device)
    blocks = _to_blocks(x)
    coeffs = torch.einsum("ij,bcnjk,lk->bcnil", d, blocks, d)
    return _from_blocks(coeffs, h, w)


def idct_8x8(c: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`dct_8x8`."""
    check(c.dim() == 4, f"expected [B, C, H, W], got shape {tuple(c.shape)}")
    h, w = c.shape[-2:]
    check(h % 8 == 0 and w % 8 == 0, f"height and width must be multiples of 8, got {h}x{w}")
    d = _dct_matrix(c.dtype).to(c.device)
    blocks = _to_blocks(c)
    pixels = torch.einsum("ji,bcnjk,kl->bcnil", d, blocks, d)
    return _from_blocks(pixels, h, w)


def _zigzag_order() -> list[tuple[int, int]]:
    """Coefficient coordinates in JPEG zig-zag scan order (DC first)."""
    if not _ZIGZAG_CACHE:
        order = sorted(((i, j) for i in range(8) for j in range(8)),
                       key=lambda ij: (ij[0] + ij[1],
                                       ij[1] if (ij[0] + ij[1]) % 2 else ij[0]))
        _ZIGZAG_CACHE.extend(order)
    return _ZIGZAG_CACHE


def _rgb_to_planes(x: torch.Tensor) -> torch.Tensor:
    """[-1, 1] RGB -> level-shifted YCbCr planes (zero image -> zero planes)."""
    m = torch.from_numpy(_RGB_TO_YCC).to(x.dtype).to(x.device)
    px = to_pixel_scale(x)
    ycc = torch.einsum("ij,bjhw->bihw", m, px)
    shift = torch.zeros(3, dtype=x.dtype, device=x.device)
    shift[0] = 127.5  # luma mid-range; chroma is already zero-centered
    return ycc - shift.view(1, 3, 1, 1)


def _planes_to_rgb(planes: torch.Tensor) -> torch.Tensor:
    m = torch.from_numpy(_YCC_TO_RGB).to(planes.dtype).to(planes.device)
    shift = torch.zeros(3, dtype=planes.dtype, device=planes.device)
    shift[0] = 127.5
    px = torch.einsum("ij,bjhw->bihw", m, planes + shift.view(1, 3, 1, 1))
    return from_pixel_scale(px)


def quality_to_table_scale(qf: int) -> float:
    """libjpeg quality-factor scaling, in percent."""
    check(10 <= qf <= 100, f"quality factor must be in [10, 100], got {qf}")
    return 5000.0 / qf if qf < 50 else 200.0 - 2.0 * qf


def scaled_quant_table(base: np.ndarray, qf: int) -> np.ndarray:
    """Quantization table at the given quality factor (clipped to [1, 255])."""
    scale = quality_to_table_scale(qf)
    return np.clip(np.floor((base * scale + 50.0) / 100.0), 1.0, 255.0)


def _quant_tables(qf: int, dtype: torch.dtype, device: torch.device) -> torch.Tensor:
    luma = scaled_quant_table(QUANT_TABLE_LUMA, qf)
    chroma = scaled_quant_table(QUANT_TABLE_CHROMA, qf)
    stacked = np.stack([luma, chroma, chroma])  # Y, Cb, Cr
    return torch.from_numpy(stacked).to(dtype).to(device).view(1, 3, 1, 8, 8)


def soft_round(v: torch.Tensor) -> torch.Tensor:
    """Cubic soft staircase: round(v) + (v - round(v))**3.

    Fixed points at integers, smooth in between; the gradient is
    3*(v - round(v))**2.
    """
    r = torch.round(v)
    return r + (v - r) ** 3


def straight_through_round(v: torch.Tensor) -> torch.Tensor:
    """True rounding forward, identity gradient backward."""
    if _ST_ROUND_SURROGATE:
        return v
    return v + (torch.round(v) - v).detach()


@contextmanager
def straight_through_surrogate():
    """Replace straight-through rounding by its backward surrogate (identity).

    Finite-difference gradient checks probe the declared backward semantics
    of straight-through ops through this switch; forward behaviour of
    everything else is unchanged.
    """
    global _ST_ROUND_SURROGATE
    previous = _ST_ROUND_SURROGATE
    _ST_ROUND_SURROGATE = True
    try:
        yield
    finally:
        _ST_ROUND_SURROGATE = previous


def _blockwise(x: torch.Tensor):
    h, w = x.shape[-2:]
    planes = _rgb_to_planes(x)
    coeffs = _to_blocks(planes)
    d = _dct_matrix(x.dtype).to(x.device)
    coeffs = torch.einsum("ij,bcnjk,lk->bcnil", d, coeffs, d)
    return coeffs, d, h, w


def _reassemble(coeffs: torch.Tensor, d: torch.Tensor, h: int, w: int) -> torch.Tensor:
    pixels = torch.einsum("ji,bcnjk,kl->bcnil", d, coeffs, d)
    planes = _from_blocks(pixels, h, w)
    return _planes_to_rgb(planes).clamp(-1.0, 1.0)


def mask_retained_counts(qf: int) -> tuple[int, int]:
    """Zig-zag coefficients kept by the masking simulator (luma, chroma)."""
    check(10 <= qf <= 100, f"quality factor must be in [10, 100], got {qf}")
    luma = int(np.ceil(64.0 * qf / 100.0))
    chroma = int(np.ceil(64.0 * (qf / 100.0) ** 2))
    return max(luma, 1), max(chroma, 1)


def jpeg_mask(x: torch.Tensor, qf: int) -> torch.Tensor:
    """Low-frequency masking simulator: a linear, fully differentiable map.

    Keeps the first k coefficients in zig-zag order (k grows with qf and
    reaches all 64 at qf=100), zeroes the rest, inverts.
    """
    keep_luma, keep_chroma = mask_retained_counts(qf)
    coeffs, d, h, w = _blockwise(x)
    mask = torch.zeros(3, 8, 8, dtype=x.dtype, device=x.device)
    order = _zigzag_order()
    for idx in range(keep_luma):
        mask[0][order[idx]] = 1.0
    for idx in range(keep_chroma):
        mask[1][order[idx]] = 1.0
        mask[2][order[idx]] = 1.0
    coeffs = coeffs * mask.view(1, 3, 1, 8, 8)
    return _reassemble(coeffs, d, h, w)


def jpeg_soft(x: torch.Tensor, qf: int) -> torch.Tensor:
    """Soft-staircase quantization simulator (smooth surrogate of rounding)."""
    coeffs, d, h, w = _blockwise(x)
    q = _quant_tables(qf, x.dtype, x.device)
    coeffs = soft_round(coeffs / q) * q
    return _reassemble(coeffs, d, h, w)


def jpeg_round(x: torch.Tensor, qf: int) -> torch.Tensor:
    """Rounding simulator: exact integer quantization forward, identity grad."""
    coeffs, d, h, w = _blockwise(x)
    q = _quant_tables(qf, x.dtype, x.device)
    coeffs = straight_through_round(coeffs / q) * q
    return _reassemble(coeffs, d, h, w)


SIMULATORS = {
    "mask": jpeg_mask,
    "soft": jpeg_soft,
    "round": jpeg_round,
}


def jpeg_mixup(x: torch.Tensor, mix_weights) -> torch.Tensor:
    """Convex combination of simulator outputs over (simulator, qf) pairs.

    ``mix_weights`` is an iterable of (simulator_name, qf, weight) entries
    whose weights must be non-negative and sum to 1 (tolerance 1e-9).
    Zero-weight entries are skipped without evaluating their branch, so a
    one-hot weighting reproduces the single simulator bit-exactly.
    """
    entries = list(mix_weights)
    check(len(entries) > 0, "mix weights must not be empty")
    total = 0.0
    for name, qf, weight in entries:
        check(name in SIMULATORS, f"unknown JPEG simulator '{name}'")
        check(weight >= 0.0, f"mix weight must be non-negative, got {weight}")
        total += weight
    check(abs(total - 1.0) <= 1e-9, f"mix weights must sum to 1, got {total!r}")

    out = None
    for name, qf, weight in entries:
        if weight == 0.0:
            continue
        branch = SIMULATORS[name](x, int(qf))
        term = branch if weight == 1.0 else weight * branch
        out = term if out is None else out + term
    return out


def real_jpeg(x: torch.Tensor, qf: int) -> torch.Tensor:
    """True codec round trip (evaluation only, non-differentiable).

    Encodes 4:4:4 (no chroma subsampling) to match what the simulators
    model; quantization, DCT and entropy coding are the real thing.
    """
    check(1 <= qf <= 100, f"quality factor must be in [1, 100], got {qf}")
    frames = quantize_to_uint8(x)
    decoded = []
    for frame in frames:
        buffer = io.BytesIO()
        Image.fromarray(frame).save(buffer, format="JPEG", quality=int(qf), subsampling=0)
        buffer.seek(0)
        with Image.open(buffer) as img:
            decoded.append(np.asarray(img.convert("RGB")))
    return from_uint8(np.stack(decoded)).to(x.dtype)
