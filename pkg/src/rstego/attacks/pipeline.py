"""Attack composition and the finite-difference gradient checker.

The pipeline has two modes:

* ``jpeg-only``       - the configured mix of JPEG simulators, nothing else.
* ``jpeg-then-other`` - the JPEG mix with every quality factor pinned to the
  composition value (default 90), followed by exactly one uniformly chosen
  non-JPEG attack. JPEG is therefore present in every invocation.
"""

from __future__ import annotations

from typing import Callable

import torch

from ..core import check
from . import classic
from .config import AttackConfig
from .jpeg import jpeg_mask, jpeg_mixup, jpeg_round, jpeg_soft, straight_through_surrogate

MODES = ("jpeg-only", "jpeg-then-other")


def _uniform(rng: torch.Generator, lo: float, hi: float) -> float:
    if lo == hi:
        return lo
    return lo + (hi - lo) * torch.rand(1, generator=rng).item()


def _choice(rng: torch.Generator, options):
    idx = int(torch.randint(0, len(options), (1,), generator=rng).item())
    return options[idx]


def attack_pipeline(marked: torch.Tensor, cover: torch.Tensor, config: AttackConfig,
                    rng: torch.Generator, mode: str,
                    trace: list | None = None) -> torch.Tensor:
    """Apply the configured attack composition to a marked image.

    ``rng`` owns all randomness, so identical (inputs, config, seed) replay
    bit-identically. When ``trace`` is a list, one record per applied
    operation is appended in application order.
    """
    check(mode in MODES, f"mode must be one of {MODES}, got '{mode}'")
    config.validate()

    if mode == "jpeg-only":
        weights = config.jpeg_mix_weights
    else:
        weights = config.composition_mix_weights()
    out = jpeg_mixup(marked, weights)
    if trace is not None:
        trace.append({"op": "jpeg", "weights": tuple(weights)})

    if mode == "jpeg-only":
        return out

    check(len(config.enabled_attacks) > 0,
          "jpeg-then-other mode requires at least one enabled non-JPEG attack")
    name = _choice(rng, config.enabled_attacks)
    if name == "noise":
        sigma = _uniform(rng, *config.noise_sigma_range)
        out = classic.gaussian_noise(out, sigma, generator=rng)
        record = {"op": "noise", "sigma": sigma}
    elif name == "blur":
        kernel = _choice(rng, config.blur_kernel_sizes)
        sigma = _uniform(rng, *config.blur_sigma_range)
        out = classic.gaussian_blur(out, kernel, sigma)
        record = {"op": "blur", "kernel": kernel, "sigma": sigma}
    elif name == "scale":
        factor = _uniform(rng, *config.scale_factor_range)
        out = classic.random_scale(out, factor)
        record = {"op": "scale", "factor": factor}
    else:
        keep = _uniform(rng, *config.crop_keep_ratio_range)
        out = classic.random_crop(out, cover, keep, generator=rng)
        record = {"op": "crop", "keep_ratio": keep}
    if trace is not None:
        trace.append(record)
    return out


def smooth_test_image(side: int, batch: int = 1, rng: torch.Generator | None = None,
                      amplitude: float = 0.7, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Smooth random field in (-amplitude, amplitude), kind to quantizers."""
    coarse = torch.rand((batch, 3, max(side // 8, 2), max(side // 8, 2)),
                        generator=rng, dtype=dtype) * 2.0 - 1.0
    field = torch.nn.functional.interpolate(coarse, size=(side, side),
                                            mode="bilinear", align_corners=False)
    return field * amplitude


def _gradcheck_target(op: str, params: dict, rng: torch.Generator,
                      reference: torch.Tensor) -> Callable[[torch.Tensor], torch.Tensor]:
    """Deterministic single-tensor function for the named attack."""
    if op == "noise":
        sigma = params.get("sigma", 0.1)
        noise = torch.randn(reference.shape, generator=rng,
                            dtype=reference.dtype) * (sigma * classic.FULL_SCALE)
        return lambda x: (x + noise).clamp(-1.0, 1.0)
    if op == "blur":
        kernel = params.get("kernel", 5)
        sigma = params.get("sigma", 1.0)
        return lambda x: classic.gaussian_blur(x, kernel, sigma)
    if op == "scale":
        factor = params.get("factor", 0.5)
        return lambda x: classic.random_scale(x, factor)
    if op == "crop":
        keep = params.get("keep_ratio", 0.7)
        height, width = reference.shape[-2:]
        rect = classic.crop_rectangle(height, width, keep, rng)
        background = reference.clone()
        def cropout(x, rect=rect):
            top, left, keep_h, keep_w = rect
            mask = torch.zeros(1, 1, height, width, dtype=torch.bool)
            mask[..., top:top + keep_h, left:left + keep_w] = True
            return torch.where(mask, x, background)
        return cropout
    if op == "jpeg_mask":
        qf = params.get("qf", 50)
        return lambda x: jpeg_mask(x, qf)
    if op == "jpeg_soft":
        qf = params.get("qf", 70)
        return lambda x: jpeg_soft(x, qf)
    if op == "jpeg_round":
        qf = params.get("qf", 50)
        return lambda x: jpeg_round(x, qf)
    if op == "jpeg_mixup":
        weights = params.get("weights")
        if weights is None:
            weights = AttackConfig().jpeg_mix_weights
        return lambda x: jpeg_mixup(x, weights)
    raise ValueError(f"unknown gradient-check op '{op}'")


GRADCHECK_OPS = ("noise", "blur", "scale", "crop", "jpeg_mask", "jpeg_soft",
                 "jpeg_round", "jpeg_mixup")


def gradient_check(op: str, x: torch.Tensor | None = None,
                   params: dict | None = None, num_coords: int = 100,
                   step: float = 1e-3, seed: int = 0) -> float:
    """Compare the analytic input-gradient of an attack to central finite
    differences at randomly sampled coordinates; returns the max relative
    error.

    Runs in float64. Straight-through rounding is evaluated in its declared
    backward semantics (identity surrogate). Coordinates whose half-step and
    full-step difference quotients disagree sit on a rounding or clamping
    discontinuity where finite differences are meaningless; those are
    resampled.
    """
    rng = torch.Generator().manual_seed(seed)
    if x is None:
        x = smooth_test_image(side=24, batch=1, rng=rng)
    x = x.detach().double()
    fn = _gradcheck_target(op, params or {}, rng, x)
    probe = torch.randn(x.shape, generator=rng, dtype=torch.float64)

    with straight_through_surrogate():
        leaf = x.clone().requires_grad_(True)
        scalar = (fn(leaf) * probe).sum()
        scalar.backward()
        analytic = leaf.grad.reshape(-1)

        def value_at(flat_index: int, delta: float) -> float:
            shifted = x.reshape(-1).clone()
            shifted[flat_index] += delta
            return (fn(shifted.reshape(x.shape)) * probe).sum().item()

        total = x.numel()
        max_rel_error = 0.0
        checked = 0
        attempts = 0
        while checked < num_coords:
            attempts += 1
            check(attempts <= 20 * num_coords,
                  f"gradient check for '{op}' could not find enough smooth coordinates")
            idx = int(torch.randint(0, total, (1,), generator=rng).item())
            fd_full = (value_at(idx, step) - value_at(idx, -step)) / (2.0 * step)
            fd_half = (value_at(idx, step / 2) - value_at(idx, -step / 2)) / step
            if abs(fd_full - fd_half) > 1e-3 * max(1.0, abs(fd_full), abs(fd_half)):
                continue  # straddles a discontinuity
            rel = abs(fd_full - analytic[idx].item()) / max(
                abs(fd_full), abs(analytic[idx].item()), 1e-6)
            max_rel_error = max(max_rel_error, rel)
            checked += 1
    return max_rel_error
