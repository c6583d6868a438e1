"""Evaluation battery: per-attack PSNR/SSIM on real (non-simulated) attacks.

The battery always quantizes the marked image to 8-bit before attacking it,
exactly as a transmitted file would be, and every attack here is the real
operation (actual codec, actual resampling) rather than a training
simulator. The provenance field records that.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .core import check, from_uint8, psnr, quantize_to_uint8, ssim
from .networks import PipelineBundle

ATTACK_PROVENANCE = "real"


@dataclass(frozen=True)
class EvalAttack:
    """One battery row: a named real attack with its parameters."""

    name: str
    params: dict = field(default_factory=dict)

    def label(self) -> str:
        if not self.params:
            return self.name
        inner = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.name}({inner})"

    @staticmethod
    def parse(text: str) -> "EvalAttack":
        """Parse 'name' or 'name:value' or 'name:key=value,key=value'."""
        if ":" not in text:
            return EvalAttack(text.strip())
        name, payload = text.split(":", 1)
        name = name.strip()
        params: dict = {}
        for chunk in payload.split(","):
            chunk = chunk.strip()
            if not chunk:
                continue
            if "=" in chunk:
                key, value = chunk.split("=", 1)
            else:
                key, value = _DEFAULT_PARAM_KEY[name], chunk
            params[key.strip()] = _coerce(value.strip())
        return EvalAttack(name, params)


_DEFAULT_PARAM_KEY = {"real-jpeg": "qf", "scale": "factor", "blur": "sigma",
                      "noise": "sigma", "crop": "keep_ratio"}


def _coerce(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


DEFAULT_EVAL_ATTACKS = (
    EvalAttack("none"),
    EvalAttack("real-jpeg", {"qf": 70}),
    EvalAttack("scale", {"factor": 0.5}),
    EvalAttack("blur", {"kernel": 5, "sigma": 1.0}),
    EvalAttack("noise", {"sigma": 0.05}),
    EvalAttack("crop", {"keep_ratio": 0.7}),
)


def apply_real_attack(marked: torch.Tensor, cover: torch.Tensor, attack: EvalAttack,
                      rng: np.random.Generator) -> torch.Tensor:
    """Run one real attack on the 8-bit transmitted form of the marked image."""
    frames = quantize_to_uint8(marked)
    name = attack.name
    if name == "none":
        out = frames
    elif name == "real-jpeg":
        qf = int(attack.params.get("qf", 70))
        out = np.stack([_codec_roundtrip(frame, qf) for frame in frames])
    elif name == "scale":
        factor = float(attack.params.get("factor", 0.5))
        out = np.stack([_resample_roundtrip(frame, factor) for frame in frames])
    elif name == "blur":
        kernel = int(attack.params.get("kernel", 5))
        sigma = float(attack.params.get("sigma", 1.0))
        out = np.stack([_gaussian_blur_uint8(frame, kernel, sigma) for frame in frames])
    elif name == "noise":
        sigma = float(attack.params.get("sigma", 0.05)) * 255.0
        noisy = frames.astype(np.float64) + rng.normal(0.0, sigma, size=frames.shape)
        out = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
    elif name == "crop":
        keep = float(attack.params.get("keep_ratio", 0.7))
        cover_frames = quantize_to_uint8(cover)
        out = np.stack([_cropout_uint8(frame, base, keep, rng)
                        for frame, base in zip(frames, cover_frames)])
    else:
        raise ValueError(f"unknown evaluation attack '{name}'")
    return from_uint8(out)


def _codec_roundtrip(frame: np.ndarray, qf: int) -> np.ndarray:
    buffer = io.BytesIO()
    # 4:4:4, matching the convention of attacks.real_jpeg
    Image.fromarray(frame).save(buffer, format="JPEG", quality=qf, subsampling=0)
    buffer.seek(0)
    with Image.open(buffer) as img:
        return np.asarray(img.convert("RGB"))


def _resample_roundtrip(frame: np.ndarray, factor: float) -> np.ndarray:
    h, w = frame.shape[:2]
    small = (max(1, round(w * factor)), max(1, round(h * factor)))
    img = Image.fromarray(frame).resize(small, Image.BILINEAR).resize((w, h), Image.BILINEAR)
    return np.asarray(img)


def _gaussian_blur_uint8(frame: np.ndarray, kernel: int, sigma: float) -> np.ndarray:
    half = kernel // 2
    coords = np.arange(kernel) - half
    taps = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    taps /= taps.sum()
    padded = np.pad(frame.astype(np.float64), ((half, half), (half, half), (0, 0)),
                    mode="reflect")
    rows = np.zeros_like(padded)
    for offset, tap in enumerate(taps):
        rows += tap * np.roll(padded, half - offset, axis=0)
    cols = np.zeros_like(rows)
    for offset, tap in enumerate(taps):
        cols += tap * np.roll(rows, half - offset, axis=1)
    cropped = cols[half:-half or None, half:-half or None]
    return np.clip(np.rint(cropped), 0, 255).astype(np.uint8)


def _cropout_uint8(frame: np.ndarray, base: np.ndarray, keep: float,
                   rng: np.random.Generator) -> np.ndarray:
    h, w = frame.shape[:2]
    keep_h = round(h * keep ** 0.5)
    keep_w = round(w * keep ** 0.5)
    out = base.copy()
    if keep_h == 0 or keep_w == 0:
        return out
    top = int(rng.integers(0, h - keep_h + 1))
    left = int(rng.integers(0, w - keep_w + 1))
    out[top:top + keep_h, left:left + keep_w] = frame[top:top + keep_h, left:left + keep_w]
    return out


@dataclass
class BatteryRow:
    attack: str
    params: dict
    psnr_db: float
    ssim: float
    count: int


@dataclass
class BatteryResult:
    """Per-attack recovery quality plus the embedding-quality row."""

    n: int
    seed: int
    count: int
    provenance: str
    embedding: BatteryRow
    rows: list[BatteryRow]

    def to_json(self) -> str:
        def row(r: BatteryRow) -> dict:
            return {"attack": r.attack, "params": r.params, "psnr_db": r.psnr_db,
                    "ssim": r.ssim, "count": r.count}
        return json.dumps({
            "n": self.n, "seed": self.seed, "count": self.count,
            "provenance": self.provenance,
            "embedding": row(self.embedding),
            "rows": [row(r) for r in self.rows],
        }, indent=2)

    def to_text_table(self) -> str:
        header = f"{'attack':<24} {'psnr_db':>9} {'ssim':>7} {'count':>6}"
        lines = [header, "-" * len(header)]
        emb = self.embedding
        lines.append(f"{'embedding (marked)':<24} {emb.psnr_db:>9.2f} {emb.ssim:>7.3f} "
                     f"{emb.count:>6d}")
        for r in self.rows:
            label = r.attack if not r.params else \
                f"{r.attack}({','.join(f'{k}={v}' for k, v in sorted(r.params.items()))})"
            lines.append(f"{label:<24} {r.psnr_db:>9.2f} {r.ssim:>7.3f} {r.count:>6d}")
        return "\n".join(lines) + "\n"


@torch.no_grad()
def run_battery(bundle: PipelineBundle, dataset, attacks, count: int,
                seed: int = 0) -> BatteryResult:
    """Embed, really attack, decouple, reveal, measure - ``count`` groups.

    Every attack row is computed on the same deterministic image groups so
    rows are directly comparable. The attacked image is re-derived from the
    same quantized marked image each time.
    """
    check(count >= 1, f"count must be >= 1, got {count}")
    needed = count * (bundle.n + 1)
    check(len(dataset) >= needed,
          f"dataset holds {len(dataset)} images, battery needs {needed}")
    attacks = [EvalAttack.parse(a) if isinstance(a, str) else a for a in attacks]

    bundle.eval()
    group_rng = torch.Generator().manual_seed(seed)
    cover, secrets = dataset.sample_batch(group_rng, count, bundle.n)
    _, marked = bundle.embed(cover, secrets)

    embedding_row = BatteryRow("embedding", {}, psnr(marked, cover),
                               ssim(marked, cover), count)
    rows = []
    for attack in attacks:
        attack_rng = np.random.default_rng(seed + 1)
        attacked = apply_real_attack(marked, cover, attack, attack_rng).to(cover.dtype)
        if bundle.decoupler is not None:
            residual_estimate, _ = bundle.decouple(attacked)
        else:
            residual_estimate = attacked
        revealed = bundle.reveal(residual_estimate)
        psnrs = [psnr(rev, sec) for rev, sec in zip(revealed, secrets)]
        ssims = [ssim(rev, sec) for rev, sec in zip(revealed, secrets)]
        rows.append(BatteryRow(attack.name, dict(attack.params),
                               float(np.mean(psnrs)), float(np.mean(ssims)), count))
    bundle.train()
    return BatteryResult(n=bundle.n, seed=seed, count=count,
                         provenance=ATTACK_PROVENANCE,
                         embedding=embedding_row, rows=rows)


def multi_secret_battery(bundles: dict[int, PipelineBundle], dataset, attacks,
                         count: int, seed: int = 0) -> dict[int, BatteryResult]:
    """Run the same battery protocol once per secret count."""
    results = {}
    for n in sorted(bundles):
        check(bundles[n].n == n, f"bundle registered under n={n} hides {bundles[n].n}")
        results[n] = run_battery(bundles[n], dataset, attacks, count, seed)
    return results


AMPLIFICATION = 5.0


@torch.no_grad()
def residual_visual_report(bundle: PipelineBundle, cover: torch.Tensor,
                           secrets: list[torch.Tensor],
                           attack: EvalAttack = EvalAttack("real-jpeg", {"qf": 70}),
                           seed: int = 0) -> tuple[torch.Tensor, dict]:
    """Side-by-side grid of residual, attacked difference and extracted
    residual (all amplified 5x and offset for visibility), plus per-sample
    MSE statistics comparing the extracted residual to the true one.
    """
    check(bundle.decoupler is not None, "visual report needs the decoupling stage")
    bundle.eval()
    residual, marked = bundle.embed(cover, secrets)
    rng = np.random.default_rng(seed)
    attacked = apply_real_attack(marked, cover, attack, rng).to(cover.dtype)
    residual_estimate, _ = bundle.decouple(attacked)
    extracted = residual_estimate / AMPLIFICATION
    damaged = attacked - cover

    panels = [residual, damaged, extracted]
    amplified = [(AMPLIFICATION * panel).clamp(-1.0, 1.0) for panel in panels]
    grid_rows = [torch.cat([amp[i] for amp in amplified], dim=-1)
                 for i in range(cover.shape[0])]
    grid = torch.cat(grid_rows, dim=-2).unsqueeze(0)

    per_sample_extracted = ((extracted - residual) ** 2).flatten(1).mean(dim=1)
    per_sample_damaged = ((damaged - residual) ** 2).flatten(1).mean(dim=1)
    stats = {
        "mse_extracted_vs_residual": per_sample_extracted.tolist(),
        "mse_attacked_vs_residual": per_sample_damaged.tolist(),
        "amplification": AMPLIFICATION,
    }
    bundle.train()
    return grid, stats
