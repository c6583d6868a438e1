"""Dataset ingestion, manifests and in-memory corpora."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
from PIL import Image, UnidentifiedImageError

from .core import check, load_image

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class DatasetManifest:
    """Root directory plus relative file paths tagged train/val/test."""

    root: str
    side: int
    entries: list[tuple[str, str]]  # (relative path, split)

    def paths(self, split: str) -> list[Path]:
        check(split in SPLITS, f"unknown split '{split}'")
        return [Path(self.root) / rel for rel, tag in self.entries if tag == split]

    def validate(self) -> "DatasetManifest":
        seen: dict[str, str] = {}
        for rel, tag in self.entries:
            check(tag in SPLITS, f"unknown split '{tag}' for {rel}")
            check(rel not in seen, f"{rel} listed in both '{seen.get(rel)}' and '{tag}'")
            seen[rel] = tag
            path = Path(self.root) / rel
            check(path.exists(), f"missing file {path}")
        return self

    def save(self, path: str | Path) -> None:
        payload = {"root": self.root, "side": self.side,
                   "entries": [list(entry) for entry in self.entries]}
        Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")

    @staticmethod
    def load(path: str | Path) -> "DatasetManifest":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return DatasetManifest(root=payload["root"], side=int(payload["side"]),
                               entries=[tuple(entry) for entry in payload["entries"]])


def split_counts(total: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """Largest-remainder split of ``total`` items by the given fractions."""
    check(abs(sum(fractions) - 1.0) <= 1e-9,
          f"split fractions must sum to 1, got {sum(fractions)!r}")
    raw = [total * frac for frac in fractions]
    counts = [int(value) for value in raw]
    remainders = sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in range(total - sum(counts)):
        counts[remainders[i % 3]] += 1
    return tuple(counts)


def ingest(src_dir: str | Path, side: int,
           fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
           seed: int = 0) -> DatasetManifest:
    """Scan a directory for decodable images and split them deterministically."""
    src = Path(src_dir)
    check(src.is_dir(), f"not a directory: {src}")
    candidates = sorted(p for p in src.rglob("*")
                        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    valid: list[str] = []
    for path in candidates:
        try:
            with Image.open(path) as img:
                img.verify()
        except (UnidentifiedImageError, OSError):
            continue
        valid.append(str(path.relative_to(src)))
    check(len(valid) > 0, f"no images found under {src}")

    order = torch.randperm(len(valid), generator=torch.Generator().manual_seed(seed)).tolist()
    shuffled = [valid[i] for i in order]
    n_train, n_val, _ = split_counts(len(shuffled), fractions)
    entries = [(rel, "train") for rel in shuffled[:n_train]]
    entries += [(rel, "val") for rel in shuffled[n_train:n_train + n_val]]
    entries += [(rel, "test") for rel in shuffled[n_train + n_val:]]
    return DatasetManifest(root=str(src), side=side, entries=entries).validate()


class ArrayDataset:
    """All images of one split held in memory as a single tensor."""

    def __init__(self, images: torch.Tensor, val_images: torch.Tensor | None = None):
        check(images.dim() == 4 and images.shape[1] == 3,
              f"expected [N, 3, H, W], got {tuple(images.shape)}")
        self.images = images
        self.val_images = val_images if val_images is not None else images

    def __len__(self) -> int:
        return self.images.shape[0]

    def val_size(self) -> int:
        return self.val_images.shape[0]

    @staticmethod
    def from_manifest(manifest: DatasetManifest, split: str = "train",
                      val_split: str = "val") -> "ArrayDataset":
        train = torch.cat([load_image(p, manifest.side) for p in manifest.paths(split)])
        val_paths = manifest.paths(val_split)
        val = torch.cat([load_image(p, manifest.side) for p in val_paths]) if val_paths else None
        return ArrayDataset(train, val)

    def sample_batch(self, rng: torch.Generator, batch_size: int,
                     n: int) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Draw covers plus n secret stacks; images within a group are distinct."""
        needed = batch_size * (n + 1)
        check(len(self) >= needed,
              f"dataset holds {len(self)} images, a batch needs {needed}")
        order = torch.randperm(len(self), generator=rng)[:needed]
        groups = order.reshape(batch_size, n + 1)
        cover = self.images[groups[:, 0]]
        secrets = [self.images[groups[:, 1 + i]] for i in range(n)]
        return cover, secrets

    def val_batch(self, count: int, n: int) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Deterministic validation groups from the front of the val split."""
        pool = self.val_images
        needed = count * (n + 1)
        check(pool.shape[0] >= needed,
              f"val split holds {pool.shape[0]} images, need {needed}")
        groups = torch.arange(needed).reshape(count, n + 1)
        cover = pool[groups[:, 0]]
        secrets = [pool[groups[:, 1 + i]] for i in range(n)]
        return cover, secrets
