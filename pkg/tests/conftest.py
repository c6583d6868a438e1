import numpy as np
import pytest
import torch
import torch.nn.functional as F


def synthesize_image(side: int, rng: np.random.Generator) -> np.ndarray:
    """Natural-ish synthetic image in [-1, 1], HWC float: smooth background,
    a few soft shapes, mild directional texture."""
    coarse = rng.uniform(-1, 1, size=(4, 4, 3))
    base = torch.from_numpy(coarse.transpose(2, 0, 1)).unsqueeze(0)
    img = F.interpolate(base, size=(side, side), mode="bilinear",
                        align_corners=False)[0].numpy().transpose(1, 2, 0)
    yy, xx = np.mgrid[0:side, 0:side] / side
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.15, 0.85, 2)
        ry, rx = rng.uniform(0.08, 0.3, 2)
        angle = rng.uniform(0, np.pi)
        color = rng.uniform(-0.9, 0.9, 3)
        dy, dx = (yy - cy), (xx - cx)
        u = dy * np.cos(angle) + dx * np.sin(angle)
        v = -dy * np.sin(angle) + dx * np.cos(angle)
        dist = (u / ry) ** 2 + (v / rx) ** 2
        mask = np.clip(1.5 - dist, 0, 1)[..., None]
        img = img * (1 - 0.85 * mask) + color * 0.85 * mask
    freq = rng.uniform(4, 12)
    angle = rng.uniform(0, np.pi)
    img += 0.08 * np.sin(2 * np.pi * freq * (yy * np.cos(angle)
                                             + xx * np.sin(angle)))[..., None]
    return np.clip(img, -0.95, 0.95)


def make_corpus(count: int, side: int, seed: int) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    imgs = np.stack([synthesize_image(side, rng) for _ in range(count)])
    return torch.from_numpy(imgs.transpose(0, 3, 1, 2)).float()


def natural_images(side: int = 64, count: int = 10) -> torch.Tensor:
    """Real photographs (bundled with scikit-image), resized, in [-1, 1]."""
    import skimage.data as data
    from PIL import Image

    names = ["astronaut", "chelsea", "coffee", "cat", "immunohistochemistry",
             "camera", "coins", "moon", "clock", "hubble_deep_field"]
    frames = []
    for name in names[:count]:
        arr = getattr(data, name)()
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        img = Image.fromarray(arr[..., :3]).resize((side, side), Image.BILINEAR)
        frames.append(np.asarray(img, dtype=np.float32))
    stack = np.stack(frames).transpose(0, 3, 1, 2)
    return torch.from_numpy(stack) / 127.5 - 1.0


@pytest.fixture(scope="session")
def natural_corpus() -> torch.Tensor:
    return natural_images(side=64, count=10)


@pytest.fixture(scope="session")
def small_corpus() -> torch.Tensor:
    return make_corpus(24, 32, seed=3)


def write_png_corpus(directory, images: torch.Tensor) -> list:
    """Dump a [N, 3, H, W] tensor as PNG files; returns the paths."""
    from rstego.core import save_image

    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for index in range(images.shape[0]):
        path = directory / f"img_{index:04d}.png"
        save_image(images[index:index + 1], path)
        paths.append(path)
    return paths
