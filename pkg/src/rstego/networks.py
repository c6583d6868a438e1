"""Multi-branch U-Nets and PatchGAN discriminators.

One U-Net family serves three roles, differing only in branch counts:

* embedder   - n+1 encoder branches (cover + each secret), one decoder head
  emitting the additive residual (tanh scaled by a strength cap).
* decoupler  - one encoder, two decoder heads: an amplified residual
  estimate (5 * tanh, unclamped within (-5, 5)) and a cover estimate.
* revealer   - one encoder, n decoder heads, one recovered secret each.

Encoder branches never share weights. Each decoder level concatenates the
skip features of every encoder branch with the upsampled state of the
previous level.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass, replace

import torch
import torch.nn as nn

from .core import check

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description for one multi-branch U-Net.

    Generators default to norm-free blocks: per-instance normalization
    erases each image's global mean and contrast on every path (skips
    included), which caps reconstruction quality - the pipeline must
    reproduce absolute colors, not just structure.
    """

    depth: int = 4
    base_channels: int = 32
    enc_branches: int = 1
    dec_branches: int = 1
    norm: str = "none"          # "instance" | "none"
    activation: str = "lrelu"   # "lrelu" | "relu"

    def validate(self) -> "NetworkSpec":
        check(self.depth >= 1, f"depth must be >= 1, got {self.depth}")
        check(self.base_channels >= 1, f"base_channels must be >= 1, got {self.base_channels}")
        check(self.enc_branches >= 1, f"enc_branches must be >= 1, got {self.enc_branches}")
        check(self.dec_branches >= 1, f"dec_branches must be >= 1, got {self.dec_branches}")
        check(self.norm in ("instance", "none"), f"unknown norm '{self.norm}'")
        check(self.activation in ("lrelu", "relu"), f"unknown activation '{self.activation}'")
        return self


def _norm_layer(kind: str, channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels, affine=True) if kind == "instance" else nn.Identity()


def _act_layer(kind: str) -> nn.Module:
    return nn.LeakyReLU(0.2, inplace=True) if kind == "lrelu" else nn.ReLU(inplace=True)


class _ConvBlock(nn.Module):
    """Two 3x3 convolutions with normalization and activation."""

    def __init__(self, in_ch: int, out_ch: int, norm: str, act: str):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            _norm_layer(norm, out_ch),
            _act_layer(act),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            _norm_layer(norm, out_ch),
            _act_layer(act),
        )

    def forward(self, x):
        return self.body(x)


class _EncoderBranch(nn.Module):
    """One downsampling path; returns per-level skip features plus the
    deepest feature map feeding the bottleneck."""

    def __init__(self, spec: NetworkSpec, in_channels: int):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = in_channels
        for level in range(spec.depth):
            out = spec.base_channels * (2 ** level)
            self.blocks.append(_ConvBlock(ch, out, spec.norm, spec.activation))
            self.downs.append(nn.Conv2d(out, out, 4, stride=2, padding=1))
            ch = out

    def forward(self, x):
        skips = []
        for block, down in zip(self.blocks, self.downs):
            x = block(x)
            skips.append(x)
            x = down(x)
        return skips, x


class _DecoderBranch(nn.Module):
    """One upsampling path fed by the fused bottleneck; every level consumes
    the skip features of all encoder branches."""

    def __init__(self, spec: NetworkSpec, out_channels: int, head_scale: float):
        super().__init__()
        self.head_scale = head_scale
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        bottom = spec.base_channels * (2 ** (spec.depth - 1))
        ch = bottom
        for level in reversed(range(spec.depth)):
            level_ch = spec.base_channels * (2 ** level)
            self.ups.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, level_ch, 3, padding=1),
            ))
            skip_ch = level_ch * spec.enc_branches
            self.blocks.append(_ConvBlock(level_ch + skip_ch, level_ch,
                                          spec.norm, spec.activation))
            ch = level_ch
        self.head = nn.Conv2d(ch, out_channels, 1)
        # start in the linear region of the tanh head: a hard-saturated head
        # kills its own gradient and freezes the whole branch
        nn.init.normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def forward(self, z, skips_per_branch):
        depth = len(self.blocks)
        for step, (up, block) in enumerate(zip(self.ups, self.blocks)):
            level = depth - 1 - step
            z = up(z)
            feats = [branch_skips[level] for branch_skips in skips_per_branch]
            z = block(torch.cat([z] + feats, dim=1))
        return self.head_scale * torch.tanh(self.head(z))


class MultiBranchUNet(nn.Module):
    """U-Net with independent encoder branches and independent decoder heads.

    forward() takes one image per encoder branch and returns one image per
    decoder branch; every output is ``head_scale * tanh(.)``-bounded.
    """

    def __init__(self, spec: NetworkSpec, in_channels_per_branch: int = 3,
                 out_channels: int = 3, head_scales: tuple[float, ...] | None = None):
        super().__init__()
        self.spec = spec.validate()
        if head_scales is None:
            head_scales = (1.0,) * spec.dec_branches
        check(len(head_scales) == spec.dec_branches,
              f"need one head scale per decoder branch, got {len(head_scales)}")
        self.encoders = nn.ModuleList(
            _EncoderBranch(spec, in_channels_per_branch) for _ in range(spec.enc_branches))
        bottom = spec.base_channels * (2 ** (spec.depth - 1))
        self.fuse = _ConvBlock(bottom * spec.enc_branches, bottom, spec.norm, spec.activation)
        self.decoders = nn.ModuleList(
            _DecoderBranch(spec, out_channels, scale) for scale in head_scales)

    def forward(self, inputs: list[torch.Tensor]) -> list[torch.Tensor]:
        check(len(inputs) == len(self.encoders),
              f"expected {len(self.encoders)} input images, got {len(inputs)}")
        skips_per_branch = []
        bottoms = []
        for encoder, image in zip(self.encoders, inputs):
            skips, bottom = encoder(image)
            skips_per_branch.append(skips)
            bottoms.append(bottom)
        z = self.fuse(torch.cat(bottoms, dim=1))
        return [decoder(z, skips_per_branch) for decoder in self.decoders]


class PatchDiscriminator(nn.Module):
    """PatchGAN: a spatial grid of raw realness scores (no sigmoid).

    The first layer is never normalized; the rest use instance norm unless
    ``norm`` is disabled.
    """

    def __init__(self, base_channels: int = 64, n_strided: int = 3, norm: bool = True):
        super().__init__()
        def norm_layer(ch):
            return nn.InstanceNorm2d(ch, affine=True) if norm else nn.Identity()
        layers = [nn.Conv2d(3, base_channels, 4, stride=2, padding=1),
                  nn.LeakyReLU(0.2, inplace=True)]
        ch = base_channels
        for i in range(1, n_strided):
            out = base_channels * min(2 ** i, 8)
            layers += [nn.Conv2d(ch, out, 4, stride=2, padding=1, bias=False),
                       norm_layer(out),
                       nn.LeakyReLU(0.2, inplace=True)]
            ch = out
        out = base_channels * min(2 ** n_strided, 8)
        layers += [nn.Conv2d(ch, out, 4, stride=1, padding=1, bias=False),
                   norm_layer(out),
                   nn.LeakyReLU(0.2, inplace=True),
                   nn.Conv2d(out, 1, 4, stride=1, padding=1)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class PipelineBundle(nn.Module):
    """The full set of trainable networks for hiding ``n`` secret images."""

    def __init__(self, n: int, spec: NetworkSpec = NetworkSpec(),
                 residual_cap: float = 0.2, disc_base_channels: int = 64,
                 with_discriminators: bool = True, with_decoupler: bool = True,
                 plain_embedder: bool = False):
        super().__init__()
        check(1 <= n <= 4, f"secret count must be in [1, 4], got {n}")
        check(residual_cap > 0.0, f"residual cap must be positive, got {residual_cap}")
        self.n = n
        self.residual_cap = residual_cap
        self.plain_embedder = plain_embedder

        if plain_embedder:
            embed_spec = replace(spec, enc_branches=1, dec_branches=1)
            self.embedder = MultiBranchUNet(embed_spec, in_channels_per_branch=3 * (n + 1),
                                            head_scales=(residual_cap,))
        else:
            embed_spec = replace(spec, enc_branches=n + 1, dec_branches=1)
            self.embedder = MultiBranchUNet(embed_spec, head_scales=(residual_cap,))

        if with_decoupler:
            decouple_spec = replace(spec, enc_branches=1, dec_branches=2)
            self.decoupler = MultiBranchUNet(decouple_spec, head_scales=(5.0, 1.0))
        else:
            self.decoupler = None

        reveal_spec = replace(spec, enc_branches=1, dec_branches=n)
        self.revealer = MultiBranchUNet(reveal_spec, head_scales=(1.0,) * n)

        if with_discriminators:
            self.disc_cover = PatchDiscriminator(disc_base_channels)
            self.disc_secret = PatchDiscriminator(disc_base_channels)
        else:
            self.disc_cover = None
            self.disc_secret = None

    # -- pipeline stages -----------------------------------------------------

    def embed(self, cover: torch.Tensor,
              secrets: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        """Produce (residual, marked); marked = clamp(cover + residual)."""
        check(len(secrets) == self.n,
              f"bundle hides {self.n} secrets, got {len(secrets)}")
        for secret in secrets:
            check(secret.shape == cover.shape,
                  f"secret shape {tuple(secret.shape)} != cover shape {tuple(cover.shape)}")
        if self.plain_embedder:
            stacked = torch.cat([cover] + list(secrets), dim=1)
            residual = self.embedder([stacked])[0]
        else:
            residual = self.embedder([cover] + list(secrets))[0]
        marked = (cover + residual).clamp(-1.0, 1.0)
        return residual, marked

    def decouple(self, attacked: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Extract (amplified residual estimate, cover estimate)."""
        check(self.decoupler is not None, "this bundle was built without a decoupler")
        residual_estimate, cover_estimate = self.decoupler([attacked])
        return residual_estimate, cover_estimate

    def reveal(self, residual_estimate: torch.Tensor) -> list[torch.Tensor]:
        """Decode the ``n`` recovered secrets from a residual estimate."""
        return self.revealer([residual_estimate])

    def generator_parameters(self):
        modules = [self.embedder, self.revealer]
        if self.decoupler is not None:
            modules.append(self.decoupler)
        for module in modules:
            yield from module.parameters()

    def discriminator_parameters(self):
        for module in (self.disc_cover, self.disc_secret):
            if module is not None:
                yield from module.parameters()

    def build_options(self) -> dict:
        return {
            "n": self.n,
            "spec": asdict(self.embedder.spec if not self.plain_embedder else
                           replace(self.embedder.spec, enc_branches=1)),
            "residual_cap": self.residual_cap,
            "disc_base_channels": (self.disc_cover.body[0].out_channels
                                   if self.disc_cover is not None else 0),
            "with_discriminators": self.disc_cover is not None,
            "with_decoupler": self.decoupler is not None,
            "plain_embedder": self.plain_embedder,
        }


def discriminate(disc: PatchDiscriminator, image: torch.Tensor) -> torch.Tensor:
    """Raw patch score map for an image."""
    return disc(image)


def build_bundle(n: int, seed: int, spec: NetworkSpec = NetworkSpec(),
                 residual_cap: float = 0.2, disc_base_channels: int = 64,
                 with_discriminators: bool = True, with_decoupler: bool = True,
                 plain_embedder: bool = False) -> PipelineBundle:
    """Deterministic construction: same (arguments, seed) -> same parameters."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        base_spec = replace(spec, enc_branches=1, dec_branches=1)
        return PipelineBundle(n, base_spec, residual_cap, disc_base_channels,
                              with_discriminators, with_decoupler, plain_embedder)


def _atomic_torch_save(payload: dict, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            torch.save(payload, handle)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def save_checkpoint(path: str, bundle: PipelineBundle, step: int,
                    optimizer_state: dict | None = None,
                    rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write a self-describing checkpoint (atomic: temp file then rename)."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "build_options": bundle.build_options(),
        "model_state": bundle.state_dict(),
        "optimizer_state": optimizer_state,
        "rng_state": rng_state,
        "step": step,
        "extra": extra or {},
    }
    _atomic_torch_save(payload, path)


def load_checkpoint(path: str) -> tuple[PipelineBundle, dict]:
    """Rebuild a bundle from a checkpoint; returns (bundle, payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    check(version == CHECKPOINT_FORMAT_VERSION,
          f"unsupported checkpoint format version {version}")
    options = payload["build_options"]
    spec = NetworkSpec(**options["spec"])
    bundle = PipelineBundle(
        n=options["n"], spec=spec, residual_cap=options["residual_cap"],
        disc_base_channels=options["disc_base_channels"] or 64,
        with_discriminators=options["with_discriminators"],
        with_decoupler=options["with_decoupler"],
        plain_embedder=options["plain_embedder"])
    bundle.load_state_dict(payload["model_state"])
    return bundle, payload
