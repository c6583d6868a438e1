"""Losses and the end-to-end adversarial training loop.

Per step: discriminators update first (one update each), then the generator
networks (embedder, decoupler, revealer) update jointly through the full
embed -> attack -> decouple -> reveal graph. The attack mode alternates
between the pure JPEG mix and JPEG-followed-by-one-other-attack so JPEG
robustness is exercised every step.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F

from .attacks.config import AttackConfig
from .attacks.pipeline import attack_pipeline
from .core import check, psnr
from .kv import dump_kv, parse_kv
from .networks import NetworkSpec, PipelineBundle, build_bundle, save_checkpoint


class NonFiniteLossError(RuntimeError):
    """A loss component went NaN/inf; carries the name of the first one."""


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total generator objective."""

    alpha: float = 0.05          # cover-side adversarial term
    beta: float = 0.05           # secret-side adversarial term
    gamma: float = 1.5           # amplified-residual reconstruction term
    residual_gain: float = 5.0   # target amplification of the residual

    def validate(self) -> "LossWeights":
        for name in ("alpha", "beta", "gamma", "residual_gain"):
            check(getattr(self, name) >= 0.0, f"{name} must be non-negative")
        return self


@dataclass(frozen=True)
class TrainConfig:
    """Everything the training loop needs, serializable as key = value text."""

    batch_size: int = 4
    learning_rate: float = 2e-4
    steps: int = 1000
    image_side: int = 256
    n_secrets: int = 1
    seed: int = 0
    depth: int = 4
    base_channels: int = 32
    disc_base_channels: int = 64
    residual_cap: float = 0.2
    checkpoint_interval: int = 500
    eval_interval: int = 100
    attacks_enabled: bool = True
    attack: AttackConfig = field(default_factory=AttackConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    # ablations
    no_progressive: bool = False
    no_discriminators: bool = False
    plain_unet: bool = False
    legacy_jpeg: bool = False

    def validate(self) -> "TrainConfig":
        check(self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}")
        check(self.learning_rate > 0.0, f"learning_rate must be positive, got {self.learning_rate}")
        check(self.steps >= 0, f"steps must be >= 0, got {self.steps}")
        check(1 <= self.n_secrets <= 4, f"n_secrets must be in [1, 4], got {self.n_secrets}")
        check(self.image_side % (2 ** self.depth) == 0,
              f"image side {self.image_side} must be divisible by 2^depth = {2 ** self.depth}")
        self.attack.validate()
        self.loss.validate()
        return self

    def effective_attack(self) -> AttackConfig:
        if self.legacy_jpeg:
            # static single-simulator baseline in place of the mixed family
            return self.attack.with_single_simulator("mask", 50)
        return self.attack

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(depth=self.depth, base_channels=self.base_channels)

    def build(self) -> PipelineBundle:
        return build_bundle(
            n=self.n_secrets, seed=self.seed, spec=self.network_spec(),
            residual_cap=self.residual_cap,
            disc_base_channels=self.disc_base_channels,
            with_discriminators=not self.no_discriminators,
            with_decoupler=not self.no_progressive,
            plain_embedder=self.plain_unet)

    # -- key-value document ---------------------------------------------------

    _SCALAR_KEYS = ("batch_size", "learning_rate", "steps", "image_side", "n_secrets",
                    "seed", "depth", "base_channels", "disc_base_channels",
                    "residual_cap", "checkpoint_interval", "eval_interval",
                    "attacks_enabled", "no_progressive", "no_discriminators",
                    "plain_unet", "legacy_jpeg")
    _LOSS_KEYS = ("alpha", "beta", "gamma", "residual_gain")

    def to_kv_text(self) -> str:
        pairs = {key: _fmt(getattr(self, key)) for key in self._SCALAR_KEYS}
        for key in self._LOSS_KEYS:
            pairs[f"loss.{key}"] = repr(getattr(self.loss, key))
        attack_pairs = parse_kv(self.attack.to_kv_text())
        for key, value in attack_pairs.items():
            pairs[f"attack.{key}"] = value
        return dump_kv(pairs)

    @classmethod
    def kv_keys(cls) -> tuple[str, ...]:
        keys = list(cls._SCALAR_KEYS)
        keys += [f"loss.{key}" for key in cls._LOSS_KEYS]
        keys += [f"attack.{key}" for key in AttackConfig.kv_keys()]
        return tuple(keys)

    @staticmethod
    def from_kv(pairs: dict[str, str]) -> "TrainConfig":
        known = set(TrainConfig.kv_keys())
        for key in pairs:
            check(key in known, f"unknown configuration key '{key}'")
        config = TrainConfig()
        updates: dict = {}
        for key in TrainConfig._SCALAR_KEYS:
            if key in pairs:
                updates[key] = _parse(pairs[key], type(getattr(config, key)))
        loss_updates = {key: float(pairs[f"loss.{key}"])
                        for key in TrainConfig._LOSS_KEYS if f"loss.{key}" in pairs}
        if loss_updates:
            updates["loss"] = replace(config.loss, **loss_updates)
        attack_pairs = {key.split(".", 1)[1]: value for key, value in pairs.items()
                        if key.startswith("attack.")}
        if attack_pairs:
            updates["attack"] = AttackConfig.from_kv(attack_pairs)
        return replace(config, **updates).validate()

    @staticmethod
    def from_kv_text(text: str) -> "TrainConfig":
        return TrainConfig.from_kv(parse_kv(text))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(text: str, kind: type):
    if kind is bool:
        check(text.lower() in ("true", "false", "1", "0"),
              f"expected a boolean, got {text!r}")
        return text.lower() in ("true", "1")
    return kind(text)


# -- losses -------------------------------------------------------------------


def reconstruction_loss(cover: torch.Tensor, marked: torch.Tensor,
                        secrets: list[torch.Tensor], revealed: list[torch.Tensor],
                        cover_estimate: torch.Tensor | None = None) -> torch.Tensor:
    """MSE(cover, marked) + mean-over-secrets MSE + MSE(cover, cover_estimate)."""
    check(len(secrets) == len(revealed),
          f"secret/revealed count mismatch: {len(secrets)} vs {len(revealed)}")
    loss = F.mse_loss(marked, cover)
    secret_terms = [F.mse_loss(rev, sec) for rev, sec in zip(revealed, secrets)]
    loss = loss + torch.stack(secret_terms).mean()
    if cover_estimate is not None:
        loss = loss + F.mse_loss(cover_estimate, cover)
    return loss


def residual_loss(residual: torch.Tensor, residual_estimate: torch.Tensor,
                  gain: float = 5.0) -> torch.Tensor:
    """Mean squared error between the amplified residual and its estimate."""
    return F.mse_loss(residual_estimate, gain * residual)


def lsgan_generator_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Least-squares adversarial loss pushing fake scores toward 1."""
    return ((fake_scores - 1.0) ** 2).mean()


def lsgan_discriminator_loss(real_scores: torch.Tensor,
                             fake_scores: torch.Tensor) -> torch.Tensor:
    """Half the sum of squared deviations from the 1 / 0 targets."""
    return 0.5 * (((real_scores - 1.0) ** 2).mean() + (fake_scores ** 2).mean())


def total_generator_loss(parts, weights: LossWeights) -> torch.Tensor:
    """parts = (reconstruction, adv_cover, adv_secret, residual)."""
    rec, adv_cover, adv_secret, residual = parts
    return rec + weights.alpha * adv_cover + weights.beta * adv_secret \
        + weights.gamma * residual


def _require_finite(named_parts: list[tuple[str, torch.Tensor]]) -> None:
    for name, value in named_parts:
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(f"loss component '{name}' is non-finite")


def _grad_norm(parameters) -> float:
    total = 0.0
    for param in parameters:
        if param.grad is not None:
            total += float(param.grad.detach().pow(2).sum())
    return math.sqrt(total)


# -- the step and the loop ------------------------------------------------------


def attack_mode_for_step(step_index: int) -> str:
    return "jpeg-only" if step_index % 2 == 0 else "jpeg-then-other"


def train_step(bundle: PipelineBundle, batch, config: TrainConfig,
               rng: torch.Generator, optim_gen: torch.optim.Optimizer,
               optim_disc: torch.optim.Optimizer | None,
               step_index: int) -> dict:
    """One full optimization step; returns every loss component and grad norms.

    ``batch`` is (covers, [secrets_0, ..., secrets_{n-1}]), each of shape
    [B, 3, side, side].
    """
    cover, secrets = batch
    check(len(secrets) == bundle.n,
          f"batch carries {len(secrets)} secrets, bundle expects {bundle.n}")
    started = time.perf_counter()
    weights = config.loss

    residual, marked = bundle.embed(cover, secrets)
    if config.attacks_enabled:
        mode = attack_mode_for_step(step_index)
        attacked = attack_pipeline(marked, cover, config.effective_attack(), rng, mode)
    else:
        mode = "identity"
        attacked = marked

    if bundle.decoupler is not None:
        residual_estimate, cover_estimate = bundle.decouple(attacked)
        revealed = bundle.reveal(residual_estimate)
    else:
        residual_estimate, cover_estimate = None, None
        revealed = bundle.reveal(attacked)

    metrics: dict = {"step": step_index, "mode": mode}

    if bundle.disc_cover is not None and optim_disc is not None:
        optim_disc.zero_grad(set_to_none=True)
        disc_cover_loss = lsgan_discriminator_loss(
            bundle.disc_cover(cover), bundle.disc_cover(marked.detach()))
        real_secrets = torch.cat(secrets, dim=0)
        fake_secrets = torch.cat([img.detach() for img in revealed], dim=0)
        disc_secret_loss = lsgan_discriminator_loss(
            bundle.disc_secret(real_secrets), bundle.disc_secret(fake_secrets))
        _require_finite([("disc_cover", disc_cover_loss),
                         ("disc_secret", disc_secret_loss)])
        (disc_cover_loss + disc_secret_loss).backward()
        metrics["grad_norm_disc"] = _grad_norm(bundle.discriminator_parameters())
        optim_disc.step()
        metrics["loss_disc_cover"] = disc_cover_loss.item()
        metrics["loss_disc_secret"] = disc_secret_loss.item()

    optim_gen.zero_grad(set_to_none=True)
    rec = reconstruction_loss(cover, marked, secrets, revealed, cover_estimate)
    if residual_estimate is not None:
        # the amplified residual is a supervision target for the decoupler;
        # letting gradient flow through it would push the embedder toward a
        # zero residual whenever the decoupler lags behind
        res = residual_loss(residual.detach(), residual_estimate, weights.residual_gain)
    else:
        res = torch.zeros((), dtype=cover.dtype)
    if bundle.disc_cover is not None:
        adv_cover = lsgan_generator_loss(bundle.disc_cover(marked))
        adv_secret = lsgan_generator_loss(bundle.disc_secret(torch.cat(revealed, dim=0)))
    else:
        adv_cover = torch.zeros((), dtype=cover.dtype)
        adv_secret = torch.zeros((), dtype=cover.dtype)
    _require_finite([("reconstruction", rec), ("adv_cover", adv_cover),
                     ("adv_secret", adv_secret), ("residual", res)])
    total = total_generator_loss((rec, adv_cover, adv_secret, res), weights)
    _require_finite([("total_generator", total)])
    total.backward()
    metrics["grad_norm_gen"] = _grad_norm(bundle.generator_parameters())
    optim_gen.step()

    metrics.update({
        "loss_total": total.item(),
        "loss_rec": rec.item(),
        "loss_residual": res.item(),
        "loss_adv_cover": adv_cover.item(),
        "loss_adv_secret": adv_secret.item(),
        "seconds": time.perf_counter() - started,
    })
    return metrics


def make_optimizers(bundle: PipelineBundle,
                    config: TrainConfig) -> tuple[torch.optim.Optimizer,
                                                  torch.optim.Optimizer | None]:
    optim_gen = torch.optim.Adam(bundle.generator_parameters(), lr=config.learning_rate)
    optim_disc = None
    if bundle.disc_cover is not None:
        optim_disc = torch.optim.Adam(bundle.discriminator_parameters(),
                                      lr=config.learning_rate)
    return optim_gen, optim_disc


def _rng_state_payload(data_rng: torch.Generator, attack_rng: torch.Generator) -> dict:
    return {"data": data_rng.get_state(), "attack": attack_rng.get_state()}


def train(bundle: PipelineBundle, dataset, config: TrainConfig, out_dir: str,
          resume_payload: dict | None = None) -> list[str]:
    """Run the training loop; returns the list of checkpoint paths written.

    ``dataset`` must provide ``sample_batch(rng, batch_size, n)`` and, if
    validation is enabled, ``val_batch(count, n)``. Metrics stream to
    ``<out_dir>/metrics.jsonl``, one JSON record per step. Checkpoints are
    written atomically every ``checkpoint_interval`` steps and at the end;
    a non-finite loss aborts with a diagnostic record and checkpoint.
    """
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")

    optim_gen, optim_disc = make_optimizers(bundle, config)
    data_rng = torch.Generator().manual_seed(config.seed)
    attack_rng = torch.Generator().manual_seed(config.seed + 1)
    start_step = 0

    if resume_payload is not None:
        optimizer_state = resume_payload["optimizer_state"]
        optim_gen.load_state_dict(optimizer_state["generator"])
        if optim_disc is not None and optimizer_state.get("discriminator") is not None:
            optim_disc.load_state_dict(optimizer_state["discriminator"])
        rng_state = resume_payload["rng_state"]
        data_rng.set_state(rng_state["data"])
        attack_rng.set_state(rng_state["attack"])
        start_step = resume_payload["step"]

    def write_checkpoint(step: int, tag: str | None = None) -> str:
        name = tag or f"step-{step:06d}.pt"
        path = os.path.join(out_dir, name)
        optimizer_state = {
            "generator": optim_gen.state_dict(),
            "discriminator": optim_disc.state_dict() if optim_disc is not None else None,
        }
        save_checkpoint(path, bundle, step, optimizer_state,
                        _rng_state_payload(data_rng, attack_rng),
                        extra={"train_config": config.to_kv_text()})
        return path

    written: list[str] = []
    with open(metrics_path, "a", encoding="utf-8") as metrics_file:
        def emit(record: dict) -> None:
            metrics_file.write(json.dumps(record) + "\n")
            metrics_file.flush()

        step = start_step
        try:
            for step in range(start_step, config.steps):
                batch = dataset.sample_batch(data_rng, config.batch_size, bundle.n)
                record = train_step(bundle, batch, config, attack_rng,
                                    optim_gen, optim_disc, step)
                if config.eval_interval and (step + 1) % config.eval_interval == 0:
                    record["val_psnr_marked"] = _validation_psnr(bundle, dataset)
                emit(record)
                if config.checkpoint_interval and (step + 1) % config.checkpoint_interval == 0 \
                        and (step + 1) < config.steps:
                    written.append(write_checkpoint(step + 1))
            written.append(write_checkpoint(config.steps, tag="final.pt"))
        except NonFiniteLossError as error:
            emit({"kind": "abort", "step": step, "reason": str(error)})
            written.append(write_checkpoint(step, tag="aborted.pt"))
            raise
    return written


@torch.no_grad()
def _validation_psnr(bundle: PipelineBundle, dataset, count: int = 4) -> float:
    bundle.eval()
    try:
        available = getattr(dataset, "val_size", lambda: count * (bundle.n + 1))()
        usable = max(1, min(count, available // (bundle.n + 1)))
        cover, secrets = dataset.val_batch(usable, bundle.n)
        _, marked = bundle.embed(cover, secrets)
        return psnr(marked, cover)
    finally:
        bundle.train()
