"""Attack layer configuration and its key-value (de)serialization."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..core import check
from ..kv import dump_kv, parse_kv
from .jpeg import SIMULATORS

DEFAULT_SIMULATORS = ("mask", "soft", "round")
DEFAULT_QF_CHOICES = (10, 30, 50, 70, 90)
NON_JPEG_ATTACKS = ("noise", "blur", "scale", "crop")

MixWeights = tuple[tuple[str, int, float], ...]


def uniform_mix_weights(simulators=DEFAULT_SIMULATORS,
                        qf_choices=DEFAULT_QF_CHOICES) -> MixWeights:
    """Equal weight on every (simulator, quality) pair."""
    pairs = [(sim, qf) for sim in simulators for qf in qf_choices]
    weight = 1.0 / len(pairs)
    return tuple((sim, qf, weight) for sim, qf in pairs)


@dataclass(frozen=True)
class AttackConfig:
    """Which attacks run and with what parameter ranges.

    Sigma values are full-scale units; quality factors are integers in
    [10, 100]. ``jpeg_mix_weights`` holds (simulator, qf, weight) entries
    whose weights sum to 1.
    """

    jpeg_simulators: tuple[str, ...] = DEFAULT_SIMULATORS
    jpeg_mix_weights: MixWeights = field(default_factory=uniform_mix_weights)
    qf_choices: tuple[int, ...] = DEFAULT_QF_CHOICES
    composition_qf: int = 90
    noise_sigma_range: tuple[float, float] = (0.0, 0.1)
    blur_kernel_sizes: tuple[int, ...] = (3, 5, 7)
    blur_sigma_range: tuple[float, float] = (0.5, 2.0)
    scale_factor_range: tuple[float, float] = (0.5, 2.0)
    crop_keep_ratio_range: tuple[float, float] = (0.5, 1.0)
    enabled_attacks: tuple[str, ...] = NON_JPEG_ATTACKS
    rng_seed: int = 0

    def validate(self) -> "AttackConfig":
        for sim in self.jpeg_simulators:
            check(sim in SIMULATORS, f"unknown JPEG simulator '{sim}'")
        total = 0.0
        for sim, qf, weight in self.jpeg_mix_weights:
            check(sim in SIMULATORS, f"unknown JPEG simulator '{sim}' in mix weights")
            check(10 <= int(qf) <= 100, f"mix quality factor out of [10, 100]: {qf}")
            check(weight >= 0.0, f"mix weight must be non-negative, got {weight}")
            total += weight
        check(abs(total - 1.0) <= 1e-9, f"mix weights must sum to 1, got {total!r}")
        for qf in self.qf_choices:
            check(10 <= qf <= 100, f"quality factor out of [10, 100]: {qf}")
        check(10 <= self.composition_qf <= 100,
              f"composition quality factor out of [10, 100]: {self.composition_qf}")
        lo, hi = self.scale_factor_range
        check(0.5 <= lo <= hi <= 2.0, f"scale factor range must sit in [0.5, 2.0], got {lo}..{hi}")
        lo, hi = self.crop_keep_ratio_range
        check(0.0 < lo <= hi <= 1.0, f"crop keep ratio range must sit in (0, 1], got {lo}..{hi}")
        lo, hi = self.noise_sigma_range
        check(0.0 <= lo <= hi, f"noise sigma range must be non-negative, got {lo}..{hi}")
        for size in self.blur_kernel_sizes:
            check(size % 2 == 1 and size >= 1, f"blur kernel sizes must be odd, got {size}")
        for name in self.enabled_attacks:
            check(name in NON_JPEG_ATTACKS,
                  f"unknown attack '{name}' (choose from {NON_JPEG_ATTACKS})")
        return self

    def composition_mix_weights(self) -> MixWeights:
        """Mix weights with every quality factor pinned to composition_qf.

        Mass per simulator is the sum of its per-quality weights.
        """
        per_sim: dict[str, float] = {}
        for sim, _qf, weight in self.jpeg_mix_weights:
            per_sim[sim] = per_sim.get(sim, 0.0) + weight
        return tuple((sim, self.composition_qf, weight)
                     for sim, weight in per_sim.items() if weight > 0.0)

    def with_single_simulator(self, simulator: str, qf: int) -> "AttackConfig":
        """One-hot mix on a single (simulator, qf) pair (legacy baseline)."""
        return replace(self, jpeg_mix_weights=((simulator, qf, 1.0),))

    # -- key-value document -------------------------------------------------

    def to_kv_text(self) -> str:
        pairs = {
            "jpeg_simulators": ",".join(self.jpeg_simulators),
            "jpeg_mix_weights": ";".join(
                f"{sim}:{qf}:{weight!r}" for sim, qf, weight in self.jpeg_mix_weights),
            "qf_choices": ",".join(str(qf) for qf in self.qf_choices),
            "composition_qf": str(self.composition_qf),
            "noise_sigma_range": _fmt_range(self.noise_sigma_range),
            "blur_kernel_sizes": ",".join(str(k) for k in self.blur_kernel_sizes),
            "blur_sigma_range": _fmt_range(self.blur_sigma_range),
            "scale_factor_range": _fmt_range(self.scale_factor_range),
            "crop_keep_ratio_range": _fmt_range(self.crop_keep_ratio_range),
            "enabled_attacks": ",".join(self.enabled_attacks),
            "rng_seed": str(self.rng_seed),
        }
        return dump_kv(pairs)

    @staticmethod
    def kv_keys() -> tuple[str, ...]:
        return ("jpeg_simulators", "jpeg_mix_weights", "qf_choices", "composition_qf",
                "noise_sigma_range", "blur_kernel_sizes", "blur_sigma_range",
                "scale_factor_range", "crop_keep_ratio_range", "enabled_attacks",
                "rng_seed")

    @staticmethod
    def from_kv(pairs: dict[str, str]) -> "AttackConfig":
        config = AttackConfig()
        if "jpeg_simulators" in pairs:
            config = replace(config, jpeg_simulators=_parse_names(pairs["jpeg_simulators"]))
        if "jpeg_mix_weights" in pairs:
            entries = []
            for chunk in pairs["jpeg_mix_weights"].split(";"):
                chunk = chunk.strip()
                if not chunk:
                    continue
                sim, qf, weight = chunk.split(":")
                entries.append((sim.strip(), int(qf), float(weight)))
            config = replace(config, jpeg_mix_weights=tuple(entries))
        elif "qf_choices" in pairs or "jpeg_simulators" in pairs:
            qfs = _parse_ints(pairs["qf_choices"]) if "qf_choices" in pairs else config.qf_choices
            config = replace(config, jpeg_mix_weights=uniform_mix_weights(
                config.jpeg_simulators, qfs))
        if "qf_choices" in pairs:
            config = replace(config, qf_choices=_parse_ints(pairs["qf_choices"]))
        if "composition_qf" in pairs:
            config = replace(config, composition_qf=int(pairs["composition_qf"]))
        if "noise_sigma_range" in pairs:
            config = replace(config, noise_sigma_range=_parse_range(pairs["noise_sigma_range"]))
        if "blur_kernel_sizes" in pairs:
            config = replace(config, blur_kernel_sizes=_parse_ints(pairs["blur_kernel_sizes"]))
        if "blur_sigma_range" in pairs:
            config = replace(config, blur_sigma_range=_parse_range(pairs["blur_sigma_range"]))
        if "scale_factor_range" in pairs:
            config = replace(config, scale_factor_range=_parse_range(pairs["scale_factor_range"]))
        if "crop_keep_ratio_range" in pairs:
            config = replace(config,
                             crop_keep_ratio_range=_parse_range(pairs["crop_keep_ratio_range"]))
        if "enabled_attacks" in pairs:
            config = replace(config, enabled_attacks=_parse_names(pairs["enabled_attacks"]))
        if "rng_seed" in pairs:
            config = replace(config, rng_seed=int(pairs["rng_seed"]))
        return config.validate()

    @staticmethod
    def from_kv_text(text: str) -> "AttackConfig":
        return AttackConfig.from_kv(parse_kv(text))


def _fmt_range(pair: tuple[float, float]) -> str:
    return f"{pair[0]!r},{pair[1]!r}"


def _parse_range(text: str) -> tuple[float, float]:
    lo, hi = (float(part) for part in text.split(","))
    return lo, hi


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _parse_names(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())
