"""Run configuration: typed defaults, TOML config files with flat
sections, dotted `--set` overrides, and ablation switches."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .corruption import NOISE_PRESETS, CorruptionPlan


class ConfigError(ValueError):
    pass


ABLATIONS = (
    "wo_quality_estimation",
    "wo_rank_guided_training",
    "wo_quality_enhancement",
    "wo_modality_decoupling",
    "wo_modality_specific",
    "wo_sample_specific",
    "wo_mqmoe",
    "wo_l_same",
)


@dataclass
class UMQConfig:
    # data
    manifest: str = ""
    # model
    shared_dim: int = 100
    num_experts: int = 10
    selected_experts: int = 3
    quality_threshold: float = 0.5
    variance_margin: float = 0.1
    rank_margin: float = 0.05
    similarity_slack: float = 0.2
    high_score_target: float = 0.95
    low_loss_threshold: float = 0.01
    ema_coeff: float = 0.9
    reconstruction_squared: bool = False
    detach_alpha_in_enhancer: bool = False
    same_loss_normalize: bool = True
    same_loss_pairs: str = "unordered"
    rank_pairs_cap: int = 4096
    # losses
    decouple_loss_weight: float = 1e-5
    estimator_loss_weight: float = 0.001
    enhancer_loss_weight: float = 0.001
    moe_loss_weight: float = 0.001
    # optimizer
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    # training
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    ablation: str = ""
    # augment (the always-on AddNoise used inside the training losses)
    replace_prob: float = 0.1
    augment_rate_low: float = 0.1
    augment_rate_high: float = 0.7
    # corruption (dataset-level degradation applied during train/eval)
    missing_rate: float = 0.0
    noise_rate: float = 0.0
    noise_preset: str = "gaussian"
    corruption_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.ablation and self.ablation not in ABLATIONS:
            raise ConfigError(
                f"unknown ablation '{self.ablation}'; valid: {', '.join(ABLATIONS)}")
        if not (self.num_experts >= 2 and 1 <= self.selected_experts <= self.num_experts):
            raise ConfigError(
                f"need num_experts >= 2 and 1 <= selected_experts <= num_experts, "
                f"got {self.num_experts}, {self.selected_experts}")
        if not 0.0 < self.quality_threshold < 1.0:
            raise ConfigError(f"quality_threshold must be in (0, 1), got {self.quality_threshold}")
        if self.noise_preset not in NOISE_PRESETS:
            raise ConfigError(f"noise_preset must be one of {NOISE_PRESETS}")
        if self.same_loss_pairs not in ("unordered", "ordered"):
            raise ConfigError("same_loss_pairs must be 'unordered' or 'ordered'")
        if self.shared_dim < 2:
            raise ConfigError(f"shared_dim must be >= 2, got {self.shared_dim}")

    def corruption_plan(self) -> CorruptionPlan:
        return CorruptionPlan(missing_rate=self.missing_rate, noise_rate=self.noise_rate,
                              noise_preset=self.noise_preset, seed=self.corruption_seed)


SECTIONS: dict[str, tuple[str, ...]] = {
    "data": ("manifest",),
    "model": ("shared_dim", "num_experts", "selected_experts", "quality_threshold",
              "variance_margin", "rank_margin", "similarity_slack", "high_score_target",
              "low_loss_threshold", "ema_coeff", "reconstruction_squared",
              "detach_alpha_in_enhancer", "same_loss_normalize", "same_loss_pairs",
              "rank_pairs_cap"),
    "losses": ("decouple_loss_weight", "estimator_loss_weight", "enhancer_loss_weight",
               "moe_loss_weight"),
    "optimizer": ("lr", "beta1", "beta2", "eps", "weight_decay"),
    "training": ("batch_size", "epochs", "seed", "ablation"),
    "augment": ("replace_prob", "augment_rate_low", "augment_rate_high"),
    "corruption": ("missing_rate", "noise_rate", "noise_preset", "corruption_seed"),
}

_FIELD_SECTION = {key: section for section, keys in SECTIONS.items() for key in keys}
_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(UMQConfig)}


def _coerce(key: str, value) -> object:
    kind = _FIELD_TYPES[key]
    if kind in ("bool", bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "1"):
            return True
        if str(value).lower() in ("false", "0"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if kind in ("int", int):
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if kind in ("float", float):
        return float(value)
    return str(value)


def _parse_override_value(raw: str):
    text = raw.strip()
    if text.startswith(('"', "'")) and text.endswith(text[0]) and len(text) >= 2:
        return text[1:-1]
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def resolve_key(key: str) -> str:
    """Resolve 'section.key' or a unique bare key to a config field."""
    if "." in key:
        section, _, field_name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section '{section}'; valid: {sorted(SECTIONS)}")
        if field_name not in SECTIONS[section]:
            raise ConfigError(
                f"unknown key '{field_name}' in [{section}]; valid: {SECTIONS[section]}")
        return field_name
    if key in _FIELD_SECTION:
        return key
    raise ConfigError(f"unknown config key '{key}'")


def load_config(path: str | None = None, overrides: list[str] | None = None) -> UMQConfig:
    cfg, _ = load_config_tracked(path, overrides)
    return cfg


def load_config_tracked(path: str | None = None, overrides: list[str] | None = None
                        ) -> tuple[UMQConfig, set[str]]:
    """Config plus the set of explicitly assigned field names (so callers
    can tell a defaulted seed from a requested one)."""
    values: dict[str, object] = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                doc = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"config file '{path}' does not parse: {exc}") from exc
        for section, content in doc.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section '{section}'; valid: {sorted(SECTIONS)}")
            if not isinstance(content, dict):
                raise ConfigError(f"top-level key '{section}' must be a section")
            for key, value in content.items():
                if key not in SECTIONS[section]:
                    raise ConfigError(
                        f"unknown key '{key}' in [{section}]; valid: {SECTIONS[section]}")
                values[key] = _coerce(key, value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, _, raw = item.partition("=")
        field_name = resolve_key(key.strip())
        values[field_name] = _coerce(field_name, _parse_override_value(raw))
    return UMQConfig(**values), set(values)


def dump_config(cfg: UMQConfig) -> str:
    """Flat-section TOML text that parses back to an identical config."""
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(cfg, key)
            if isinstance(value, bool):
                rendered = "true" if value else "false"
            elif isinstance(value, str):
                rendered = f'"{value}"'
            else:
                rendered = repr(value)
            lines.append(f"{key} = {rendered}")
        lines.append("")
    return "\n".join(lines)


def ablate(cfg: UMQConfig, switch: str) -> UMQConfig:
    """A config variant with one component structurally disabled."""
    if switch not in ABLATIONS:
        raise ConfigError(f"unknown ablation '{switch}'; valid: {', '.join(ABLATIONS)}")
    return dataclasses.replace(cfg, ablation=switch)
