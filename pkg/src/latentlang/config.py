"""Run configuration: profiles, JSON files and ``section.key=value`` overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .autoencoder import AutoencoderConfig, DecodeConfig
from .data import MODES
from .denoiser import DenoiserConfig
from .diffusion_math import NoiseSchedule
from .sampler import SamplerConfig
from .trainer import TrainConfig

PROFILES = ("desk", "paper", "toy")
SECTIONS = ("data", "ae", "ae_train", "denoiser", "diff_train", "schedule", "sampler", "decode")


@dataclass
class DataConfig:
    corpus: Optional[str] = None
    max_len: int = 64
    max_vocab: int = 4096
    valid_frac: float = 0.05
    test_frac: float = 0.05


@dataclass
class ScheduleConfig:
    kind: str = "cosine"
    shift_scale: float = 1.0

    def build(self) -> NoiseSchedule:
        return NoiseSchedule(self.kind, self.shift_scale)


_SECTION_TYPES = {
    "data": DataConfig,
    "ae": AutoencoderConfig,
    "ae_train": TrainConfig,
    "denoiser": DenoiserConfig,
    "diff_train": TrainConfig,
    "schedule": ScheduleConfig,
    "sampler": SamplerConfig,
    "decode": DecodeConfig,
}

# ae_train defaults differ from the diffusion ones
_AE_TRAIN = dict(lr=1e-4, warmup_steps=1000, decay="linear", weight_decay=1e-2, batch_size=256,
                 steps=50_000)

_PROFILES: dict[str, dict[str, dict]] = {
    "desk": {
        "ae": dict(d_model=256, heads=4, encoder_layers=2, decoder_layers=2, compress_layers=3,
                   reconstruct_layers=3, latent_len=32, latent_dim=64),
        "ae_train": dict(_AE_TRAIN, lr=5e-4, batch_size=64, steps=20_000),
        "denoiser": dict(width=256, layers=6, heads=4, dense_connections=2),
        "diff_train": dict(batch_size=64, steps=50_000),
    },
    "paper": {
        "ae": dict(d_model=768, heads=12, encoder_layers=6, decoder_layers=6, compress_layers=3,
                   reconstruct_layers=3, latent_len=32, latent_dim=64),
        "ae_train": dict(_AE_TRAIN),
        "denoiser": dict(width=768, layers=12, heads=12, dense_connections=3, dropout=0.1),
        "diff_train": dict(lr=2e-4, warmup_steps=1000, decay="cosine", weight_decay=1e-6, batch_size=128,
                           steps=250_000, ema_decay=0.9999),
        "sampler": dict(steps=250),
    },
    # small enough to train a grammar end to end on one CPU core in minutes
    "toy": {
        "ae": dict(d_model=64, heads=4, encoder_layers=2, decoder_layers=2, compress_layers=2,
                   reconstruct_layers=2, latent_len=16, latent_dim=32),
        "ae_train": dict(_AE_TRAIN, lr=1e-3, warmup_steps=200, batch_size=64, steps=2000),
        "denoiser": dict(width=128, layers=4, heads=4, dense_connections=2, dropout=0.0),
        "diff_train": dict(lr=5e-4, warmup_steps=200, batch_size=64, steps=6000, ema_decay=0.999),
    },
}

# values the paper profile must keep
PAPER_PINS = {
    ("ae", "latent_len"): 32,
    ("ae", "latent_dim"): 64,
    ("denoiser", "layers"): 12,
    ("denoiser", "width"): 768,
    ("diff_train", "ema_decay"): 0.9999,
    ("sampler", "steps"): 250,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "unconditional"
    profile: str = "desk"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    ae: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    ae_train: TrainConfig = field(default_factory=lambda: TrainConfig(**_AE_TRAIN))
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    diff_train: TrainConfig = field(default_factory=TrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def to_dict(self) -> dict:
        d = {"mode": self.mode, "profile": self.profile, "seed": self.seed}
        for name in SECTIONS:
            section = asdict(getattr(self, name))
            if "betas" in section:
                section["betas"] = list(section["betas"])
            d[name] = section
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; expected one of {PROFILES}")
        if self.profile == "paper":
            for (section, key), want in PAPER_PINS.items():
                got = getattr(getattr(self, section), key)
                if got != want:
                    raise ConfigError(f"paper profile pins {section}.{key}={want}, got {got}")
        if self.denoiser.latent_len != self.ae.latent_len or self.denoiser.latent_dim != self.ae.latent_dim:
            raise ConfigError("denoiser latent shape must match the autoencoder's")
        if self.data.max_len > self.ae.max_len:
            raise ConfigError("data.max_len exceeds ae.max_len")
        for name in SECTIONS:
            obj = getattr(self, name)
            if hasattr(obj, "__post_init__"):
                try:
                    obj.__post_init__()
                except ValueError as exc:
                    raise ConfigError(f"{name}: {exc}") from exc
        try:
            self.schedule.build()
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from exc
        return self


def _coerce(value: str) -> Any:
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def parse_override(text: str) -> tuple[str, Optional[str], Any]:
    """``section.key=value`` or top-level ``key=value``; value parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    path, value = text.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) == 1:
        return parts[0], None, _coerce(value)
    if len(parts) == 2:
        return parts[0], parts[1], _coerce(value)
    raise ConfigError(f"override path {path!r} is too deep")


def build_config(profile: Optional[str] = None, mode: Optional[str] = None, file: Optional[dict] = None,
                 overrides: tuple[str, ...] = (), seed: Optional[int] = None) -> RunConfig:
    """Layer defaults <- profile <- mode defaults <- config file <- overrides, then validate.

    Explicit ``profile`` / ``mode`` arguments win over the file's.
    """
    file = dict(file or {})
    profile = profile or file.pop("profile", None) or "desk"
    mode = mode or file.pop("mode", None) or "unconditional"
    file.pop("profile", None)
    file.pop("mode", None)
    layers: dict[str, dict] = {s: {} for s in SECTIONS}
    top: dict[str, Any] = {"mode": mode, "profile": profile}
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    for section, values in _PROFILES[profile].items():
        layers[section].update(values)
    if mode == "seq2seq":
        layers["sampler"]["guidance_w"] = 2.0
        layers["diff_train"]["loss"] = "l1"
    for key, value in file.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            layers[key].update(value)
        else:
            top[key] = value
    for text in overrides:
        a, b, value = parse_override(text)
        if b is None:
            top[a] = value
        elif a in SECTIONS:
            layers[a][b] = value
        else:
            raise ConfigError(f"unknown config section {a!r}")
    if seed is not None:
        top["seed"] = seed
    unknown = set(top) - {"mode", "profile", "seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    sections = {}
    for name in SECTIONS:
        cls = _SECTION_TYPES[name]
        known = {f.name for f in fields(cls)}
        bad = set(layers[name]) - known
        if bad:
            raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
        try:
            sections[name] = cls(**layers[name])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    cfg = RunConfig(mode=top["mode"], profile=top["profile"], seed=int(top.get("seed", 0)), **sections)
    # latent shape and seeds follow the autoencoder and the run unless set explicitly
    if "latent_len" not in layers["denoiser"]:
        cfg.denoiser = replace(cfg.denoiser, latent_len=cfg.ae.latent_len)
    if "latent_dim" not in layers["denoiser"]:
        cfg.denoiser = replace(cfg.denoiser, latent_dim=cfg.ae.latent_dim)
    for name in ("ae_train", "diff_train", "sampler"):
        if "seed" not in layers[name]:
            setattr(cfg, name, replace(getattr(cfg, name), seed=cfg.seed))
    return cfg.validate()


def load_config_file(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def from_dict(d: dict) -> RunConfig:
    """Rebuild an effective config (e.g. from a checkpoint header) without re-layering."""
    sections = {}
    for name in SECTIONS:
        sections[name] = _SECTION_TYPES[name](**d.get(name, {}))
    return RunConfig(mode=d["mode"], profile=d["profile"], seed=d.get("seed", 0), **sections).validate()
