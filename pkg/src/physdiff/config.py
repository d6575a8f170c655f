"""Run configuration: defaults, INI round-trip, validation, hashing.

The on-disk format is a flat key = value file with sections, one section
per config group.  Unknown sections or keys are rejected so typos cannot
silently fall back to defaults.  `config_hash` fingerprints the canonical
dump; checkpoints embed it so a model never loads into a mismatched setup.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields as dc_fields

from .data import GenConfig
from .errors import ConfigError

ABLATION_VARIANTS = ("none", "no-piga", "no-future", "no-both")


@dataclass
class DataConfig:
    m_hist: int = 4
    n_fut: int = 4
    train_frac: float = 0.8
    val_frac: float = 0.1
    seed: int = 1234          # dataset generation seed


@dataclass
class ModelConfig:
    d_model: int = 48
    d_embed: int = 16
    gru_hidden: int = 32
    n_heads: int = 4
    k_enc: int = 2
    k_dec: int = 2
    ffn_mult: int = 2
    patch: int = 4

    @property
    def d_sub(self) -> int:
        return self.d_model // 3


@dataclass
class DiffusionConfig:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class TrainConfig:
    epochs: int = 22
    batch_size: int = 64
    lr_max: float = 3e-3
    lr_min: float = 1e-5
    grad_clip: float = 1.0
    seed: int = 77            # init + batch order + noise draws
    routing_enabled: bool = True
    piga_enabled: bool = True
    future_env_enabled: bool = True
    hist_env_enabled: bool = True
    val_every: int = 50
    log_every: int = 10


@dataclass
class EvalConfig:
    members: int = 8          # ensemble size used for standard forecasts
    seed: int = 9001          # root seed for ensemble noise streams


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    generator: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        m = self.model
        if m.d_model % 3 != 0:
            raise ConfigError(f"d_model={m.d_model} must be divisible by 3 "
                              "(task streams)")
        if m.d_model % m.n_heads != 0:
            raise ConfigError(f"d_model={m.d_model} not divisible by "
                              f"n_heads={m.n_heads}")
        if m.d_model % 2 != 0:
            raise ConfigError(f"d_model={m.d_model} must be even for the "
                              "sinusoidal timestep embedding")
        if self.generator.grid % m.patch != 0:
            raise ConfigError(f"grid={self.generator.grid} not divisible by "
                              f"patch={m.patch}")
        if self.data.m_hist < 1 or self.data.n_fut < 1:
            raise ConfigError("m_hist and n_fut must be >= 1")
        if self.diffusion.T < 1:
            raise ConfigError("diffusion T must be >= 1")
        for name in ("epochs", "batch_size", "val_every", "log_every"):
            if getattr(self.train, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if not (self.train.lr_max > 0 and self.train.lr_min >= 0):
            raise ConfigError("learning rates must be positive")
        if self.eval.members < 1:
            raise ConfigError("eval.members must be >= 1")
        self.generator.validate()
        return self

    def apply_ablation(self, variant: str) -> "RunConfig":
        """Set the flag triple for one of the named ablation variants."""
        if variant not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown ablation '{variant}', "
                              f"expected one of {ABLATION_VARIANTS}")
        t = self.train
        t.piga_enabled = variant not in ("no-piga", "no-both")
        t.future_env_enabled = variant not in ("no-future", "no-both")
        t.hist_env_enabled = variant != "no-both"
        return self

    @property
    def ablation_tag(self) -> str:
        t = self.train
        if t.piga_enabled and t.future_env_enabled and t.hist_env_enabled:
            return "none"
        if not t.piga_enabled and not t.future_env_enabled and not t.hist_env_enabled:
            return "no-both"
        if not t.piga_enabled:
            return "no-piga"
        return "no-future"


_SECTIONS = {
    "data": DataConfig,
    "generator": GenConfig,
    "model": ModelConfig,
    "diffusion": DiffusionConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _cast(raw: str, typ):
    if typ in (bool, "bool"):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    return float(raw)


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    for section, _ in _SECTIONS.items():
        obj = getattr(cfg, section)
        parser[section] = {f.name: repr(getattr(obj, f.name)).lower()
                           if isinstance(getattr(obj, f.name), bool)
                           else repr(getattr(obj, f.name))
                           for f in dc_fields(obj)}
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    cfg = RunConfig()
    unknown_sections = set(parser.sections()) - set(_SECTIONS)
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
    for section in parser.sections():
        obj = getattr(cfg, section)
        types = {f.name: f.type for f in dc_fields(obj)}
        for key, raw in parser[section].items():
            if key not in types:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            setattr(obj, key, _cast(raw, types[key]))
    return cfg.validate()


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply `section.key=value` strings from the command line."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, "
                              f"got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section '{section}'")
        obj = getattr(cfg, section)
        types = {f.name: f.type for f in dc_fields(obj)}
        if key not in types:
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
        setattr(obj, key, _cast(raw.strip(), types[key]))
    return cfg.validate()


def config_hash(cfg: RunConfig) -> bytes:
    """32-byte fingerprint of the fully-resolved config."""
    return hashlib.sha256(dump_config(cfg).encode()).digest()
