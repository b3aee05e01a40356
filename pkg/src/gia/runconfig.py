"""Flat ``key=value`` run configuration with dotted section keys.

    # comment
    task=occurrence
    pe_mode=gia
    train.epochs=200
    synth.n_nodes=2000

Sections ``synth.``, ``train.`` and ``model.`` map onto :class:`SynthConfig`,
:class:`TrainConfig` and the model options; everything else is top level.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .attention import ATTENTION_KINDS, PE_MODES, RESIDUAL_SOURCES
from .errors import ConfigError
from .graph import NORM_MODES
from .layers import HOSTS, ModelConfig
from .synthgen import TASKS, SynthConfig
from .training import TrainConfig


@dataclass(frozen=True)
class ModelOptions:
    d_n: int = 16
    hidden: int = 16
    n_layers: int = 2
    residual_source: str = "features"
    attention: str = "transpose"
    use_qkv: bool = True


_TOP = {"task": str, "pe_mode": str, "host": str, "dataset": str, "output_dir": str,
        "n_seeds": int, "seed": int, "workers": int, "norm.mode": str}
_SECTIONS = {"synth": SynthConfig, "train": TrainConfig, "model": ModelOptions}
# the synthetic task follows the top-level one; the training seed is per run
_RESERVED = {"synth.task", "train.seed"}


def _to_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _converter(hint):
    if typing.get_origin(hint) is typing.Union:
        inner = [a for a in typing.get_args(hint) if a is not type(None)][0]
        conv = _converter(inner)
        return lambda s: None if s.strip().lower() in ("", "none", "null") else conv(s)
    if hint is bool:
        return _to_bool
    return hint


def _section_converters(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: _converter(hints[f.name]) for f in dataclasses.fields(cls)}


def known_keys() -> list[str]:
    keys = list(_TOP)
    for prefix, cls in _SECTIONS.items():
        keys += [f"{prefix}.{f.name}" for f in dataclasses.fields(cls)
                 if f"{prefix}.{f.name}" not in _RESERVED]
    return sorted(keys)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key=value`` lines; later keys override earlier ones."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override must look like KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class RunConfig:
    task: str = "occurrence"
    pe_mode: str = "gia"
    host: str = "gcn"
    dataset: Optional[str] = None
    synth: Optional[SynthConfig] = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelOptions = field(default_factory=ModelOptions)
    norm_mode: str = "fit-on-train"
    output_dir: str = "runs"
    n_seeds: int = 5
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.pe_mode not in PE_MODES:
            raise ConfigError(f"pe_mode must be one of {PE_MODES}, got {self.pe_mode!r}")
        if self.host not in HOSTS:
            raise ConfigError(f"host must be one of {HOSTS}, got {self.host!r}")
        if (self.dataset is None) == (self.synth is None):
            raise ConfigError("give exactly one of dataset=<dir> or synthetic settings (synth.*)")
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"norm.mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        if self.model.residual_source not in RESIDUAL_SOURCES:
            raise ConfigError(f"model.residual_source must be one of {RESIDUAL_SOURCES}")
        if self.model.attention not in ATTENTION_KINDS:
            raise ConfigError(f"model.attention must be one of {ATTENTION_KINDS}")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def n_classes(self) -> int:
        return 2 if self.task == "occurrence" else 8

    def run_seeds(self) -> list[int]:
        return [self.seed + k for k in range(self.n_seeds)]

    def model_config(self, in_dim: int, pe_mode: Optional[str] = None) -> ModelConfig:
        m = self.model
        return ModelConfig(in_dim=in_dim, n_classes=self.n_classes, d_n=m.d_n, hidden=m.hidden,
                           n_layers=m.n_layers, host=self.host, pe_mode=pe_mode or self.pe_mode,
                           residual_source=m.residual_source, attention=m.attention,
                           use_qkv=m.use_qkv)

    def train_config(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train, seed=seed)

    def with_pe_mode(self, pe_mode: str) -> "RunConfig":
        return dataclasses.replace(self, pe_mode=pe_mode)

    def to_flat(self, include_output: bool = False) -> dict:
        """Flat view of the configuration (what a config file would contain)."""
        out = {"task": self.task, "pe_mode": self.pe_mode, "host": self.host,
               "n_seeds": self.n_seeds, "seed": self.seed, "norm.mode": self.norm_mode}
        if self.dataset is not None:
            out["dataset"] = self.dataset
        for prefix, section in (("synth", self.synth), ("train", self.train), ("model", self.model)):
            if section is None:
                continue
            for f in dataclasses.fields(section):
                key = f"{prefix}.{f.name}"
                if key not in _RESERVED:
                    out[key] = getattr(section, f.name)
        if include_output:
            out["output_dir"] = self.output_dir
            out["workers"] = self.workers
        return out

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        """Build from string values, rejecting unknown keys with a hint."""
        top, sections = {}, {name: {} for name in _SECTIONS}
        converters = {name: _section_converters(c) for name, c in _SECTIONS.items()}
        for key, raw in values.items():
            if key in _RESERVED:
                raise ConfigError(f"{key} cannot be set directly; use "
                                  f"{'task' if key == 'synth.task' else 'seed'} instead")
            try:
                if key in _TOP:
                    top[key] = _TOP[key](raw) if isinstance(raw, str) else raw
                    continue
                prefix, _, name = key.partition(".")
                if prefix not in _SECTIONS or name not in converters[prefix]:
                    raise ConfigError(f"unknown config key {key!r}; known keys: {', '.join(known_keys())}")
                sections[prefix][name] = converters[prefix][name](raw) if isinstance(raw, str) else raw
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"bad value for {key}: {exc}") from None

        task = top.get("task", "occurrence")
        dataset = top.get("dataset") or None
        if dataset is not None and sections["synth"]:
            raise ConfigError("dataset and synth.* are mutually exclusive")
        seed = top.get("seed", 0)
        synth = None
        if dataset is None:
            sections["synth"].setdefault("seed", seed)
            synth = SynthConfig(task=task, **sections["synth"])
        return cls(
            task=task, pe_mode=top.get("pe_mode", "gia"), host=top.get("host", "gcn"),
            dataset=dataset, synth=synth,
            train=TrainConfig(**sections["train"]), model=ModelOptions(**sections["model"]),
            norm_mode=top.get("norm.mode", "fit-on-train"), output_dir=top.get("output_dir", "runs"),
            n_seeds=top.get("n_seeds", 5), seed=seed, workers=top.get("workers", 1),
        )
