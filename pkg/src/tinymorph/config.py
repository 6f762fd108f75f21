"""Run configuration: one JSON document covering every tunable.

Unknown keys are rejected at every nesting level.  The morph section's
injection fraction is spelled ``lambda`` in JSON and ``lam`` in Python.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 50


@dataclass
class ModelConfig:
    base_channels: int = 32
    channel_mults: list = field(default_factory=lambda: [1, 2, 4])
    n_res_blocks: int = 1
    attn_resolutions: list = field(default_factory=lambda: [16, 8])
    groups: int = 8
    time_dim: int = 128
    cond_dim: int = 64
    num_classes: int = 3


@dataclass
class TrainSection:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    weight_decay: float = 0.0


@dataclass
class LoraSection:
    rank: int = 16
    steps: int = 200
    lr: float = 2e-4
    seed: int = 0


@dataclass
class MorphSection:
    n: int = 16
    lam: float = 0.6
    adain: bool = True
    adain_stage: str = "initial-noise"
    reschedule: bool = False
    inject_mid: bool = False
    lora_interp: str = "product"
    seed: int = 0


_JSON_ALIASES = {"lam": "lambda"}
_SECTIONS = {
    "schedule": ScheduleConfig,
    "model": ModelConfig,
    "train": TrainSection,
    "lora": LoraSection,
    "morph": MorphSection,
}


@dataclass
class RunConfig:
    resolution: int = 32
    channels: int = 1
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    lora: LoraSection = field(default_factory=LoraSection)
    morph: MorphSection = field(default_factory=MorphSection)

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        top_fields = {f.name for f in fields(cls)}
        unknown = set(doc) - top_fields
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in doc.items():
            if key in _SECTIONS:
                kwargs[key] = _section_from_dict(_SECTIONS[key], key, value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())

    def to_dict(self):
        doc = asdict(self)
        morph = doc["morph"]
        for attr, alias in _JSON_ALIASES.items():
            if attr in morph:
                morph[alias] = morph.pop(attr)
        return doc

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def content_hash(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _section_from_dict(section_cls, name, value):
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")
    value = dict(value)
    if section_cls is MorphSection:
        for attr, alias in _JSON_ALIASES.items():
            if alias in value:
                if attr in value:
                    raise ConfigError(f"section {name!r} sets both {alias!r} and {attr!r}")
                value[attr] = value.pop(alias)
    legal = {f.name for f in fields(section_cls)}
    unknown = set(value) - legal
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    return section_cls(**value)
