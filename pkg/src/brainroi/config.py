"""Run configuration: one JSON document with per-module sections."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .decoding import DecodeConfig
from .encoder import EncoderConfig
from .ipo import GeneratorConfig
from .training import SyntheticDatasetSpec


@dataclass
class LMConfig:
    ctx_dim: int = 16
    seed: int = 7
    temperature: float = 1.0
    max_new_tokens: int = 12


@dataclass
class IPOConfig:
    generator: str = "mock"  # mock | http
    endpoint: str = ""
    timeout: float = 30.0
    pool_capacity: int = 5
    instruction: str | None = None
    val_subject: int = 0
    val_samples: int = 6
    generation: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if isinstance(self.generation, dict):
            self.generation = GeneratorConfig(**self.generation)
        if self.generator not in ("mock", "http"):
            raise ValueError(f"ipo.generator must be 'mock' or 'http', got {self.generator!r}")


@dataclass
class AtlasConfig:
    # [{"id": "S1", "mask": "path", "atlases": {"atlasA": "path", ...}}, ...]
    subjects: list = field(default_factory=list)


@dataclass
class RunConfig:
    seed: int = 42
    preset: str = "desk"
    out_dir: str = "runs/default"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(6, 3, 0.1, 12, 0))
    lm: LMConfig = field(default_factory=LMConfig)
    ipo: IPOConfig = field(default_factory=IPOConfig)
    atlas: AtlasConfig = field(default_factory=AtlasConfig)

    def __post_init__(self):
        if self.preset not in ("desk", "paper"):
            raise ValueError(f"preset must be 'desk' or 'paper', got {self.preset!r}")

    # paths
    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def checkpoint_path(self, stage: int) -> Path:
        return self.out / "checkpoints" / f"stage{stage}_best.ckpt"

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        # where outputs go is not part of the experiment
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


_SECTIONS = {"encoder": EncoderConfig, "data": SyntheticDatasetSpec, "decode": DecodeConfig,
             "lm": LMConfig, "ipo": IPOConfig, "atlas": AtlasConfig}


def from_dict(raw: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        cls = _SECTIONS.get(key)
        if cls is not None:
            if not isinstance(value, dict):
                raise ValueError(f"config section {key!r} must be an object")
            allowed = {f.name for f in fields(cls)}
            bad = set(value) - allowed
            if bad:
                raise ValueError(f"unknown keys in {key!r}: {sorted(bad)}")
            value = cls(**value)
        kwargs[key] = value
    return RunConfig(**kwargs)


def load_config(path: str | None) -> RunConfig:
    if not path:
        return RunConfig()
    with open(path) as fh:
        return from_dict(json.load(fh))
