"""Run configuration: one YAML or JSON file, validated before any work starts."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .synth import DEFAULT_COUNTS, FLOW_TYPES


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Paths(_Section):
    output_dir: str = "out"
    csv: Optional[str] = None  # packet CSV for `ingest`
    dataset: Optional[str] = None  # defaults to <output_dir>/dataset.json
    model: Optional[str] = None  # defaults to <output_dir>/model.bin


class Architecture(_Section):
    layers: int = Field(3, ge=1)
    hidden: int = Field(64, ge=1)


class SynthSection(_Section):
    counts: dict = Field(default_factory=lambda: dict(DEFAULT_COUNTS))
    min_len: int = Field(4, ge=3)
    max_len: int = Field(12, ge=3)

    @field_validator("counts")
    @classmethod
    def _known_types(cls, v):
        unknown = set(v) - set(FLOW_TYPES)
        if unknown:
            raise ValueError(f"unknown flow types {sorted(unknown)}")
        if any(int(n) < 0 for n in v.values()):
            raise ValueError("counts must be non-negative")
        return v


class Training(_Section):
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(3e-3, gt=0)
    feature_dropout: bool = False


class Attack(_Section):
    kappa: float = Field(1.0, gt=0)
    delta: float = -0.2
    base_lr: float = Field(0.01, gt=0)
    base_iterations: int = Field(1000, ge=1)
    max_iterations: int = Field(16000, ge=1)
    epsilon: Optional[float] = Field(None, ge=0)  # None: mean L-inf of a CW run
    pgd_iterations: int = Field(100, ge=1)


class ARS(_Section):
    kappa0: float = Field(0.25, gt=0)
    growth: float = Field(2.0, gt=1)
    max_rounds: int = Field(100, ge=1)
    max_samples: Optional[int] = Field(None, ge=1)  # first n test attack flows


class Explain(_Section):
    bins: int = Field(16, ge=2)
    grid_points: int = Field(40, ge=2)
    feature: str = "dst_port"  # flow-constant feature for `pdp`
    seq_feature: str = "iat"  # per-packet feature for `seqpdp` and `profile`
    condition: str = "attack"  # "attack", "benign" or an attack type
    step: int = Field(1, ge=0)


class Defense(_Section):
    cycles: int = Field(5, ge=1)
    cadence: int = Field(10, ge=1)
    iterations: int = Field(10, ge=1)
    kappa: float = Field(1.0, gt=0)
    held_out: int = Field(60, ge=1)
    ars_max_rounds: int = Field(8, ge=1)


class RunConfig(_Section):
    seed: int = 0
    paths: Paths = Field(default_factory=Paths)
    architecture: Architecture = Field(default_factory=Architecture)
    synth: SynthSection = Field(default_factory=SynthSection)
    training: Training = Field(default_factory=Training)
    attack: Attack = Field(default_factory=Attack)
    ars: ARS = Field(default_factory=ARS)
    explain: Explain = Field(default_factory=Explain)
    defense: Defense = Field(default_factory=Defense)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir)

    @property
    def dataset_path(self) -> Path:
        return Path(self.paths.dataset) if self.paths.dataset else self.output_dir / "dataset.json"

    @property
    def model_path(self) -> Path:
        return Path(self.paths.model) if self.paths.model else self.output_dir / "model.bin"


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Read a YAML/JSON config (JSON is valid YAML) and apply dotted-key overrides."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ValueError("config file must contain a mapping at the top level")
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return RunConfig.model_validate(data)
