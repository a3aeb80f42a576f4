"""Experiment configuration: YAML schema, validation and digest."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .artifacts import digest_of
from .preprocess import MODES


class ExperimentConfigError(ValueError):
    """Raised for unreadable or schema-violating experiment files."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CohortSection(_Strict):
    source: Literal["synthetic", "jsonl"] = "synthetic"
    path: Optional[str] = None
    n_patients: int = Field(2000, ge=1)
    n_phenotypes: int = Field(4, ge=1)
    n_binary: int = Field(60, ge=1)
    n_labs: int = Field(6, ge=0)
    rho: float = Field(0.0, ge=0.0, le=1.0)
    index_event_fraction: float = Field(0.5, ge=0.0, le=1.0)
    signature_rate: float = Field(0.45, ge=0.0, le=1.0)
    base_rate: float = Field(0.04, ge=0.0, le=1.0)
    lab_shift: float = 1.5

    @model_validator(mode="after")
    def _path_for_jsonl(self):
        if self.source == "jsonl" and not self.path:
            raise ValueError("cohort.path is required when cohort.source is 'jsonl'")
        return self


class PreprocessSection(_Strict):
    window_days: int = Field(90, ge=1)
    i_max: int = Field(22, ge=1)
    min_frequency: float = Field(0.01, ge=0.0, le=1.0)
    criteria: Literal["hf", "stroke", "none"] = "hf"
    modes: list[str] = Field(default_factory=lambda: ["AFE", "E2E", "ALL"])

    @field_validator("modes")
    @classmethod
    def _known_modes(cls, v):
        bad = [m for m in v if m not in MODES]
        if bad:
            raise ValueError(f"unknown trajectory modes {bad}; choose from {list(MODES)}")
        if len(set(v)) != len(v):
            raise ValueError("trajectory modes must be unique")
        return v


class TrainingSection(_Strict):
    feature_embed_dim: int = Field(256, ge=1)
    hidden_size: int = Field(64, ge=1)
    n_z: int = Field(256, ge=1)
    w_b: float = Field(100.0, ge=0.0)
    lr_ae: float = Field(2e-3, gt=0.0)
    lr_disc: float = Field(2e-4, gt=0.0)
    weight_decay: float = Field(1e-6, ge=0.0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(50, ge=1)
    train_fraction: float = Field(0.8, gt=0.0, lt=1.0)
    clip_grad_norm: Optional[float] = Field(None, gt=0.0)


class ModelEntry(_Strict):
    model: Literal["gru", "agru", "tlstm"]
    alpha: float = Field(0.0, ge=0.0)
    beta: float = Field(0.01, gt=0.0)
    name: Optional[str] = None

    @property
    def label(self):
        if self.name:
            return self.name
        if self.model == "gru" or (self.model == "tlstm" and self.alpha == 0):
            return self.model
        return f"{self.model}_a{self.alpha:g}"


class ClusterSection(_Strict):
    k: int = Field(6, ge=1)
    d_out: int = Field(6, ge=1)
    restarts: int = Field(10, ge=1)


class KnnSection(_Strict):
    n_samples: int = Field(1000, ge=2)
    k: int = Field(5, ge=1)
    repeats: int = Field(10, ge=1)


class SurrogateSection(_Strict):
    n_trees: int = Field(100, ge=1)
    max_depth: int = Field(8, ge=1)
    train_fraction: float = Field(0.7, gt=0.0, lt=1.0)
    seeds: int = Field(5, ge=1)


class MetricsSection(_Strict):
    knn: KnnSection = Field(default_factory=KnnSection)
    surrogate: SurrogateSection = Field(default_factory=SurrogateSection)


class ExperimentConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2 ** 64)
    output_dir: str = "runs/default"
    cohort: CohortSection = Field(default_factory=CohortSection)
    preprocess: PreprocessSection = Field(default_factory=PreprocessSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    models: list[ModelEntry] = Field(default_factory=lambda: [ModelEntry(model="gru"),
                                                              ModelEntry(model="agru", alpha=1.0)])
    cluster: ClusterSection = Field(default_factory=ClusterSection)
    metrics: MetricsSection = Field(default_factory=MetricsSection)

    @field_validator("models")
    @classmethod
    def _non_empty_unique(cls, v):
        if not v:
            raise ValueError("the model matrix must not be empty")
        labels = [m.label for m in v]
        if len(set(labels)) != len(labels):
            raise ValueError(f"model labels must be unique, got {labels}")
        return v

    def digest(self):
        """Digest of everything that determines results (the output location excluded)."""
        return digest_of(self.model_dump(exclude={"output_dir"}))


def _format_errors(exc, source):
    lines = [f"{source}: invalid experiment config"]
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"  {loc}: {err['msg']}")
    return "\n".join(lines)


def load_config(path, seed=None, output_dir=None):
    """Parse and validate a YAML experiment file; CLI overrides win over file values."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError as exc:
        raise ExperimentConfigError(f"config file {path} not found") from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ExperimentConfigError(f"{path}: YAML syntax error{where}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ExperimentConfigError(f"{path}: top level must be a mapping")
    if seed is not None:
        raw["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = str(output_dir)
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ExperimentConfigError(_format_errors(exc, path)) from exc
    if cfg.cohort.source == "jsonl":
        p = Path(cfg.cohort.path)
        if not p.is_absolute():
            p = (path.parent / p).resolve()
            cfg.cohort.path = str(p)
        if not p.exists():
            raise ExperimentConfigError(f"{path}: cohort.path {p} does not exist")
    return cfg
