"""Run configuration: a versioned YAML schema validated with pydantic."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import models
from .core import ExperimentSpec, GaussianPrior

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Strict):
    name: Literal["example1", "example2", "eit"]
    xi: float = Field(0.5, ge=0.0, le=1.0)
    with_nuisance: bool = True
    design: tuple[float, float] = (2.0, 2.0)
    h: float = Field(0.5, gt=0.0)
    current_pattern: Optional[list[float]] = None


class ExperimentConfig(_Strict):
    """Unset fields fall back to the model's reference values."""

    n_exp: Optional[int] = Field(None, ge=1)
    noise_var: Optional[float] = Field(None, gt=0.0)
    nuisance_var: Optional[float] = Field(None, gt=0.0)
    prior_var: Optional[float] = Field(None, gt=0.0)
    prior_half_width: Optional[float] = Field(None, gt=0.0)


class EstimatorConfig(_Strict):
    name: Literal["dlmc", "dlmcis", "mcla", "dlmc2", "dlmc-nuisance-free"] = "dlmcis"
    n_outer: int = Field(1000, ge=1)
    n_inner: int = Field(100, ge=1)
    n_inner2: int = Field(100, ge=1)
    use_map: bool = False


class LogGrid(_Strict):
    start: float = Field(gt=0.0)
    stop: float = Field(gt=0.0)
    num: int = Field(ge=1)

    def values(self) -> np.ndarray:
        return np.logspace(np.log10(self.start), np.log10(self.stop), self.num)


class SweepConfig(_Strict):
    # scalars for the linear toy, pairs (shift, spacing) for the laminate
    points: list[Union[float, tuple[float, float]]]


class BreakdownConfig(_Strict):
    nuisance_vars: LogGrid
    n_runs: int = Field(10, ge=1)


class ReferenceConfig(_Strict):
    kind: Literal["analytic", "value", "dlmcis"] = "analytic"
    value: Optional[float] = None
    n_outer: int = Field(20000, ge=1)
    n_inner: int = Field(100, ge=1)

    @model_validator(mode="after")
    def _value_needed(self):
        if self.kind == "value" and self.value is None:
            raise ValueError("reference kind 'value' needs a value")
        return self


class PilotConfig(_Strict):
    methods: list[Literal["dlmc", "dlmcis", "mcla"]] = ["dlmc", "dlmcis", "mcla"]
    n_outer: int = Field(1000, ge=30)
    n_inner: int = Field(200, ge=30)
    reference: ReferenceConfig = ReferenceConfig()


class AllocateConfig(_Strict):
    tols: Union[LogGrid, list[float]]
    pilot: PilotConfig = PilotConfig()

    def tol_values(self) -> np.ndarray:
        return self.tols.values() if isinstance(self.tols, LogGrid) else np.asarray(self.tols, dtype=float)

    @field_validator("tols")
    @classmethod
    def _positive(cls, v):
        if isinstance(v, list) and (not v or min(v) <= 0):
            raise ValueError("tolerances must be positive")
        return v


class ConsistencyConfig(_Strict):
    tols: list[float]
    n_rep: int = Field(40, ge=1)
    pilot: PilotConfig = PilotConfig(methods=["dlmcis"])

    @field_validator("tols")
    @classmethod
    def _positive(cls, v):
        if not v or min(v) <= 0:
            raise ValueError("tolerances must be positive")
        return v


class RunConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    model: ModelConfig
    experiment: ExperimentConfig = ExperimentConfig()
    estimator: EstimatorConfig = EstimatorConfig()
    seed: int = Field(0, ge=0, lt=2**64)
    workers: int = Field(1, ge=1)
    c_alpha: float = Field(1.96, gt=0.0)
    sweep: Optional[SweepConfig] = None
    breakdown: Optional[BreakdownConfig] = None
    allocate: Optional[AllocateConfig] = None
    consistency: Optional[ConsistencyConfig] = None
    pilot: Optional[PilotConfig] = None

    def payload_hash(self) -> str:
        """sha256 of everything that can change numbers (the worker count cannot)."""
        data = self.model_dump(mode="json", exclude={"workers"})
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ValueError("config must be a mapping")
    return RunConfig.model_validate(data)


# ------------------------------------------------------------------ builders

def build_model(cfg: RunConfig, point=None):
    """Forward model for the configured family, optionally at another design ``point``."""
    m = cfg.model
    if m.name == "example1":
        return models.make_example1()
    if m.name == "example2":
        xi = m.xi if point is None else float(point)
        return models.make_example2(xi, m.with_nuisance)
    design = m.design if point is None else tuple(point)
    return models.make_eit(design, m.h, m.current_pattern)


def build_spec(cfg: RunConfig, point=None, nuisance_var=None) -> ExperimentSpec:
    m, e = cfg.model, cfg.experiment
    kw = {k: v for k, v in (("n_exp", e.n_exp), ("noise_var", e.noise_var),
                            ("nuisance_var", nuisance_var if nuisance_var is not None else e.nuisance_var))
          if v is not None}
    if m.name == "example1":
        if e.prior_var is not None:
            kw["prior_var"] = e.prior_var
        return models.example1_spec(**kw)
    if m.name == "example2":
        if e.prior_var is not None:
            kw["prior_var"] = e.prior_var
        xi = m.xi if point is None else float(point)
        return models.example2_spec(xi, m.with_nuisance, **kw)
    if e.prior_half_width is not None:
        kw["half_width"] = e.prior_half_width
    design = m.design if point is None else tuple(point)
    return models.eit_spec(design, **kw)


def analytic_reference(cfg: RunConfig, spec: ExperimentSpec, point=None):
    """Closed-form EIG when the configured model has one, else ``None``."""
    if cfg.model.name != "example2" or not isinstance(spec.prior, GaussianPrior):
        return None
    xi = cfg.model.xi if point is None else float(point)
    return models.analytic_eig_linear_gaussian(xi, spec, cfg.model.with_nuisance, small_noise=True)
