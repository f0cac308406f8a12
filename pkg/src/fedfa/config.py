"""Experiment configuration documents (YAML) and their expansion into runs.

An :class:`ExperimentConfig` lists strategies, seeds and sweep axes; each
(strategy, seed, sweep value) combination resolves to a self-contained
:class:`RunConfig`, which is also what every run log stores in its header so
the run can be replayed.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, model_validator

from .errors import ConfigError

SWEEP_AXES = ("K", "M_c", "alpha", "eta_l", "eta_g")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelCfg(_Strict):
    kind: Literal["logistic_regression", "mlp"] = "logistic_regression"
    hidden: list[PositiveInt] = Field(default_factory=list)
    loss: Literal["cross_entropy", "squared_error"] = "cross_entropy"
    l2_reg: float = Field(0.0, ge=0)
    bias: bool = True

    @model_validator(mode="after")
    def _layers(self):
        if self.kind == "logistic_regression" and self.hidden:
            raise ValueError("logistic_regression takes no hidden layers")
        if self.kind == "mlp" and not self.hidden:
            raise ValueError("mlp needs at least one hidden layer")
        return self


class DataCfg(_Strict):
    source: Literal["synthetic", "csv"] = "synthetic"
    n_samples: PositiveInt = 2000
    n_features: PositiveInt = 20
    n_classes: PositiveInt = 10
    cluster_spread: float = Field(1.0, ge=0)
    class_sep: PositiveFloat = 1.0
    scale_ratio: PositiveFloat = 1.0
    path: Optional[str] = None
    test_path: Optional[str] = None
    label_column: Union[int, str] = -1
    header: bool = True
    test_fraction: float = Field(0.2, gt=0, lt=1)

    @model_validator(mode="after")
    def _csv_path(self):
        if self.source == "csv" and not self.path:
            raise ValueError("csv source needs 'path'")
        return self


class PartitionCfg(_Strict):
    kind: Literal["dirichlet", "iid"] = "dirichlet"
    alpha: PositiveFloat = 0.5


class DelayCfg(_Strict):
    kind: Literal["lognormal", "pareto", "fixed"] = "lognormal"
    mean: PositiveFloat = 10.0
    sigma: float = Field(1.0, ge=0)
    shape: float = Field(2.0, gt=1)
    noise_sigma: float = Field(0.1, ge=0)
    fixed: Union[float, list[Union[float, list[PositiveFloat]]], None] = None
    per_client_rate: Optional[list[PositiveFloat]] = None

    @model_validator(mode="after")
    def _fixed(self):
        if self.kind == "fixed" and self.fixed is None:
            raise ValueError("fixed delay model needs 'fixed'")
        return self


class LocalCfg(_Strict):
    steps: Optional[PositiveInt] = 10
    epochs: Optional[PositiveInt] = None
    eta_l: Union[PositiveFloat, list[PositiveFloat]] = 0.05
    batch_size: PositiveInt = 32
    prox_mu: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _steps(self):
        if self.epochs is not None and isinstance(self.eta_l, list):
            raise ValueError("a per-step eta_l schedule needs 'steps', not 'epochs'")
        if self.epochs is None and self.steps is None:
            raise ValueError("set 'steps' or 'epochs'")
        if isinstance(self.eta_l, list) and len(self.eta_l) != self.steps:
            raise ValueError(f"eta_l schedule has {len(self.eta_l)} entries for {self.steps} steps")
        return self


class LocalOverride(_Strict):
    steps: Optional[PositiveInt] = None
    epochs: Optional[PositiveInt] = None
    eta_l: Union[PositiveFloat, list[PositiveFloat], None] = None
    batch_size: Optional[PositiveInt] = None
    prox_mu: Optional[float] = Field(None, ge=0)


class StrategyCfg(_Strict):
    kind: Literal["fedavg", "fedasync", "fedbuff", "fedfa_param", "fedfa_delta"]
    label: Optional[str] = None
    K: PositiveInt = 5
    eta_g: float = Field(1.0, ge=0)
    beta: float = Field(0.5, gt=0, le=1)
    staleness: Literal["constant", "polynomial"] = "polynomial"
    staleness_a: float = Field(0.5, ge=0)
    delta_mode: Literal["window", "oneshot"] = "window"
    fedavg_payload: Literal["delta", "params"] = "delta"
    local: Optional[LocalOverride] = None

    @property
    def name(self) -> str:
        return self.label or self.kind


class SimCfg(_Strict):
    n_clients: PositiveInt = 100
    concurrency: PositiveInt = 10
    eval_every: PositiveInt = 5
    max_virtual_time: Optional[PositiveFloat] = None
    max_versions: Optional[PositiveInt] = None
    store_checkpoints: bool = False

    @model_validator(mode="after")
    def _stop(self):
        if self.max_virtual_time is None and self.max_versions is None:
            raise ValueError("set max_virtual_time and/or max_versions")
        if self.concurrency > self.n_clients:
            raise ValueError("concurrency exceeds n_clients")
        return self


class RunConfig(_Strict):
    """Everything needed to reproduce one simulation."""

    model: ModelCfg = Field(default_factory=ModelCfg)
    data: DataCfg = Field(default_factory=DataCfg)
    partition: PartitionCfg = Field(default_factory=PartitionCfg)
    sim: SimCfg
    local: LocalCfg = Field(default_factory=LocalCfg)
    delay: DelayCfg = Field(default_factory=DelayCfg)
    strategy: StrategyCfg
    seed: int = Field(0, ge=0)

    @property
    def run_id(self) -> str:
        return f"{self.strategy.name}__seed{self.seed}"


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = 1
    name: str = "experiment"
    output_dir: Optional[str] = None
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    model: ModelCfg = Field(default_factory=ModelCfg)
    data: DataCfg = Field(default_factory=DataCfg)
    partition: PartitionCfg = Field(default_factory=PartitionCfg)
    sim: SimCfg
    local: LocalCfg = Field(default_factory=LocalCfg)
    delay: DelayCfg = Field(default_factory=DelayCfg)
    strategies: list[StrategyCfg] = Field(min_length=1)
    targets: list[float] = Field(default_factory=lambda: [0.7], min_length=1)
    budget: Optional[PositiveFloat] = None
    sweep: dict[Literal["K", "M_c", "alpha", "eta_l", "eta_g"], list[float]] = Field(
        default_factory=dict
    )

    @model_validator(mode="after")
    def _checks(self):
        if any(s < 0 for s in self.seeds):
            raise ValueError("seeds must be non-negative")
        if any(not 0 < t <= 1 for t in self.targets):
            raise ValueError("targets must lie in (0, 1]")
        return self

    def runs(self, overrides: dict[str, Any] | None = None) -> list[RunConfig]:
        """Expand into one :class:`RunConfig` per (strategy, seed).

        ``overrides`` maps a sweep axis to the value to apply.
        """
        out = []
        for strat in self.strategies:
            for seed in self.seeds:
                local = self.local.model_dump()
                if strat.local is not None:
                    local.update(strat.local.model_dump(exclude_none=True))
                    if strat.local.epochs is not None and strat.local.steps is None:
                        local["steps"] = None
                rc = {
                    "model": self.model.model_dump(),
                    "data": self.data.model_dump(),
                    "partition": self.partition.model_dump(),
                    "sim": self.sim.model_dump(),
                    "local": local,
                    "delay": self.delay.model_dump(),
                    "strategy": strat.model_dump(exclude={"local"}),
                    "seed": seed,
                }
                for axis, value in (overrides or {}).items():
                    _apply_axis(rc, axis, value)
                out.append(RunConfig.model_validate(rc))
        return out


def _apply_axis(rc: dict, axis: str, value) -> None:
    if axis == "K":
        rc["strategy"]["K"] = int(value)
    elif axis == "M_c":
        rc["sim"]["concurrency"] = int(value)
    elif axis == "alpha":
        rc["partition"]["alpha"] = float(value)
    elif axis == "eta_l":
        rc["local"]["eta_l"] = float(value)
    elif axis == "eta_g":
        rc["strategy"]["eta_g"] = float(value)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")


def load_config(path) -> ExperimentConfig:
    """Parse and validate a YAML (or JSON) experiment document."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return ExperimentConfig.model_validate(doc)


def format_validation_error(exc) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"  {loc}: {err['msg']}")
    return "invalid config:\n" + "\n".join(lines)
