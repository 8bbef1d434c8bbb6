"""JSON experiment configuration and grid specifications."""

from __future__ import annotations

import itertools
import json
import re
from pathlib import Path
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import SamplerConfig, SplitSpec
from .dlw import POLICIES, DlwConfig
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid experiment or grid configuration (CLI exit code 2)."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSection(_Strict):
    path: str
    format: Literal["m4", "long"] = "long"


class SplitSection(_Strict):
    test_length: int = Field(18, ge=1)
    validation_length: int = Field(18, ge=1)


class ModelSection(_Strict):
    num_blocks: int = Field(20, ge=1)
    lookback: int = Field(36, ge=2)
    horizon: int = Field(6, ge=2)
    hidden_width: int = Field(256, ge=1)
    trunk_depth: int = Field(4, ge=1)


class TrainSection(_Strict):
    iterations: int = Field(8000, ge=1)
    learning_rate: float = Field(1e-5, gt=0)
    batch_size: int = Field(512, ge=1)
    origin_range: int = Field(120, ge=1)
    log_every: int = Field(100, ge=1)


class DlwSection(_Strict):
    policy: str = "static"
    lambda_static: float = Field(0.15, ge=0, le=1)
    kappa: float = Field(0.35, gt=0, le=1)
    alpha: float = Field(0.0, ge=0)
    lambda0: float = Field(0.05, ge=0, le=1)

    @field_validator("policy")
    @classmethod
    def _known(cls, v):
        if v not in POLICIES:
            raise ValueError(f"unknown policy {v!r}; choose from {', '.join(POLICIES)}")
        return v


class ExperimentConfig(_Strict):
    name: str = "experiment"
    dataset: DatasetSection
    split: SplitSection = SplitSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    dlw: DlwSection = DlwSection()
    ensemble_size: int = Field(5, ge=1)
    seeds: Optional[List[int]] = None
    final_fit: bool = True
    output_dir: str = "runs/experiment"

    @model_validator(mode="after")
    def _seeds_match(self):
        if self.seeds is not None and len(self.seeds) != self.ensemble_size:
            raise ValueError(f"seeds has {len(self.seeds)} entries but ensemble_size is {self.ensemble_size}")
        if self.seeds is not None and len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        return self

    @property
    def seed_list(self) -> List[int]:
        return list(self.seeds) if self.seeds is not None else list(range(1, self.ensemble_size + 1))

    def network_config(self) -> ModelConfig:
        return ModelConfig(**self.model.model_dump())

    def split_spec(self) -> SplitSpec:
        return SplitSpec(**self.split.model_dump())

    def train_config(self, seed: int = 0) -> TrainConfig:
        t = self.train
        return TrainConfig(
            iterations=t.iterations,
            learning_rate=t.learning_rate,
            model=self.network_config(),
            dlw=DlwConfig(**self.dlw.model_dump()),
            sampler=SamplerConfig(batch_size=t.batch_size, origin_range=t.origin_range),
            seed=seed,
            log_every=t.log_every,
        )

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), indent=2, sort_keys=True)


def _line_of(text: str, loc) -> Optional[int]:
    """Best-effort line number of the innermost key named in a validation error."""
    keys = [k for k in loc if isinstance(k, str)]
    if not keys:
        return None
    pos = 0
    for key in keys:
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            return None
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _parse(model, text: str, source: str):
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    try:
        return model.model_validate(raw)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            where = ".".join(str(p) for p in err["loc"]) or "<root>"
            line = _line_of(text, err["loc"])
            prefix = f"{source}:{line}" if line else source
            lines.append(f"{prefix}: {where}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from None


def load_experiment(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return _parse(ExperimentConfig, p.read_text(encoding="utf-8"), str(p))


def parse_experiment(text: str, source: str = "<config>") -> ExperimentConfig:
    return _parse(ExperimentConfig, text, source)


# grid search ---------------------------------------------------------------

GRID_PARAMETERS = {
    "kappa": ("dlw", "kappa"),
    "lambda_static": ("dlw", "lambda_static"),
    "alpha": ("dlw", "alpha"),
    "lambda0": ("dlw", "lambda0"),
    "learning_rate": ("train", "learning_rate"),
    "iterations": ("train", "iterations"),
}


class GridSpec(_Strict):
    parameters: Dict[str, List[float]]
    metric: Literal["smape"] = "smape"

    @field_validator("parameters")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("grid needs at least one parameter")
        for name, values in v.items():
            if name not in GRID_PARAMETERS:
                raise ValueError(f"unknown grid parameter {name!r}; choose from {', '.join(GRID_PARAMETERS)}")
            if not values:
                raise ValueError(f"grid parameter {name!r} has no values")
        return v

    def cells(self) -> List[Dict[str, float]]:
        names = list(self.parameters)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.parameters[n] for n in names))]


def load_grid(path) -> GridSpec:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"grid file not found: {p}")
    return _parse(GridSpec, p.read_text(encoding="utf-8"), str(p))


def apply_cell(config: ExperimentConfig, cell: Dict[str, float]) -> ExperimentConfig:
    """Copy of ``config`` with grid values substituted (revalidated)."""
    doc = config.model_dump()
    for name, value in cell.items():
        section, key = GRID_PARAMETERS[name]
        doc[section][key] = int(value) if key == "iterations" else value
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
