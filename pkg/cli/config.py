"""
Experiment configuration.

A config is a JSON document with model, grid, mc, task and output sections.
Every model forbids unknown keys, so a misspelled key fails with its path
named in the error.
"""

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from sim.pricing import DefaultModel, RecoveryFunction
from sim.scenarios import ModelParams, build_params, preset_spec
from sim.stochastic_core import TimeGrid, make_time_grid

TaskName = Literal['simulate', 'price-zcb', 'price-put', 'price-defaultable-put', 'hedge', 'gkw-regress',
                   'verify', 'tree-lab']
TASKS = TaskName.__args__
STYLIZED_ONLY = ('price-zcb', 'price-put', 'price-defaultable-put', 'hedge')
VerifyCheck = Literal['supermartingale', 'martingale', 'strict_local_martingale', 'np_dynamics',
                      'numeraire_cost', 'orthogonality']


class StrictModel(BaseModel):
    model_config = ConfigDict(extra='forbid')


# Shared error model
class ErrorReport(StrictModel):
    code: int
    message: str
    detail: Optional[str] = None
    task: Optional[str] = None


class RunManifest(StrictModel):
    task: str
    config_path: str
    config_hash: str
    master_seed: Optional[int] = None
    n_paths: Optional[int] = None
    threads: int
    versions: Dict[str, str]
    host: Dict[str, float]
    created_utc: str
    wall_time_sec: float
    artifacts: List[str]


# ==========================================
# MODEL
# ==========================================

class StylizedSection(StrictModel):
    alpha0: float
    beta: float
    r: float = 0.0
    z0: float = 1.0


class GammaSection(StrictModel):
    kind: Literal['constant', 'cir', 'linear'] = 'constant'
    kappa: float = 0.0
    theta: float = 0.0
    sigma: float = 0.0


class RandomScalingSection(StrictModel):
    bessel_dim: float
    z0: float
    gamma0: float
    gamma: GammaSection = Field(default_factory=GammaSection)
    rho: float = 0.0
    r: float = 0.0


class AssetsSection(StrictModel):
    asset_appreciation: Tuple[float, float]
    asset_vols: Tuple[Tuple[float, float], Tuple[float, float]]
    s0_j: Tuple[float, float] = (1.0, 1.0)


class RecoverySection(StrictModel):
    kind: Literal['constant', 'linear'] = 'constant'
    a: float = 1.0
    b: float = 0.0


class DefaultSection(StrictModel):
    intensity: float = Field(ge=0)
    recovery: RecoverySection = Field(default_factory=RecoverySection)


class ModelSection(StrictModel):
    """Either a named preset or the parameter block matching the variant."""
    variant: Literal['stylized', 'random_scaling']
    preset: Optional[str] = None
    stylized: Optional[StylizedSection] = None
    random_scaling: Optional[RandomScalingSection] = None
    assets: Optional[AssetsSection] = None
    default: Optional[DefaultSection] = None

    @model_validator(mode='after')
    def _one_parameter_block(self):
        other = 'random_scaling' if self.variant == 'stylized' else 'stylized'
        if getattr(self, other) is not None:
            raise ValueError(f"variant '{self.variant}' does not take a model.{other} block")
        block = getattr(self, self.variant)
        if (block is None) == (self.preset is None):
            raise ValueError(f"give exactly one of model.{self.variant} or model.preset")
        return self

    def params(self) -> ModelParams:
        """Model parameters; values violating model invariants raise ValueError."""
        if self.preset is not None:
            spec = preset_spec(self.preset)
            if spec.get('variant') != self.variant:
                raise ValueError(f"preset '{self.preset}' is a {spec.get('variant')} model, "
                                 f"model.variant is '{self.variant}'")
        else:
            spec = {'variant': self.variant, **getattr(self, self.variant).model_dump()}
        if self.assets is not None:
            spec['assets'] = self.assets.model_dump()
        return build_params(spec)

    def default_model(self, T: float) -> DefaultModel:
        if self.default is None:
            raise ValueError("model.default (intensity, recovery) is required for this task")
        return DefaultModel(self.default.intensity, RecoveryFunction(**self.default.recovery.model_dump()), T)


# ==========================================
# GRID, MC, TASK, OUTPUT
# ==========================================

class GridSection(StrictModel):
    t0: float = 0.0
    T: float
    n_steps: int = Field(ge=1)

    def time_grid(self) -> TimeGrid:
        return make_time_grid(self.t0, self.T, self.n_steps)


class McSection(StrictModel):
    n_paths: int = Field(ge=2)
    master_seed: int = Field(ge=0)


class TaskSection(StrictModel):
    """Task name and its options; options a task does not read are ignored by it."""
    name: TaskName
    # pricing
    maturities: Optional[List[float]] = None
    strikes: List[float] = Field(default_factory=lambda: [1.0])
    monte_carlo: bool = False
    # hedging and regression
    asset_index: Literal[1, 2] = 1
    n_steps_list: Optional[List[int]] = None
    payoff: Literal['asset', 'put'] = 'asset'
    strike: float = 1.0
    instruments: Optional[List[str]] = None
    state_channels: Optional[List[str]] = None
    degree: int = Field(default=3, ge=1, le=6)
    n_perturbations: int = Field(default=20, ge=1)
    # verify
    checks: Optional[List[VerifyCheck]] = None
    # tree lab
    tree: Optional[str] = None
    claim: Optional[str] = None
    coarse: bool = False
    brute_force: bool = True


class OutputSection(StrictModel):
    directory: str = 'runs'
    formats: List[Literal['csv', 'json']] = Field(default_factory=lambda: ['csv', 'json'])
    plot_data: bool = True


class ExperimentConfig(StrictModel):
    model: Optional[ModelSection] = None
    grid: Optional[GridSection] = None
    mc: Optional[McSection] = None
    task: TaskSection
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode='after')
    def _referenced_sections(self):
        name = self.task.name
        if name == 'tree-lab':
            if self.task.tree is None or self.task.claim is None:
                raise ValueError("task 'tree-lab' needs task.tree and task.claim")
            return self
        missing = [s for s in ('model', 'grid', 'mc') if getattr(self, s) is None]
        if missing:
            raise ValueError(f"task '{name}' needs section(s): {', '.join(missing)}")
        if name in STYLIZED_ONLY and self.model.variant != 'stylized':
            raise ValueError(f"task '{name}' is defined for the stylized model only")
        if name == 'price-defaultable-put':
            if self.model.default is None:
                raise ValueError("task 'price-defaultable-put' needs model.default")
            if self.grid.t0 != 0:
                raise ValueError("task 'price-defaultable-put' needs grid.t0 = 0")
        if name == 'price-zcb' and self.task.maturities is not None:
            if any(T <= self.grid.t0 for T in self.task.maturities):
                raise ValueError("task.maturities must lie after grid.t0")
        return self


def format_validation_error(exc: ValidationError) -> str:
    """One line per error, each naming the offending key path."""
    lines = []
    for err in exc.errors():
        where = '.'.join(str(part) for part in err['loc']) or '<root>'
        lines.append(f"{where}: {err['msg']}")
    return '; '.join(lines)


def load_config(path) -> ExperimentConfig:
    """
    Read and validate an experiment config.

    Raises:
        FileNotFoundError: If the file does not exist
        json.JSONDecodeError: If it is not valid JSON
        pydantic.ValidationError: On unknown keys or invalid values
    """
    with open(Path(path), 'r') as f:
        data = json.load(f)
    return ExperimentConfig.model_validate(data)


def config_hash(config: ExperimentConfig) -> str:
    """Hash of the canonical (sorted, defaults filled) config, 12 hex digits."""
    canonical = json.dumps(config.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:12]
