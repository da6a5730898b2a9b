"""
Run-config schemas for every mtl-lab subcommand

A run config is one YAML mapping: the global keys `seed`, `threads` and
`output` plus the subcommand's own keys. Unknown keys are rejected.
"""
import hashlib
import json
from pathlib import Path
from typing import Annotated, Dict, List, Literal, Optional, Tuple, Type, Union

import yaml
from pydantic import AfterValidator, BaseModel, ConfigDict, Field, field_validator, model_validator

from config import Config
from balancing import STRATEGIES
from distill import OPERATORS, check_param_names


class _Params(BaseModel):
    model_config = ConfigDict(extra='forbid')


def _existing(path: str) -> str:
    if not Path(path).exists():
        raise ValueError(f"input file not found: {path}")
    return path


InputPath = Annotated[str, AfterValidator(_existing)]


class AffinityParams(_Params):
    tasks: List[str] = Field(min_length=1, description="task order of the affinity tensor")
    locations: List[str] = Field(min_length=1, description="location labels, one per feature dump")
    features: Dict[str, List[str]] = Field(description="task -> MTKT feature dump per location (K rows each)")
    num_images: int = Field(Config.NUM_IMAGES, ge=3, description="K: leading rows used from each dump")

    @model_validator(mode='after')
    def _check_features(self):
        for task in self.tasks:
            if task not in self.features:
                raise ValueError(f"features: no entry for task {task!r}")
            if len(self.features[task]) != len(self.locations):
                raise ValueError(f"features.{task}: expected {len(self.locations)} paths")
            for path in self.features[task]:
                _existing(path)
        extra = set(self.features) - set(self.tasks)
        if extra:
            raise ValueError(f"features: unknown task(s) {sorted(extra)}")
        return self


class BranchSearchParams(_Params):
    affinity: InputPath = Field(description="MTKT affinity tensor, D x N x N")
    tasks: Optional[List[str]] = Field(None, description="task names (default t0..tN-1)")
    locations: Optional[List[str]] = Field(None, description="location labels (default 0..D-1)")
    shared_costs: List[float] = Field(min_length=1, description="resource p_l of one branch at each location")
    decoder_costs: List[float] = Field(min_length=1, description="resource of each task decoder")
    budget: float = Field(ge=0, description="resource cap C")

    @field_validator('shared_costs', 'decoder_costs')
    @classmethod
    def _non_negative(cls, v):
        if any(c < 0 for c in v):
            raise ValueError("costs must be non-negative")
        return v


class BalanceParams(_Params):
    trace: InputPath = Field(description="trace CSV with header iter,task,loss,grad_norm")
    strategy: Literal[STRATEGIES] = Field('fixed', description="|".join(STRATEGIES))
    weights: Optional[List[float]] = Field(None, description="fixed weights / GradNorm start weights")
    temperature: float = Field(Config.DWA_TEMPERATURE, gt=0, description="DWA temperature T")
    sigmas: Optional[List[float]] = Field(None, description="uncertainty sigmas (default sigma^2 = L)")
    learning_rate: float = Field(Config.GRADNORM_LR, gt=0, description="GradNorm weight step size")
    kpis: Optional[str] = Field(None, description="DTP KPI CSV with header iter,task,kpi")
    gamma: Union[float, List[float]] = Field(1.0, description="DTP focusing parameter(s)")
    window: int = Field(1, ge=1, description="periodic: trailing window length")
    every: int = Field(1, ge=1, description="periodic: refresh period")
    importance: Optional[Dict[str, float]] = Field(None, description="task -> importance factor")
    groups: Optional[Dict[str, str]] = Field(None, description="magnitude: task -> loss group")
    gradients: Optional[str] = Field(None, description="MGDA: MTKT gradient tensor [T, N, P]")

    @model_validator(mode='after')
    def _strategy_inputs(self):
        if self.strategy == 'dtp' and self.kpis is None:
            raise ValueError("kpis: required by the dtp strategy")
        if self.strategy == 'mgda' and self.gradients is None:
            raise ValueError("gradients: required by the mgda strategy")
        for name in ('kpis', 'gradients'):
            value = getattr(self, name)
            if value is not None:
                _existing(value)
        return self


class DeltaMtlParams(_Params):
    model: InputPath = Field(description="metric CSV of the multi-task model (task,metric,lower_is_better)")
    baseline: InputPath = Field(description="metric CSV of the single-task baselines")


class PixelMapSpec(_Params):
    path: InputPath = Field(description="MTKT label map [H, W]")
    kind: Literal['categorical', 'continuous', 'edge'] = 'categorical'
    threshold: float = Field(Config.RELATIVE_THRESHOLD, gt=0, description="relative threshold (continuous)")
    binarize: float = Field(0.5, description="edge binarization level (edge)")


class PixelAffinityParams(_Params):
    maps: Dict[str, PixelMapSpec] = Field(min_length=1, description="task -> label map spec")
    radius: int = Field(Config.AFFINITY_RADIUS, ge=1, description="window radius r")
    dilations: List[int] = Field([1, 2, 4, 8], min_length=1, description="kernel dilations to sweep")

    @field_validator('dilations')
    @classmethod
    def _positive(cls, v):
        if any(d < 1 for d in v):
            raise ValueError("dilations must be >= 1")
        return v


class ContrastiveCheckParams(_Params):
    instances: int = Field(200, ge=1, description="random instances per loss")
    dim: int = Field(8, ge=1, description="embedding dimension")
    queue_size: int = Field(16, ge=1, description="negatives / queue entries per instance")
    temperature: float = Field(Config.TEMPERATURE, gt=0, description="temperature tau")
    epsilon: float = Field(1e-6, gt=0, description="central-difference step")
    tolerance: float = Field(1e-4, gt=0, description="largest accepted relative error")


class CropStatsParams(_Params):
    width: int = Field(640, ge=1, description="source width W")
    height: int = Field(480, ge=1, description="source height H")
    scale_range: Tuple[float, float] = Field(Config.TWO_CROP_SCALE, description="area fraction range")
    aspect_range: Tuple[float, float] = Field(Config.ASPECT_RANGE, description="aspect ratio range")
    threshold: Optional[float] = Field(None, description="IoU cap; pairs at or above it are redrawn")
    samples: int = Field(10000, ge=1, description="accepted pairs to record")
    bins: int = Field(Config.IOU_BINS, ge=1, description="histogram bins over [0, 1]")


class DistillCheckParams(_Params):
    operator: Literal[OPERATORS] = Field('padnet', description="|".join(OPERATORS))
    tasks: int = Field(2, ge=1, description="task count N (random features)")
    channels: int = Field(2, ge=1, description="channels C (random features)")
    height: int = Field(4, ge=1, description="feature height (random features)")
    width: int = Field(4, ge=1, description="feature width (random features)")
    scales: int = Field(1, ge=1, description="scale count S (mtinet)")
    kernel_size: Literal[1, 3] = Field(1, description="attention kernel size")
    features: Optional[List[str]] = Field(None, description="MTKT stacks N x C x H x W, one per scale")
    params: Optional[Dict[str, str]] = Field(None, description="parameter name -> MTKT path")

    @model_validator(mode='after')
    def _inputs(self):
        if self.params is not None:
            try:
                check_param_names(self.operator, self.params)
            except ValueError as e:
                raise ValueError(f"params: {e}") from None
        for path in (self.features or []) + list((self.params or {}).values()):
            _existing(path)
        return self


COMMANDS: Dict[str, Type[_Params]] = {
    'affinity': AffinityParams,
    'branch-search': BranchSearchParams,
    'balance': BalanceParams,
    'delta-mtl': DeltaMtlParams,
    'pixel-affinity': PixelAffinityParams,
    'contrastive-check': ContrastiveCheckParams,
    'crop-stats': CropStatsParams,
    'distill-check': DistillCheckParams,
}


class RunConfig(BaseModel):
    """Subcommand, reproducibility settings and the validated parameters"""

    model_config = ConfigDict(extra='forbid')

    command: Literal[tuple(COMMANDS)]
    seed: int = Field(Config.DEFAULT_SEED, ge=0, lt=2 ** 64)
    threads: int = Field(Config.THREADS, ge=1)
    output: str = Config.OUTPUT_DIR
    params: _Params

    @classmethod
    def build(cls, command: str, raw: Optional[dict] = None, seed: Optional[int] = None,
              threads: Optional[int] = None, output: Optional[str] = None) -> 'RunConfig':
        """Merge a raw mapping with flag overrides; flags win"""
        raw = dict(raw or {})
        merged = {
            'seed': seed if seed is not None else raw.pop('seed', Config.DEFAULT_SEED),
            'threads': threads if threads is not None else raw.pop('threads', Config.THREADS),
            'output': output if output is not None else raw.pop('output', Config.OUTPUT_DIR),
        }
        for key in ('seed', 'threads', 'output'):
            raw.pop(key, None)
        params = COMMANDS[command].model_validate(raw)
        return cls(command=command, params=params, **merged)

    def digest(self) -> str:
        """sha256 of the canonical JSON of everything except the output directory"""
        body = {
            'command': self.command,
            'seed': self.seed,
            'threads': self.threads,
            'params': self.params.model_dump(mode='json'),
        }
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode('utf-8')).hexdigest()

    def metadata(self) -> Dict[str, object]:
        return {
            'tool': Config.TOOL_NAME,
            'version': Config.TOOL_VERSION,
            'command': self.command,
            'seed': self.seed,
            'config_sha256': self.digest(),
        }


def load_config_file(path: Optional[str]) -> dict:
    """Read a YAML run config; an absent path means an empty mapping"""
    if path is None:
        return {}
    with open(path, 'r', encoding='utf-8') as f:
        data = yaml.safe_load(f)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: run config must be a mapping")
    return data


def schema_help(command: str) -> str:
    """One line per config key: name, type, default and description"""
    lines = ["Config keys (YAML):", "  seed, threads, output  (global; flags override)"]
    for name, info in COMMANDS[command].model_fields.items():
        annotation = getattr(info.annotation, '__name__', None) or str(info.annotation).replace('typing.', '')
        default = 'required' if info.is_required() else f"default {info.default!r}"
        desc = f"  {info.description}" if info.description else ''
        lines.append(f"  {name}: {annotation} ({default}){desc}")
    return '\n'.join(lines)
