"""
Experiment plans: JSON files describing model, training, sequence and evaluation
settings, loaded into dataclasses. Missing keys take defaults, unknown keys are
rejected.
"""
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

from batchgenerators.utilities.file_and_folder_operations import isfile, load_json, save_json

from src.utilities.exceptions import ConfigError

TOY_CHANNELS = (8, 12, 16)
FULL_CHANNELS = (48, 64, 96)

# frames per sample -> number of PCFS groups
FINETUNE_SCHEDULE_PRESET = {6: 1, 20: 1, 38: 2, 55: 3}
LAMBDA_LADDER_PSNR = (85.0, 170.0, 380.0, 840.0)
LAMBDA_LADDER_MSSSIM = (7.68, 15.36, 30.72, 61.44)

CONTEXT_MODES = ('base', 'nlc', 'mnlc')
STRATEGIES = ('cascaded', 'pcfs', 'pcfs-shifted')
DISTORTIONS = ('mse', 'ms-ssim')
SEQUENCE_KINDS = ('translation', 'fast_motion', 'static', 'repeated_motif', 'file')

SEED_ENV_VAR = 'NLVC_SEED'


@dataclass
class ModelConfig:
    channels: Tuple[int, ...] = TOY_CHANNELS
    latent_channels: int = 16
    num_heads: int = 4
    offset_groups: int = 4
    max_residue_magnitude: float = 2.0
    context_mode: str = 'mnlc'
    leaky_slope: float = 0.01
    motion_bits_per_pixel: float = 0.0
    intra_quality: int = 2
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError(f"channels must be three positive ints, got {self.channels}")
        for c in self.channels:
            if c % self.num_heads != 0:
                raise ConfigError(f"Channel count {c} not divisible by num_heads {self.num_heads}")
        if self.context_mode not in CONTEXT_MODES:
            raise ConfigError(f"context_mode must be one of {CONTEXT_MODES}, got {self.context_mode}")
        if self.offset_groups < 1 or self.latent_channels < 1:
            raise ConfigError("offset_groups and latent_channels must be positive")
        if not 0 <= self.intra_quality <= 7:
            raise ConfigError(f"intra_quality must be in [0, 7], got {self.intra_quality}")


@dataclass
class TrainConfig:
    lmbda: float = 256.0
    frames: int = 6
    groups: Optional[List[int]] = None
    num_groups: int = 1
    learning_rate: float = 1e-3
    steps: int = 200
    strategy: str = 'pcfs'
    distortion: str = 'mse'
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.lmbda < 0 or self.learning_rate <= 0:
            raise ConfigError(f"lambda must be >= 0 and learning rate > 0, got {self.lmbda}, {self.learning_rate}")
        if self.frames < 1 or self.steps < 0:
            raise ConfigError(f"frames must be >= 1 and steps >= 0, got {self.frames}, {self.steps}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy}")
        if self.distortion not in DISTORTIONS:
            raise ConfigError(f"distortion must be one of {DISTORTIONS}, got {self.distortion}")
        if self.groups is None:
            self.groups = equal_group_boundaries(self.frames, self.num_groups)
        self.groups = [int(b) for b in self.groups]
        validate_group_boundaries(self.groups, self.frames)
        self.num_groups = len(self.groups) - 1


@dataclass
class SequenceSpec:
    kind: str = 'translation'
    height: int = 32
    width: int = 32
    frames: int = 8
    velocity: Optional[Tuple[float, float]] = None
    noise_std: float = 0.0
    motif_grid: int = 3
    motif_radius: float = 6.0
    motif_jitter: float = 2.0
    fps: float = 30.0
    path: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEQUENCE_KINDS:
            raise ConfigError(f"Sequence kind must be one of {SEQUENCE_KINDS}, got {self.kind}")
        if self.kind == 'file' and not self.path:
            raise ConfigError("Sequence kind 'file' needs a path")
        if self.motif_grid < 1 or self.motif_radius <= 0 or self.motif_jitter < 0:
            raise ConfigError("motif_grid and motif_radius must be positive, motif_jitter non-negative")
        if self.height < 4 or self.width < 4 or self.frames < 1:
            raise ConfigError(f"Invalid sequence size {self.frames} x {self.height} x {self.width}")
        if self.velocity is not None:
            self.velocity = (float(self.velocity[0]), float(self.velocity[1]))


@dataclass
class EvalConfig:
    intra_period: int = -1
    verify: bool = True
    max_psnr: float = 99.0


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sequence: SequenceSpec = field(default_factory=SequenceSpec)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    output_folder: str = 'nlvc_results'

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def equal_group_boundaries(frames: int, num_groups: int) -> List[int]:
    """[0, t_1, ..., frames] with group sizes differing by at most one."""
    if num_groups < 1 or num_groups > frames:
        raise ConfigError(f"Cannot split {frames} frames into {num_groups} groups")
    base, extra = divmod(frames, num_groups)
    boundaries = [0]
    for j in range(num_groups):
        boundaries.append(boundaries[-1] + base + (1 if j < extra else 0))
    return boundaries


def validate_group_boundaries(groups: Sequence[int], frames: int):
    if len(groups) < 2 or groups[0] != 0 or groups[-1] != frames:
        raise ConfigError(f"Group boundaries must start at 0 and end at {frames}, got {list(groups)}")
    if any(b <= a for a, b in zip(groups, groups[1:])):
        raise ConfigError(f"Group boundaries must be strictly increasing, got {list(groups)}")


def shifted_group_boundaries(groups: Sequence[int]) -> List[int]:
    """Interior boundaries moved forward by half the first group's length."""
    shift = max(1, (groups[1] - groups[0]) // 2)
    frames = groups[-1]
    inner = sorted({min(frames - 1, b + shift) for b in groups[1:-1]})
    out = [0] + [b for b in inner if 0 < b < frames] + [frames]
    validate_group_boundaries(out, frames)
    return out


def finetune_schedule(preset: Dict[int, int] = None) -> List[Tuple[int, int]]:
    preset = FINETUNE_SCHEDULE_PRESET if preset is None else preset
    return sorted(preset.items())


def lambda_ladder(distortion: str) -> Tuple[float, ...]:
    if distortion == 'mse':
        return LAMBDA_LADDER_PSNR
    if distortion == 'ms-ssim':
        return LAMBDA_LADDER_MSSSIM
    raise ConfigError(f"Unknown distortion {distortion}")


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(',', ':'), default=list)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def _build(cls, values: Optional[dict]):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"Invalid {cls.__name__}: {e}") from e


def config_from_dict(plan: dict) -> ExperimentConfig:
    unknown = set(plan) - {'model', 'train', 'sequence', 'evaluation', 'output_folder'}
    if unknown:
        raise ConfigError(f"Unknown plan sections: {sorted(unknown)}")
    config = ExperimentConfig(
        model=_build(ModelConfig, plan.get('model')),
        train=_build(TrainConfig, plan.get('train')),
        sequence=_build(SequenceSpec, plan.get('sequence')),
        evaluation=_build(EvalConfig, plan.get('evaluation')),
        output_folder=plan.get('output_folder', 'nlvc_results'),
    )
    return apply_seed_override(config)


def apply_seed_override(config: ExperimentConfig) -> ExperimentConfig:
    seed = os.environ.get(SEED_ENV_VAR)
    if seed is not None:
        try:
            seed = int(seed)
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {seed!r}") from e
        config.model.seed = seed
        config.train.seed = seed
        config.sequence.seed = seed
    return config


def load_experiment_config(path: str) -> ExperimentConfig:
    if not isfile(path):
        raise ConfigError(f"Plans file not found: {path}")
    try:
        plan = load_json(path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Plans file is not valid JSON: {path} ({e})") from e
    return config_from_dict(plan)


def save_experiment_config(config: ExperimentConfig, path: str):
    save_json(config.to_dict(), path, sort_keys=True)
