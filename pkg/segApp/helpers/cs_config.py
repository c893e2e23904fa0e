"""
Run configuration: pydantic models, TOML loading, named profiles and dotted overrides.

Precedence (lowest first): model defaults -> profile -> TOML file -> --set overrides.
Validation failures are re-raised as ConfigurationError carrying the dotted field
path, e.g. ``model.dim: Value error, dim must be divisible by heads``.
"""

import copy
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, Literal, Optional

import toml
from django.conf import settings
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from segApp.helpers.cs_errors import ConfigurationError

logger = logging.getLogger(__name__)

DEFAULT_PROMPT = 'Identify all nonredundant classes of objects you can see'

ShapeFamily = Literal['circle', 'rectangle', 'triangle', 'striped-background', 'gradient-background']
Precision = Literal['float32', 'float64']
ReweightVariant = Literal['exp', 'linear', 'quadratic', 'normalized-exp', 'none']
InferenceMode = Literal['vocabulary-free', 'open-vocabulary']


class _Config(BaseModel):
    model_config = ConfigDict(extra='forbid', validate_assignment=True)


class SceneConfig(_Config):
    height: int = Field(32, ge=8)
    width: int = Field(32, ge=8)
    max_objects: int = Field(3, ge=1)
    # category_id -> shape family; categories left out use their vocabulary default
    shape_palette: Dict[int, ShapeFamily] = Field(default_factory=dict)
    noise_std: float = Field(0.02, ge=0.0)
    seed: int = 0
    include_unseen: bool = True


class TextEncoderSpec(_Config):
    mode: Literal['synthetic-hash', 'lookup-table', 'external-adapter'] = 'synthetic-hash'
    dim: int = 256
    seed: int = 0
    # JSON label -> vector file for lookup-table / external-adapter modes
    embedding_file: Optional[str] = None
    # dotted path to a callable(labels) -> (n, dim) array, external-adapter mode only
    adapter: Optional[str] = None

    @field_validator('dim')
    @classmethod
    def _even_dim(cls, value):
        if value < 4 or value % 2:
            raise ValueError('dim must be even and at least 4')
        return value


class ModelConfig(_Config):
    dim: int = 256
    heads: int = Field(8, ge=1)
    num_queries: int = Field(100, ge=1)
    enhancer_layers: int = Field(6, ge=1)
    decoder_layers: int = Field(9, ge=1)
    sampling_points: int = Field(4, ge=1)
    ffn_dim: Optional[int] = Field(None, ge=1)
    backbone_width: Optional[int] = Field(None, ge=1)
    backbone_stages: int = Field(2, ge=2, le=4)
    enhancer_mode: Literal['cave', 'plain'] = 'cave'
    dsa_mode: Literal['deformable', 'dense'] = 'deformable'
    concept_step: bool = True
    share_cross_attention: bool = True
    dual_scale: bool = False
    pos_embedding: bool = True
    query_init_std: float = Field(0.02, gt=0.0)
    temperature_init: float = Field(0.07, gt=0.0)

    @model_validator(mode='after')
    def _heads_divide_dim(self):
        if self.dim < 4 or self.dim % 2:
            raise ValueError('dim must be even and at least 4')
        if self.dim % self.heads:
            raise ValueError(f'dim ({self.dim}) must be divisible by heads ({self.heads})')
        return self

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim or 2 * self.dim

    @property
    def stride(self) -> int:
        return 4


class TrainConfig(_Config):
    lambda_cls: float = Field(2.0, ge=0.0)
    lambda_pixel: float = Field(5.0, ge=0.0)
    lambda_dice: float = Field(5.0, ge=0.0)
    learning_rate: float = Field(1e-4, gt=0.0)
    weight_decay: float = Field(0.05, ge=0.0)
    epochs: int = Field(1, ge=0)
    max_steps: Optional[int] = Field(None, ge=0)
    batch_size: int = Field(2, ge=1)
    seed: int = 0
    precision: Precision = 'float32'
    aux_supervision: bool = True
    rematch_aux_layers: bool = False
    freeze_backbone: bool = True
    no_object_weight: float = Field(0.1, ge=0.0)
    log_every: int = Field(10, ge=1)

    @model_validator(mode='after')
    def _some_loss_term(self):
        if self.lambda_cls + self.lambda_pixel + self.lambda_dice <= 0.0:
            raise ValueError('loss weights must not all be zero')
        return self


class InferenceConfig(_Config):
    mode: InferenceMode = 'open-vocabulary'
    reweight: ReweightVariant = 'exp'
    object_threshold: float = Field(0.8, gt=0.0, le=1.0)
    overlap_threshold: float = Field(0.8, gt=0.0, le=1.0)
    min_area: int = Field(4, ge=0)


class ConceptProviderSpec(_Config):
    kind: Literal['oracle', 'noisy-oracle', 'scripted', 'live'] = 'oracle'
    path: Optional[str] = None
    url: Optional[str] = None
    prompt: str = DEFAULT_PROMPT
    max_in_flight: int = Field(4, ge=1)
    timeout_seconds: float = Field(10.0, gt=0.0)
    drop_rate: float = Field(0.0, ge=0.0, le=1.0)
    false_positive_rate: float = Field(0.0, ge=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode='after')
    def _source_present(self):
        if self.kind == 'scripted' and not self.path:
            raise ValueError('scripted providers need a concept file path')
        if self.kind == 'live' and not self.url:
            raise ValueError('live providers need a url')
        return self


class DatasetConfig(_Config):
    train_scenes: int = Field(20, ge=1)
    eval_scenes: int = Field(10, ge=1)
    seen_things: int = Field(4, ge=1)
    unseen_things: int = Field(2, ge=0)
    seen_stuff: int = Field(2, ge=1)
    unseen_stuff: int = Field(1, ge=0)
    train_dir: Optional[str] = None
    eval_dir: Optional[str] = None


class ClusterConfig(_Config):
    k: int = Field(4, ge=1)
    max_images: int = Field(2, ge=1)
    n_init: int = Field(10, ge=1)


class RunConfig(_Config):
    profile: Literal['full', 'desk'] = 'full'
    seed: int = 0
    output_dir: str = 'conceptseg-run'
    checkpoint: Optional[str] = None
    model: ModelConfig = Field(default_factory=ModelConfig)
    text_encoder: TextEncoderSpec = Field(default_factory=TextEncoderSpec)
    data: DatasetConfig = Field(default_factory=DatasetConfig)
    scene: SceneConfig = Field(default_factory=SceneConfig)
    concepts: ConceptProviderSpec = Field(default_factory=ConceptProviderSpec)
    train_concepts: ConceptProviderSpec = Field(default_factory=ConceptProviderSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    cluster: ClusterConfig = Field(default_factory=ClusterConfig)

    @model_validator(mode='after')
    def _shared_embedding_space(self):
        if self.text_encoder.dim != self.model.dim:
            raise ValueError(
                f'text_encoder.dim ({self.text_encoder.dim}) must equal model.dim ({self.model.dim})'
            )
        return self


PROFILES = {
    'full': {},
    'desk': {
        'model': {
            'dim': 32,
            'heads': 4,
            'num_queries': 10,
            'enhancer_layers': 2,
            'decoder_layers': 3,
        },
        'text_encoder': {'dim': 32},
        'train': {'learning_rate': 1e-3, 'epochs': 300, 'batch_size': 4, 'weight_decay': 0.0},
    },
}


def _deep_merge(base: dict, update: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _parse_override_value(raw: str):
    """Parse an override value with TOML literal rules, falling back to a bare string."""
    try:
        return toml.loads(f'value = {raw}')['value']
    except toml.TomlDecodeError:
        return raw


def parse_overrides(overrides: Iterable[str]) -> dict:
    """Turn ``a.b.c=value`` strings into a nested dict."""
    nested: dict = {}
    for item in overrides or ():
        if '=' not in item:
            raise ConfigurationError(f"Override '{item}' must look like dotted.path=value")
        path, raw = item.split('=', 1)
        keys = [k for k in path.strip().split('.') if k]
        if not keys:
            raise ConfigurationError(f"Override '{item}' has an empty path")
        cursor = nested
        for key in keys[:-1]:
            cursor = cursor.setdefault(key, {})
        cursor[keys[-1]] = _parse_override_value(raw.strip())
    return nested


def format_validation_error(error: ValidationError, prefix: str = '') -> str:
    parts = []
    for item in error.errors():
        loc = '.'.join(str(p) for p in item.get('loc', ()))
        if prefix:
            loc = f'{prefix}.{loc}' if loc else prefix
        parts.append(f"{loc or '<root>'}: {item.get('msg')}")
    return '; '.join(parts)


def check_config(config: BaseModel, name: str = ''):
    """Re-validate a config object (it may have been built with model_construct)."""
    try:
        return type(config).model_validate(config.model_dump())
    except ValidationError as e:
        raise ConfigurationError(format_validation_error(e, prefix=name)) from e


def load_run_config(path=None, overrides: Iterable[str] = (), profile: Optional[str] = None) -> RunConfig:
    """
    Build a validated RunConfig.

    Args:
        path: Optional TOML file.
        overrides: ``dotted.path=value`` strings applied last.
        profile: Profile name; otherwise taken from overrides, then the file, then 'full'.

    Raises:
        ConfigurationError: Unreadable file, unknown profile or invalid field (with path).
    """
    file_data: dict = {}
    if path is not None:
        try:
            file_data = toml.load(str(path))
        except (OSError, toml.TomlDecodeError) as e:
            raise ConfigurationError(f"{path}: cannot read run config ({e})") from e

    override_data = parse_overrides(overrides)
    chosen = profile or override_data.get('profile') or file_data.get('profile') or 'full'
    if chosen not in PROFILES:
        raise ConfigurationError(f"profile: unknown profile '{chosen}' (choose from {sorted(PROFILES)})")

    merged = _deep_merge(PROFILES[chosen], file_data)
    merged = _deep_merge(merged, override_data)
    merged['profile'] = chosen
    try:
        config = RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigurationError(format_validation_error(e)) from e
    logger.debug(f"Loaded run config (profile={chosen}, hash={config_hash(config)[:12]})")
    return config


def config_hash(config: BaseModel) -> str:
    payload = json.dumps(config.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()


def resolve_output_dir(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    if not out.is_absolute():
        out = Path(settings.CONCEPTSEG_OUTPUT_ROOT) / out
    return out


def logit_scale_from_temperature(temperature: float) -> float:
    return math.log(1.0 / temperature)
