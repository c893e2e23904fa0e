"""
Embedding providers standing in for the frozen discriminative VLM.

encode_text   - category labels -> unit-norm embedding table (synthetic-hash,
                lookup-table or external-adapter mode)
ToyBackbone   - small conv stack producing the global visual grid V_g at stride 4
encode_image  - one image through a backbone -> FeatureGrid
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from django.core.exceptions import ValidationError
from django.utils.module_loading import import_string

from segApp.helpers.cs_config import TextEncoderSpec, check_config
from segApp.helpers.cs_errors import ConfigurationError, DatasetParseError, NumericalError
from segApp.helpers.cs_types import SceneImage, normalize_label

logger = logging.getLogger(__name__)

UNIT_NORM_TOLERANCE = 1e-6
BACKBONE_STRIDE = 4


@dataclass
class CategoryEmbeddingTable:
    """One unit-norm row per label, in label order."""
    vectors: np.ndarray
    labels: List[str]
    spec: Optional[TextEncoderSpec] = field(default=None, compare=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValidationError(f"Embedding table must be n x D with n >= 1, got {self.vectors.shape}")
        if len(self.labels) != self.vectors.shape[0]:
            raise ValidationError("Embedding table rows and labels differ in length")
        norms = np.linalg.norm(self.vectors, axis=1)
        if not np.all(np.abs(norms - 1.0) <= UNIT_NORM_TOLERANCE):
            raise ValidationError("Embedding table rows must have unit L2 norm")

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def subset(self, indices: Sequence[int]) -> 'CategoryEmbeddingTable':
        indices = list(indices)
        return CategoryEmbeddingTable(self.vectors[indices], [self.labels[i] for i in indices], self.spec)

    def as_tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.as_tensor(self.vectors, dtype=dtype, device=device)


@dataclass
class FeatureGrid:
    """H' x W' x D features at ``stride`` relative to the input image."""
    features: torch.Tensor
    stride: int = BACKBONE_STRIDE

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ValidationError(f"FeatureGrid must be H' x W' x D, got {tuple(self.features.shape)}")
        if not torch.isfinite(self.features).all():
            raise NumericalError("FeatureGrid contains non-finite values", component='feature_grid')

    @property
    def height(self) -> int:
        return int(self.features.shape[0])

    @property
    def width(self) -> int:
        return int(self.features.shape[1])

    @property
    def dim(self) -> int:
        return int(self.features.shape[2])

    def numpy(self) -> np.ndarray:
        return self.features.detach().cpu().numpy()


def normalize_rows(vectors: np.ndarray, source: str = 'embedding') -> np.ndarray:
    """L2-normalize rows; idempotent on unit rows."""
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(vectors)):
        raise NumericalError(f"Cannot normalize zero or non-finite {source} vectors", component=source)
    return vectors / norms


def _hash_vector(label: str, seed: int, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{label}".encode('utf-8')).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], 'little'))
    return rng.standard_normal(dim)


def load_embedding_file(path, dim: int) -> Dict[str, np.ndarray]:
    """
    Read a JSON ``label -> vector`` file; keys are normalized, vectors re-normalized.

    Raises:
        DatasetParseError: Missing/corrupt file or a vector of the wrong length.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetParseError(path, f'cannot read embedding file ({e})') from e
    if not isinstance(raw, dict):
        raise DatasetParseError(path, 'embedding file must map label -> vector')
    table = {}
    for label, vector in raw.items():
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (dim,):
            raise DatasetParseError(path, f"vector for '{label}' has shape {vec.shape}, expected ({dim},)")
        table[normalize_label(label)] = normalize_rows(vec[None, :], source='embedding file')[0]
    return table


def encode_text(labels: Sequence[str], spec: TextEncoderSpec) -> CategoryEmbeddingTable:
    """
    Encode labels into a CategoryEmbeddingTable.

    Args:
        labels: Non-empty list of non-blank labels (normalized before encoding).
        spec: Encoder mode, dimension and seed.

    Raises:
        ValidationError: Empty list, blank label, or label missing from a lookup table.
        ConfigurationError: Invalid spec or adapter output of the wrong width.
    """
    spec = check_config(spec, name='text_encoder')
    if not labels:
        raise ValidationError("encode_text needs at least one label")
    keys = [normalize_label(label) for label in labels]
    if any(not key for key in keys):
        raise ValidationError("Labels must be non-blank")

    if spec.mode == 'synthetic-hash':
        rows = np.stack([_hash_vector(key, spec.seed, spec.dim) for key in keys])
    elif spec.mode == 'lookup-table' or (spec.mode == 'external-adapter' and not spec.adapter):
        if not spec.embedding_file:
            raise ConfigurationError(f"text_encoder.embedding_file is required in {spec.mode} mode")
        lookup = load_embedding_file(spec.embedding_file, spec.dim)
        missing = [key for key in keys if key not in lookup]
        if missing:
            raise ValidationError(f"Labels {missing} missing from embedding file {spec.embedding_file}")
        rows = np.stack([lookup[key] for key in keys])
    else:
        try:
            adapter = import_string(spec.adapter)
        except ImportError as e:
            raise ConfigurationError(f"text_encoder.adapter: cannot import '{spec.adapter}' ({e})") from e
        rows = np.asarray(adapter(keys), dtype=np.float64)
        if rows.shape != (len(keys), spec.dim):
            raise ConfigurationError(
                f"text_encoder.adapter returned shape {rows.shape}, expected ({len(keys)}, {spec.dim})"
            )

    return CategoryEmbeddingTable(normalize_rows(rows, source='text'), list(labels), spec)


def sine_position_embedding(height: int, width: int, dim: int, dtype=torch.float32,
                            temperature: float = 10000.0) -> torch.Tensor:
    """2-D sine/cosine position table (H, W, dim), half the channels per axis."""
    quarter = dim // 4
    if quarter == 0:
        return torch.zeros(height, width, dim, dtype=dtype)
    scale = 2 * math.pi
    y = (torch.arange(height, dtype=torch.float64) + 0.5) / height * scale
    x = (torch.arange(width, dtype=torch.float64) + 0.5) / width * scale
    freqs = temperature ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    pos_y = y[:, None] / freqs[None, :]
    pos_x = x[:, None] / freqs[None, :]
    emb_y = torch.cat([pos_y.sin(), pos_y.cos()], dim=-1)
    emb_x = torch.cat([pos_x.sin(), pos_x.cos()], dim=-1)
    table = torch.zeros(height, width, dim, dtype=torch.float64)
    table[:, :, :2 * quarter] = emb_y[:, None, :]
    table[:, :, 2 * quarter:4 * quarter] = emb_x[None, :, :]
    return table.to(dtype)


class ToyBackbone(nn.Module):
    """
    2-4 stages of 3x3 conv -> GELU; the first two stages halve the resolution,
    so the output grid sits at stride 4. A 1x1 projection maps to the shared dim D.
    With ``dual_scale`` an extra stride-2 conv yields a stride-8 grid as well.
    """

    def __init__(self, dim: int, width: Optional[int] = None, stages: int = 2, dual_scale: bool = False):
        super().__init__()
        if not 2 <= stages <= 4:
            raise ConfigurationError(f"backbone stages must be 2..4, got {stages}")
        width = width or dim
        self.dim = dim
        self.dual_scale = dual_scale
        layers = []
        in_channels = 3
        for stage in range(stages):
            layers.append(nn.Conv2d(in_channels, width, kernel_size=3, stride=2 if stage < 2 else 1, padding=1))
            layers.append(nn.GELU())
            in_channels = width
        self.stages = nn.Sequential(*layers)
        self.proj = nn.Conv2d(width, dim, kernel_size=1)
        self.coarse = nn.Conv2d(dim, dim, kernel_size=3, stride=2, padding=1) if dual_scale else None

    @property
    def stride(self) -> int:
        return BACKBONE_STRIDE

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad_(True)
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def forward(self, pixels: torch.Tensor):
        """
        Args:
            pixels: (B, H, W, 3) in [0, 1].

        Returns:
            (fine, coarse): (B, H/4, W/4, D) and the stride-8 grid or None.
        """
        x = pixels.permute(0, 3, 1, 2) - 0.5
        fine = self.proj(self.stages(x))
        coarse = self.coarse(fine).permute(0, 2, 3, 1) if self.coarse is not None else None
        return fine.permute(0, 2, 3, 1), coarse


def images_to_tensor(images: Sequence[SceneImage], dtype=torch.float32, device=None) -> torch.Tensor:
    shapes = {img.pixels.shape for img in images}
    if len(shapes) != 1:
        raise ValidationError(f"Batched images must share a size, got {sorted(shapes)}")
    return torch.as_tensor(np.stack([img.pixels for img in images]), dtype=dtype, device=device)


def encode_image(image: SceneImage, backbone: ToyBackbone, dim: Optional[int] = None) -> FeatureGrid:
    """
    Run one image through the backbone.

    Raises:
        ConfigurationError: ``dim`` given and different from the backbone's output dim.
    """
    if dim is not None and dim != backbone.dim:
        raise ConfigurationError(f"Backbone dim {backbone.dim} does not match model dim {dim}")
    dtype = next(backbone.parameters()).dtype
    pixels = images_to_tensor([image], dtype=dtype)
    with torch.set_grad_enabled(torch.is_grad_enabled() and not backbone.frozen):
        fine, _ = backbone(pixels)
    return FeatureGrid(features=fine[0], stride=backbone.stride)
