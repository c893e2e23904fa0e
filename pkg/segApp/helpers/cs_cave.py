"""
Concept-aware visual enhancer.

Each of the N layers runs, with pre-norm residual wrapping:
    T2I  member concepts of image b attend to image b's grid (per image)
    TF   text feed-forward on member concept rows
    I2T  grid attends to concepts under the additive mask matrix (B x m, 0 / -inf)
    IF   image feed-forward
    DSA  deformable (or dense) self-attention over the grid

Concepts are carried as a per-image stream (B, m, D): rows of categories an image
does not contain are never updated for that image and never receive attention
weight from it, so nothing leaks between images of a batch.
"""

import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Set

import torch
import torch.nn as nn
import torch.nn.functional as F
from django.core.exceptions import ValidationError

from segApp.helpers.cs_embeddings import CategoryEmbeddingTable, FeatureGrid
from segApp.helpers.cs_errors import DegenerateSoftmaxError, NumericalError

NEG_INF = float('-inf')


def check_attention_mask(mask: torch.Tensor):
    """Entries must be 0 or -inf and every query row must keep at least one key."""
    if not torch.all((mask == 0) | (mask == NEG_INF)):
        raise ValidationError("Attention mask entries must be 0 or -inf")
    if mask.shape[-1] == 0 or torch.any(torch.all(mask == NEG_INF, dim=-1)):
        raise DegenerateSoftmaxError("Attention row has every key masked out", component='attention')


class MaskedCrossAttention(nn.Module):
    """
    Multi-head scaled dot-product attention with an additive mask applied
    before the softmax of every head. Position embeddings, when given, are added
    to the query and key inputs only.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"dim ({dim}) must be divisible by heads ({heads})")
        self.dim = dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self._reset_parameters()

    def _reset_parameters(self):
        for proj in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            nn.init.xavier_uniform_(proj.weight)
            nn.init.zeros_(proj.bias)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.dim // self.heads).transpose(-3, -2)

    def forward(self, queries: torch.Tensor, keys_values: torch.Tensor, mask: Optional[torch.Tensor] = None,
                query_pos: Optional[torch.Tensor] = None, key_pos: Optional[torch.Tensor] = None,
                return_weights: bool = False):
        """
        Args:
            queries: (..., n_q, D)
            keys_values: (..., n_k, D)
            mask: additive, broadcastable to (..., n_q, n_k)

        Returns:
            (..., n_q, D), plus (..., h, n_q, n_k) weights when return_weights.
        """
        if mask is not None:
            check_attention_mask(mask)
        q_in = queries if query_pos is None else queries + query_pos
        k_in = keys_values if key_pos is None else keys_values + key_pos
        q = self._split(self.q_proj(q_in))
        k = self._split(self.k_proj(k_in))
        v = self._split(self.v_proj(keys_values))

        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dim // self.heads)
        if mask is not None:
            scores = scores + mask.unsqueeze(-3)
        weights = scores.softmax(dim=-1)
        out = (weights @ v).transpose(-3, -2)
        out = self.out_proj(out.reshape(*out.shape[:-2], self.dim))
        return (out, weights) if return_weights else out


def masked_cross_attention(queries: torch.Tensor, keys_values: torch.Tensor, mask: torch.Tensor,
                           params: MaskedCrossAttention) -> torch.Tensor:
    """
    Raises:
        DegenerateSoftmaxError: A query row has all keys masked.
    """
    return params(queries, keys_values, mask)


class DeformableSelfAttention(nn.Module):
    """
    Single-scale deformable attention over a (B, H, W, D) grid.

    Every position predicts, per head, P sampling offsets (in grid cells) and P
    softmax-normalized weights from its own feature; values are bilinearly sampled
    at position + offset with zero padding outside the grid.
    """

    def __init__(self, dim: int, heads: int, points: int):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"dim ({dim}) must be divisible by heads ({heads})")
        self.dim = dim
        self.heads = heads
        self.points = points
        self.value_proj = nn.Linear(dim, dim)
        self.sampling_offsets = nn.Linear(dim, heads * points * 2)
        self.attention_weights = nn.Linear(dim, heads * points)
        self.out_proj = nn.Linear(dim, dim)
        self._reset_parameters()

    def _reset_parameters(self):
        nn.init.zeros_(self.sampling_offsets.weight)
        # Heads start looking in evenly spread directions, point i at distance i
        angles = torch.arange(self.heads, dtype=torch.float64) * (2.0 * math.pi / self.heads)
        directions = torch.stack([angles.cos(), angles.sin()], dim=-1)
        directions = directions / directions.abs().max(dim=-1, keepdim=True).values
        bias = directions[:, None, :] * torch.arange(self.points, dtype=torch.float64)[None, :, None]
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(bias.reshape(-1).to(self.sampling_offsets.bias.dtype))
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x: torch.Tensor, query_pos: Optional[torch.Tensor] = None) -> torch.Tensor:
        batch, height, width, dim = x.shape
        heads, points, head_dim = self.heads, self.points, dim // self.heads
        query = x if query_pos is None else x + query_pos

        value = self.value_proj(x).reshape(batch, height, width, heads, head_dim)
        value = value.permute(0, 3, 4, 1, 2).reshape(batch * heads, head_dim, height, width)

        offsets = self.sampling_offsets(query).reshape(batch, height, width, heads, points, 2)
        if not torch.isfinite(offsets).all():
            raise NumericalError("Deformable attention predicted non-finite offsets", component='dsa')
        weights = self.attention_weights(query).reshape(batch, height, width, heads, points).softmax(dim=-1)

        ys, xs = torch.meshgrid(
            torch.arange(height, dtype=x.dtype, device=x.device),
            torch.arange(width, dtype=x.dtype, device=x.device),
            indexing='ij',
        )
        px = xs[None, :, :, None, None] + offsets[..., 0]
        py = ys[None, :, :, None, None] + offsets[..., 1]
        # pixel-centre convention of grid_sample(align_corners=False)
        grid = torch.stack([2.0 * (px + 0.5) / width - 1.0, 2.0 * (py + 0.5) / height - 1.0], dim=-1)
        grid = grid.permute(0, 3, 1, 2, 4, 5).reshape(batch * heads, height * width, points, 2)

        sampled = F.grid_sample(value, grid, mode='bilinear', padding_mode='zeros', align_corners=False)
        weights = weights.permute(0, 3, 1, 2, 4).reshape(batch * heads, 1, height * width, points)
        out = (sampled * weights).sum(dim=-1)
        out = out.reshape(batch, heads, head_dim, height, width).permute(0, 3, 4, 1, 2)
        return self.out_proj(out.reshape(batch, height, width, dim))


class DenseSelfAttention(nn.Module):
    """Plain multi-head self-attention over the flattened grid."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = MaskedCrossAttention(dim, heads)

    def forward(self, x: torch.Tensor, query_pos: Optional[torch.Tensor] = None) -> torch.Tensor:
        batch, height, width, dim = x.shape
        tokens = x.reshape(batch, height * width, dim)
        pos = None if query_pos is None else query_pos.reshape(-1, height * width, dim)
        out = self.attn(tokens, tokens, query_pos=pos, key_pos=pos)
        return out.reshape(batch, height, width, dim)


def deformable_self_attention(grid: FeatureGrid, params: nn.Module) -> FeatureGrid:
    """
    Raises:
        NumericalError: Predicted offsets are not finite.
    """
    if not torch.isfinite(grid.features).all():
        raise NumericalError("Input grid is not finite", component='dsa')
    return FeatureGrid(features=params(grid.features.unsqueeze(0))[0], stride=grid.stride)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


@dataclass
class AttentionMaskMatrix:
    """B x m additive mask: 0 where image i contains batch category j, else -inf."""
    values: torch.Tensor

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValidationError(f"Mask matrix must be B x m, got {tuple(self.values.shape)}")
        if not torch.all((self.values == 0) | (self.values == NEG_INF)):
            raise ValidationError("Mask matrix entries must be 0 or -inf")
        if torch.any(torch.all(self.values == NEG_INF, dim=-1)):
            raise ValidationError("Every image needs at least one unmasked concept")

    @classmethod
    def from_membership(cls, membership: torch.Tensor, dtype=torch.float32) -> 'AttentionMaskMatrix':
        zeros = torch.zeros(membership.shape, dtype=dtype, device=membership.device)
        return cls(torch.where(membership.bool(), zeros, torch.full_like(zeros, NEG_INF)))

    @property
    def membership(self) -> torch.Tensor:
        return self.values == 0


@dataclass
class BatchConceptContext:
    """Ordered union of the batch's concept categories plus per-image membership."""
    batch_categories: List[int]
    memberships: List[Set[int]]
    embeddings: torch.Tensor

    def __post_init__(self):
        if not self.batch_categories:
            raise ValidationError("Batch concept context needs at least one category")
        if len(set(self.batch_categories)) != len(self.batch_categories):
            raise ValidationError("Batch categories must be unique")
        if self.embeddings.shape[0] != len(self.batch_categories):
            raise ValidationError("Context embeddings must have one row per batch category")
        known = set(self.batch_categories)
        for i, members in enumerate(self.memberships):
            if not members:
                raise ValidationError(f"Image {i} of the batch has an empty concept set")
            if not set(members) <= known:
                raise ValidationError(f"Image {i} references categories outside the batch context")

    @classmethod
    def build(cls, category_sets: Sequence[Iterable[int]], table: CategoryEmbeddingTable,
              dtype=torch.float32) -> 'BatchConceptContext':
        memberships = [set(int(c) for c in cats) for cats in category_sets]
        batch_categories = sorted(set().union(*memberships)) if memberships else []
        embeddings = table.as_tensor(dtype)[batch_categories] if batch_categories else table.as_tensor(dtype)[:0]
        return cls(batch_categories, memberships, embeddings)

    @property
    def size(self) -> int:
        return len(self.batch_categories)

    def membership_tensor(self) -> torch.Tensor:
        index = {c: j for j, c in enumerate(self.batch_categories)}
        member = torch.zeros(len(self.memberships), self.size, dtype=torch.bool)
        for i, members in enumerate(self.memberships):
            for c in members:
                member[i, index[c]] = True
        return member

    def attention_mask(self, dtype=torch.float32) -> AttentionMaskMatrix:
        return AttentionMaskMatrix.from_membership(self.membership_tensor(), dtype=dtype)


@dataclass
class CaveOutput:
    enhanced: torch.Tensor            # (B, H, W, D) = V_sa
    refined_concepts: torch.Tensor    # (m, D), member-weighted mean over images
    per_image_concepts: torch.Tensor  # (B, m, D)


class CaveLayer(nn.Module):
    def __init__(self, dim: int, heads: int, points: int, ffn_dim: int, dsa_mode: str = 'deformable',
                 concept_blocks: bool = True):
        super().__init__()
        self.concept_blocks = concept_blocks
        if concept_blocks:
            self.t2i_norm_q = nn.LayerNorm(dim)
            self.t2i_norm_kv = nn.LayerNorm(dim)
            self.t2i = MaskedCrossAttention(dim, heads)
            self.text_norm = nn.LayerNorm(dim)
            self.text_ffn = FeedForward(dim, ffn_dim)
            self.i2t_norm_q = nn.LayerNorm(dim)
            self.i2t_norm_kv = nn.LayerNorm(dim)
            self.i2t = MaskedCrossAttention(dim, heads)
        self.image_norm = nn.LayerNorm(dim)
        self.image_ffn = FeedForward(dim, ffn_dim)
        self.dsa_norm = nn.LayerNorm(dim)
        self.dsa = DeformableSelfAttention(dim, heads, points) if dsa_mode == 'deformable' else DenseSelfAttention(dim, heads)

    def forward(self, concepts, membership, mask, grid, pos=None):
        batch, height, width, dim = grid.shape
        if self.concept_blocks:
            tokens = grid.reshape(batch, height * width, dim)
            flat_pos = None if pos is None else pos.reshape(-1, height * width, dim)
            member = membership.unsqueeze(-1)

            # T2I: each image's concept rows query only that image's grid
            update = self.t2i(self.t2i_norm_q(concepts), self.t2i_norm_kv(tokens), key_pos=flat_pos)
            concepts = torch.where(member, concepts + update, concepts)
            update = self.text_ffn(self.text_norm(concepts))
            concepts = torch.where(member, concepts + update, concepts)

            # I2T with the mask matrix: (B, 1, m) broadcast over grid positions
            update = self.i2t(self.i2t_norm_q(tokens), self.i2t_norm_kv(concepts), mask.unsqueeze(1),
                              query_pos=flat_pos)
            grid = (tokens + update).reshape(batch, height, width, dim)

        grid = grid + self.image_ffn(self.image_norm(grid))
        grid = grid + self.dsa(self.dsa_norm(grid), query_pos=pos)
        return concepts, grid


class ConceptAwareVisualEnhancer(nn.Module):
    """
    N stacked CaveLayers. ``mode='plain'`` keeps only the image FFN and DSA blocks,
    ignoring concepts entirely.
    """

    def __init__(self, dim: int, heads: int, layers: int, points: int, ffn_dim: Optional[int] = None,
                 mode: str = 'cave', dsa_mode: str = 'deformable'):
        super().__init__()
        if layers < 1 or points < 1:
            raise ValidationError("Enhancer needs at least one layer and one sampling point")
        self.dim = dim
        self.mode = mode
        ffn_dim = ffn_dim or 2 * dim
        self.layers = nn.ModuleList([
            CaveLayer(dim, heads, points, ffn_dim, dsa_mode=dsa_mode, concept_blocks=(mode == 'cave'))
            for _ in range(layers)
        ])

    def forward(self, concepts: torch.Tensor, membership: torch.Tensor, grid: torch.Tensor,
                pos: Optional[torch.Tensor] = None) -> CaveOutput:
        """
        Args:
            concepts: (m, D) context embeddings or a (B, m, D) per-image stream.
            membership: (B, m) bool.
            grid: (B, H, W, D) global features V_g.
            pos: optional (H, W, D) position table.
        """
        batch = grid.shape[0]
        if concepts.ndim == 2:
            concepts = concepts.unsqueeze(0).expand(batch, -1, -1)
        if membership.shape != concepts.shape[:2] or membership.shape[0] != batch:
            raise ValidationError(
                f"Membership {tuple(membership.shape)} does not match concepts {tuple(concepts.shape[:2])} "
                f"and batch {batch}"
            )
        membership = membership.to(grid.device)
        mask = AttentionMaskMatrix.from_membership(membership, dtype=grid.dtype).values
        for layer in self.layers:
            concepts, grid = layer(concepts, membership, mask, grid, pos=pos)
        return CaveOutput(enhanced=grid, refined_concepts=_member_mean(concepts, membership),
                          per_image_concepts=concepts)


def _member_mean(concepts: torch.Tensor, membership: torch.Tensor) -> torch.Tensor:
    weights = membership.to(concepts.dtype).unsqueeze(-1)
    counts = weights.sum(dim=0)
    pooled = (concepts * weights).sum(dim=0) / counts.clamp(min=1.0)
    # rows no image contains keep their input value
    return torch.where(counts > 0, pooled, concepts[0])


def cave_forward(context: BatchConceptContext, global_features, mask: AttentionMaskMatrix,
                 params: ConceptAwareVisualEnhancer, pos: Optional[torch.Tensor] = None) -> CaveOutput:
    """
    Run the enhancer over a batch.

    Args:
        context: Batch categories, memberships and their embeddings.
        global_features: (B, H, W, D) tensor or a list of FeatureGrid.
        mask: Mask matrix whose rows/columns match the images/batch categories.

    Raises:
        ValidationError: Mask and context membership disagree.
    """
    if isinstance(global_features, (list, tuple)):
        global_features = torch.stack([g.features for g in global_features])
    membership = context.membership_tensor()
    if tuple(mask.values.shape) != tuple(membership.shape):
        raise ValidationError(
            f"Mask matrix shape {tuple(mask.values.shape)} does not match "
            f"{len(context.memberships)} images x {context.size} categories"
        )
    if not torch.equal(mask.membership.cpu(), membership):
        raise ValidationError("Mask matrix disagrees with the per-image concept memberships")
    if global_features.shape[0] != membership.shape[0]:
        raise ValidationError("One feature grid per image is required")
    embeddings = context.embeddings.to(global_features.dtype)
    return params(embeddings, membership, global_features, pos=pos)
