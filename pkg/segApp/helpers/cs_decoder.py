"""
Concept-conditioned mask decoder.

K learnable queries pass through M layers of
    shared cross-attention over the image's member concepts
    the same cross-attention over the enhanced grid V_sa
    self-attention over queries
    feed-forward
all pre-norm residual. After every layer a residual mask-query FFN gives q_hat,
and mask logits are q_hat . V_sa at every grid position.
"""

import math
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from django.core.exceptions import ValidationError

from segApp.helpers.cs_cave import FeedForward, MaskedCrossAttention, AttentionMaskMatrix
from segApp.helpers.cs_embeddings import CategoryEmbeddingTable, FeatureGrid
from segApp.helpers.cs_errors import NumericalError

POOL_EPS = 1e-6


@dataclass
class MaskSet:
    """Mask logits at feature stride, optionally upsampled to image resolution."""
    logits: torch.Tensor
    upsampled: Optional[torch.Tensor] = None

    def __post_init__(self):
        if not torch.isfinite(self.logits).all():
            raise NumericalError("Mask logits are not finite", component='masks')

    def upsample(self, height: int, width: int) -> 'MaskSet':
        return MaskSet(self.logits, upsample_mask_logits(self.logits, height, width))


@dataclass
class LayerPrediction:
    queries: torch.Tensor        # (B, K, D) after the layer
    mask_queries: torch.Tensor   # (B, K, D) q_hat
    mask_logits: torch.Tensor    # (B, K, H', W')


@dataclass
class DecoderOutput:
    layers: List[LayerPrediction]

    @property
    def final(self) -> LayerPrediction:
        return self.layers[-1]


def upsample_mask_logits(logits: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear (align_corners=False) resize of (..., H', W') logits."""
    lead = logits.shape[:-2]
    flat = logits.reshape(-1, 1, *logits.shape[-2:])
    out = F.interpolate(flat, size=(height, width), mode='bilinear', align_corners=False)
    return out.reshape(*lead, height, width)


def mask_logits(mask_queries: torch.Tensor, enhanced: torch.Tensor) -> torch.Tensor:
    """(..., K, D) x (..., H, W, D) -> (..., K, H, W)"""
    return torch.einsum('...kd,...hwd->...khw', mask_queries, enhanced)


def compute_masks(mask_queries, enhanced, image_size=None) -> MaskSet:
    """
    logits[k, y, x] = dot(q_hat_k, V_sa[y, x]).

    Args:
        mask_queries: (K, D) tensor (or batched).
        enhanced: FeatureGrid or (H', W', D) tensor (or batched).
        image_size: optional (H, W) for a bilinear upsample.
    """
    grid = enhanced.features if isinstance(enhanced, FeatureGrid) else enhanced
    if mask_queries.shape[-1] != grid.shape[-1]:
        raise ValidationError(f"Query dim {mask_queries.shape[-1]} does not match feature dim {grid.shape[-1]}")
    masks = MaskSet(mask_logits(mask_queries, grid))
    return masks.upsample(*image_size) if image_size else masks


def mask_pool(masks, global_features) -> torch.Tensor:
    """
    E_m[k] = sum_p sigmoid(l_k(p)) V_g(p) / sum_p sigmoid(l_k(p)); the plain mean of
    V_g when the weight sum falls below 1e-6.

    Args:
        masks: MaskSet or (..., K, H', W') logits at feature resolution.
        global_features: FeatureGrid or (..., H', W', D) V_g.

    Raises:
        ValidationError: Mask and feature resolutions differ.
    """
    logits = masks.logits if isinstance(masks, MaskSet) else masks
    grid = global_features.features if isinstance(global_features, FeatureGrid) else global_features
    if tuple(logits.shape[-2:]) != tuple(grid.shape[-3:-1]):
        raise ValidationError(
            f"Mask resolution {tuple(logits.shape[-2:])} does not match feature grid {tuple(grid.shape[-3:-1])}"
        )
    weights = torch.sigmoid(logits)
    total = weights.sum(dim=(-1, -2))
    pooled = torch.einsum('...khw,...hwd->...kd', weights, grid)
    safe_total = torch.where(total < POOL_EPS, torch.ones_like(total), total)
    pooled = pooled / safe_total.unsqueeze(-1)
    mean = grid.mean(dim=(-3, -2)).unsqueeze(-2).expand_as(pooled)
    return torch.where((total < POOL_EPS).unsqueeze(-1), mean, pooled)


def cosine_scores(mask_embeddings: torch.Tensor, class_embeddings: torch.Tensor,
                  no_object: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Cosine similarity of each E_m row against each class row, with the no-object
    embedding appended as the last column when given.

    Raises:
        NumericalError: A mask embedding (or class row) has zero norm.
    """
    columns = class_embeddings if no_object is None else torch.cat([class_embeddings, no_object.unsqueeze(0)], dim=0)
    em_norm = mask_embeddings.norm(dim=-1, keepdim=True)
    col_norm = columns.norm(dim=-1, keepdim=True)
    if torch.any(em_norm == 0):
        raise NumericalError("Zero-norm mask embedding cannot be classified", component='classify')
    if torch.any(col_norm == 0):
        raise NumericalError("Zero-norm class embedding", component='classify')
    return (mask_embeddings / em_norm) @ (columns / col_norm).transpose(-1, -2)


def classify(mask_embeddings, table, temperature: float, no_object: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    softmax(cosine(E_m, [E_c; no-object]) / temperature) per query.

    Returns:
        (..., K, n+1) probabilities (n columns without a no-object embedding).
    """
    if not temperature > 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    classes = table.as_tensor(mask_embeddings.dtype) if isinstance(table, CategoryEmbeddingTable) else table
    scores = cosine_scores(mask_embeddings, classes.to(mask_embeddings.dtype),
                           None if no_object is None else no_object.to(mask_embeddings.dtype))
    return (scores / temperature).softmax(dim=-1)


class DecoderLayer(nn.Module):
    """
    One decoder layer. With ``share_cross_attention`` the concept step and the
    visual step use the very same projection module.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, concept_step: bool = True,
                 share_cross_attention: bool = True):
        super().__init__()
        self.concept_step = concept_step
        self.share_cross_attention = share_cross_attention
        self.visual_attn = MaskedCrossAttention(dim, heads)
        self.separate_concept_attn = (
            MaskedCrossAttention(dim, heads) if concept_step and not share_cross_attention else None
        )
        self.concept_norm = nn.LayerNorm(dim)
        self.visual_norm = nn.LayerNorm(dim)
        self.self_norm = nn.LayerNorm(dim)
        self.self_attn = MaskedCrossAttention(dim, heads)
        self.ffn_norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)

    @property
    def concept_attn(self) -> MaskedCrossAttention:
        return self.separate_concept_attn if self.separate_concept_attn is not None else self.visual_attn

    def forward(self, queries, concepts, concept_mask, memory, memory_pos=None):
        if self.concept_step:
            queries = queries + self.concept_attn(self.concept_norm(queries), concepts, concept_mask)
        queries = queries + self.visual_attn(self.visual_norm(queries), memory, key_pos=memory_pos)
        normed = self.self_norm(queries)
        queries = queries + self.self_attn(normed, normed)
        return queries + self.ffn(self.ffn_norm(queries))


class ConceptDecoder(nn.Module):
    def __init__(self, dim: int, heads: int, num_queries: int, layers: int, ffn_dim: Optional[int] = None,
                 concept_step: bool = True, share_cross_attention: bool = True, query_init_std: float = 0.02,
                 temperature_init: float = 0.07):
        super().__init__()
        if layers < 1 or num_queries < 1:
            raise ValidationError("Decoder needs at least one layer and one query")
        ffn_dim = ffn_dim or 2 * dim
        self.dim = dim
        self.num_queries = num_queries
        self.query_feat = nn.Parameter(torch.empty(num_queries, dim))
        nn.init.normal_(self.query_feat, mean=0.0, std=query_init_std)
        self.layers = nn.ModuleList([
            DecoderLayer(dim, heads, ffn_dim, concept_step, share_cross_attention) for _ in range(layers)
        ])
        self.mask_norm = nn.LayerNorm(dim)
        self.mask_fc1 = nn.Linear(dim, ffn_dim)
        self.mask_fc2 = nn.Linear(ffn_dim, dim)
        self.no_object = nn.Parameter(torch.empty(dim))
        nn.init.normal_(self.no_object, mean=0.0, std=1.0 / math.sqrt(dim))
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / temperature_init)))

    def mask_queries(self, queries: torch.Tensor) -> torch.Tensor:
        return queries + self.mask_fc2(F.gelu(self.mask_fc1(self.mask_norm(queries))))

    @property
    def temperature(self) -> float:
        return float(torch.exp(-self.logit_scale.detach()))

    def forward(self, concepts: torch.Tensor, membership: torch.Tensor, enhanced: torch.Tensor,
                memory_extra: Optional[torch.Tensor] = None, pos: Optional[torch.Tensor] = None,
                extra_pos: Optional[torch.Tensor] = None,
                queries_init: Optional[torch.Tensor] = None) -> DecoderOutput:
        """
        Args:
            concepts: (B, m, D) per-image concept rows.
            membership: (B, m) bool; each image needs at least one member.
            enhanced: (B, H, W, D) V_sa.
            memory_extra: optional (B, L, D) extra visual tokens (stride-8 grid).
            pos / extra_pos: optional position tables for the visual keys.
            queries_init: optional (K, D) override of the learnable queries.

        Raises:
            ValidationError: An image has zero member categories.
        """
        batch, height, width, dim = enhanced.shape
        if membership.shape[0] != batch or not torch.all(membership.any(dim=-1)):
            raise ValidationError("Every image needs at least one member concept for the decoder")
        concept_mask = AttentionMaskMatrix.from_membership(membership, dtype=enhanced.dtype).values.unsqueeze(1)

        memory = enhanced.reshape(batch, height * width, dim)
        memory_pos = None if pos is None else pos.reshape(1, height * width, dim)
        if memory_extra is not None:
            memory = torch.cat([memory, memory_extra], dim=1)
            if memory_pos is not None:
                tail = extra_pos.reshape(1, -1, dim) if extra_pos is not None else torch.zeros_like(memory_extra[:1])
                memory_pos = torch.cat([memory_pos, tail], dim=1)

        init = self.query_feat if queries_init is None else queries_init
        queries = init.unsqueeze(0).expand(batch, -1, -1)
        outputs = []
        for layer in self.layers:
            queries = layer(queries, concepts, concept_mask, memory, memory_pos)
            q_hat = self.mask_queries(queries)
            outputs.append(LayerPrediction(queries=queries, mask_queries=q_hat,
                                           mask_logits=mask_logits(q_hat, enhanced)))
        return DecoderOutput(outputs)


def decoder_forward(queries_init: torch.Tensor, concepts: torch.Tensor, enhanced, params: ConceptDecoder,
                    membership: Optional[torch.Tensor] = None) -> DecoderOutput:
    """
    Single-image decoder pass.

    Args:
        queries_init: (K, D) initial queries.
        concepts: (m, D) member concepts of the image.
        enhanced: FeatureGrid or (H', W', D) V_sa.
        membership: optional (m,) bool; defaults to all rows.
    """
    grid = enhanced.features if isinstance(enhanced, FeatureGrid) else enhanced
    if concepts.shape[0] == 0:
        raise ValidationError("Decoder needs at least one member concept")
    member = torch.ones(concepts.shape[0], dtype=torch.bool) if membership is None else membership.bool()
    return params(concepts.unsqueeze(0), member.unsqueeze(0), grid.unsqueeze(0), queries_init=queries_init)
