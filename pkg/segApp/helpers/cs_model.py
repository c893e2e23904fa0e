"""
Full segmentor: toy backbone -> concept-aware enhancer -> concept decoder -> mask
pooling over V_g -> cosine classification against a class embedding table.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn

from segApp.helpers.cs_cave import ConceptAwareVisualEnhancer
from segApp.helpers.cs_config import ModelConfig, check_config
from segApp.helpers.cs_decoder import ConceptDecoder, cosine_scores, mask_pool
from segApp.helpers.cs_embeddings import ToyBackbone, sine_position_embedding
from segApp.helpers.cs_utils import ConceptSegUtilityHelpers

logger = logging.getLogger(__name__)


@dataclass
class LayerOutput:
    class_logits: torch.Tensor   # (B, K, n+1) scaled cosine scores
    mask_logits: torch.Tensor    # (B, K, H', W')


@dataclass
class ModelOutput:
    layers: List[LayerOutput]
    mask_embeddings: torch.Tensor   # (B, K, D) final-layer E_m
    global_features: torch.Tensor   # (B, H', W', D) V_g
    enhanced: torch.Tensor          # (B, H', W', D) V_sa

    @property
    def final(self) -> LayerOutput:
        return self.layers[-1]


class ConceptSegModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config = check_config(config, name='model')
        self.config = config
        self.backbone = ToyBackbone(config.dim, width=config.backbone_width, stages=config.backbone_stages,
                                    dual_scale=config.dual_scale)
        self.enhancer = ConceptAwareVisualEnhancer(
            config.dim, config.heads, config.enhancer_layers, config.sampling_points,
            ffn_dim=config.ffn_width, mode=config.enhancer_mode, dsa_mode=config.dsa_mode,
        )
        self.decoder = ConceptDecoder(
            config.dim, config.heads, config.num_queries, config.decoder_layers, ffn_dim=config.ffn_width,
            concept_step=config.concept_step, share_cross_attention=config.share_cross_attention,
            query_init_std=config.query_init_std, temperature_init=config.temperature_init,
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.decoder.query_feat.dtype

    def position_table(self, height: int, width: int) -> Optional[torch.Tensor]:
        if not self.config.pos_embedding:
            return None
        return sine_position_embedding(height, width, self.config.dim, dtype=self.dtype)

    def forward(self, pixels: torch.Tensor, concept_embeddings: torch.Tensor, membership: torch.Tensor,
                class_embeddings: torch.Tensor) -> ModelOutput:
        """
        Args:
            pixels: (B, H, W, 3) in [0, 1].
            concept_embeddings: (m, D) batch concept rows.
            membership: (B, m) bool.
            class_embeddings: (n, D) classification table rows.
        """
        pixels = pixels.to(self.dtype)
        global_features, coarse = self.backbone(pixels)
        _, height, width, _ = global_features.shape
        pos = self.position_table(height, width)

        cave = self.enhancer(concept_embeddings.to(self.dtype), membership, global_features, pos=pos)
        extra, extra_pos = None, None
        if coarse is not None:
            extra = coarse.reshape(coarse.shape[0], -1, coarse.shape[-1])
            extra_pos = self.position_table(coarse.shape[1], coarse.shape[2])
        decoded = self.decoder(cave.per_image_concepts, membership, cave.enhanced, memory_extra=extra,
                               pos=pos, extra_pos=extra_pos)

        classes = class_embeddings.to(self.dtype)
        scale = self.decoder.logit_scale.exp()
        layers = []
        mask_embeddings = None
        for layer in decoded.layers:
            mask_embeddings = mask_pool(layer.mask_logits, global_features)
            scores = cosine_scores(mask_embeddings, classes, self.decoder.no_object)
            layers.append(LayerOutput(class_logits=scores * scale, mask_logits=layer.mask_logits))
        return ModelOutput(layers=layers, mask_embeddings=mask_embeddings,
                           global_features=global_features, enhanced=cave.enhanced)


def build_model(config: ModelConfig, seed: int = 0, precision: str = 'float32', freeze_backbone: bool = True) -> ConceptSegModel:
    """Deterministic construction: parameters depend only on (config, seed)."""
    ConceptSegUtilityHelpers.seed_everything(seed)
    model = ConceptSegModel(config).to(ConceptSegUtilityHelpers.torch_dtype(precision))
    if freeze_backbone:
        model.backbone.freeze()
    logger.debug(f"Built model with {sum(p.numel() for p in model.parameters())} parameters")
    return model
