"""
Inference: confidence reweighting, category prediction in the open-vocabulary and
vocabulary-free modes, panoptic post-processing and feature clustering.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from django.core.exceptions import ValidationError
from PIL import Image
from sklearn.cluster import KMeans

from segApp.helpers.cs_concepts import ConceptSet, MappedConceptSet, map_to_vocabulary
from segApp.helpers.cs_config import InferenceConfig, check_config
from segApp.helpers.cs_decoder import MaskSet, cosine_scores, upsample_mask_logits
from segApp.helpers.cs_embeddings import CategoryEmbeddingTable, FeatureGrid, encode_text, images_to_tensor
from segApp.helpers.cs_errors import ConfigurationError
from segApp.helpers.cs_types import VOID, PanopticSegmentation, SceneImage, Segment, Vocabulary
from segApp.helpers.cs_utils import ConceptSegUtilityHelpers

logger = logging.getLogger(__name__)

REWEIGHT_FUNCTIONS = {
    'exp': lambda c: math.exp(c),
    'linear': lambda c: 1.0 + c,
    'quadratic': lambda c: 1.0 + c * c,
    'normalized-exp': lambda c: 1.0 + (math.exp(c) - 1.0) / (math.e - 1.0),
    'none': lambda c: 1.0,
}
REWEIGHT_VARIANTS = ('exp', 'linear', 'quadratic', 'normalized-exp')


@dataclass
class ReweightVector:
    """Per-category weights over the test vocabulary; the last entry is no-object (1.0)."""
    weights: np.ndarray
    variant: str

    @property
    def category_weights(self) -> np.ndarray:
        return self.weights[:-1]


def reweight_vector(mapped: MappedConceptSet, test_vocabulary: Vocabulary, variant: str) -> ReweightVector:
    """
    weight_c = f(max confidence of concepts mapped to c) for c in the concept set,
    1.0 for every other category and for no-object.

    Raises:
        ConfigurationError: Unknown variant.
        ValidationError: A mapped category outside the test vocabulary.
    """
    if variant not in REWEIGHT_FUNCTIONS:
        raise ConfigurationError(f"Unknown reweight variant '{variant}' (choose from {sorted(REWEIGHT_FUNCTIONS)})")
    weights = np.ones(len(test_vocabulary) + 1, dtype=np.float64)
    for category_id, confidence in mapped.merged_confidences().items():
        if not test_vocabulary.has_category(category_id):
            raise ValidationError(f"Mapped category {category_id} is not in the test vocabulary")
        weights[category_id] = REWEIGHT_FUNCTIONS[variant](confidence)
    return ReweightVector(weights=weights, variant=variant)


@dataclass
class CategoryPrediction:
    category_ids: List[int]      # argmax over the real categories, per query
    probs: torch.Tensor          # (K, n+1) with no-object last
    column_categories: List[int] = field(default_factory=list)


def predict_categories(mask_embeddings: torch.Tensor, table: CategoryEmbeddingTable, weights: ReweightVector,
                       no_object: torch.Tensor, temperature: float,
                       column_categories: Optional[Sequence[int]] = None) -> CategoryPrediction:
    """
    softmax(W * cosine(E_m, [E_c; no-object]) / temperature); the weights multiply the
    raw scores before the softmax.

    Raises:
        ValidationError: Empty table, or weights that do not cover it.
    """
    if len(table) == 0:
        raise ValidationError("Effective vocabulary is empty")
    if weights.weights.shape[0] != len(table) + 1:
        raise ValidationError(f"Reweight vector has {weights.weights.shape[0]} entries for {len(table)} categories")
    dtype = mask_embeddings.dtype
    scores = cosine_scores(mask_embeddings, table.as_tensor(dtype), no_object.to(dtype))
    weighted = torch.as_tensor(weights.weights, dtype=dtype) * scores
    probs = (weighted / temperature).softmax(dim=-1)
    columns = list(column_categories) if column_categories is not None else list(range(len(table)))
    best = probs[..., :-1].argmax(dim=-1)
    return CategoryPrediction(category_ids=[columns[int(i)] for i in best.reshape(-1)], probs=probs,
                              column_categories=columns)


def panoptic_merge(class_probs: torch.Tensor, masks, config: InferenceConfig, thing_ids: Sequence[int] = (),
                   column_categories: Optional[Sequence[int]] = None, image_id: str = '') -> PanopticSegmentation:
    """
    Mask2Former-style panoptic merge.

    Queries whose top class is no-object or whose top probability is below the
    object threshold are dropped. Each pixel goes to the surviving query with the
    largest prob x sigmoid(mask) (ties to the lower query index); a query becomes a
    segment when it owns at least overlap_threshold of its >= 0.5 mask area and
    min_area pixels. Stuff queries of one category merge into one segment.

    Args:
        class_probs: (K, c+1), no-object last.
        masks: MaskSet with upsampled logits or (K, H, W) logits at image resolution.
        thing_ids: Vocabulary category ids that are things.
        column_categories: Column -> vocabulary category (identity when omitted).
    """
    config = check_config(config, name='inference')
    logits = masks.upsampled if isinstance(masks, MaskSet) else masks
    if logits is None:
        raise ValidationError("panoptic_merge needs masks at image resolution")
    probs = class_probs.detach().cpu().double().numpy()
    mask_probs = torch.sigmoid(logits.detach().cpu().double()).numpy()
    num_queries, columns = probs.shape
    height, width = mask_probs.shape[-2:]
    categories = list(column_categories) if column_categories is not None else list(range(columns - 1))
    things = set(int(t) for t in thing_ids)

    scores = probs.max(axis=-1)
    labels = probs.argmax(axis=-1)
    keep = [k for k in range(num_queries) if labels[k] != columns - 1 and scores[k] >= config.object_threshold]

    id_map = np.zeros((height, width), dtype=np.int64)
    segments: List[Segment] = []
    if not keep:
        return PanopticSegmentation(id_map=id_map, segments=segments, image_id=image_id)

    kept_masks = mask_probs[keep]
    owner = np.argmax(scores[keep][:, None, None] * kept_masks, axis=0)
    stuff_segments: Dict[int, Segment] = {}
    for position, query in enumerate(keep):
        category = int(categories[labels[query]])
        original = kept_masks[position] >= 0.5
        owned = (owner == position) & original
        original_area, owned_area = int(original.sum()), int(owned.sum())
        if original_area == 0 or owned_area == 0:
            continue
        if owned_area < config.overlap_threshold * original_area or owned_area < config.min_area:
            continue
        if category not in things and category in stuff_segments:
            merged = stuff_segments[category]
            id_map[owned] = merged.segment_id
            merged.score = max(merged.score, float(scores[query]))
            continue
        segment = Segment(segment_id=len(segments) + 1, category_id=category, score=float(scores[query]),
                          query_index=int(query))
        id_map[owned] = segment.segment_id
        segments.append(segment)
        if category not in things:
            stuff_segments[category] = segment
    return PanopticSegmentation(id_map=id_map, segments=segments, image_id=image_id)


def to_semantic(panoptic: PanopticSegmentation) -> np.ndarray:
    """Per-pixel category; unassigned pixels are VOID (-1)."""
    semantic = np.full(panoptic.shape, VOID, dtype=np.int64)
    for segment in panoptic.segments:
        semantic[panoptic.id_map == segment.segment_id] = segment.category_id
    return semantic


@dataclass
class InstancePrediction:
    mask: np.ndarray
    category_id: int
    score: float
    image_id: str = ''

    def __post_init__(self):
        if not np.any(self.mask):
            raise ValidationError("Instance mask must be non-empty")
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"Instance score {self.score} outside [0, 1]")


def to_instances(panoptic: PanopticSegmentation, vocabulary: Vocabulary,
                 mask_probs: Optional[np.ndarray] = None) -> List[InstancePrediction]:
    """
    Thing segments as instances. With per-query mask probabilities (K, H, W) the
    score is class probability x mean in-mask sigmoid; otherwise the segment score.
    """
    instances = []
    for segment in panoptic.segments:
        if not vocabulary.is_thing(segment.category_id):
            continue
        mask = panoptic.id_map == segment.segment_id
        if not mask.any():
            continue
        score = 1.0 if segment.score is None else float(segment.score)
        if mask_probs is not None and segment.query_index is not None:
            score *= float(mask_probs[segment.query_index][mask].mean())
        instances.append(InstancePrediction(mask=mask, category_id=segment.category_id,
                                            score=min(1.0, max(0.0, score)), image_id=panoptic.image_id))
    return instances


@dataclass
class ClusterResult:
    labels: np.ndarray       # (H', W') int
    centroids: np.ndarray    # (k, D)
    inertia: float


def cluster_features(grid, k: int, seed: int = 0, n_init: int = 10) -> ClusterResult:
    """
    Seeded k-means++ over grid positions (<= 100 iterations, tol 1e-6).

    Raises:
        ValidationError: k < 1 or k larger than the number of positions.
    """
    features = grid.numpy() if isinstance(grid, FeatureGrid) else np.asarray(grid)
    height, width, dim = features.shape
    points = features.reshape(-1, dim).astype(np.float64)
    if k < 1 or k > points.shape[0]:
        raise ValidationError(f"k must be between 1 and {points.shape[0]} positions, got {k}")
    kmeans = KMeans(n_clusters=k, init='k-means++', n_init=n_init, max_iter=100, tol=1e-6, random_state=seed)
    labels = kmeans.fit_predict(points)
    return ClusterResult(labels=labels.reshape(height, width).astype(np.int64),
                         centroids=kmeans.cluster_centers_, inertia=float(kmeans.inertia_))


def _palette(k: int) -> List[int]:
    rng = np.random.default_rng(0)
    colors = rng.integers(0, 256, size=(256, 3), dtype=np.int64)
    return [int(v) for v in colors.reshape(-1)]


def write_cluster_outputs(result: ClusterResult, png_path, json_path, metadata: Optional[dict] = None):
    """8-bit indexed PNG of the label map plus a JSON centroid table."""
    png_path, json_path = Path(png_path), Path(json_path)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    image = Image.fromarray(result.labels.astype(np.uint8), mode='P')
    image.putpalette(_palette(len(result.centroids)))
    image.save(png_path)
    payload = {
        'k': int(len(result.centroids)),
        'inertia': result.inertia,
        'centroids': result.centroids.tolist(),
        'shape': list(result.labels.shape),
        **(metadata or {}),
    }
    ConceptSegUtilityHelpers.write_json(json_path, ConceptSegUtilityHelpers.round_floats(payload))


@dataclass
class ImagePrediction:
    panoptic: PanopticSegmentation
    class_probs: torch.Tensor
    mask_probs: np.ndarray      # (K, H, W) sigmoid at image resolution
    mask_logits: torch.Tensor   # (K, H, W) at image resolution


class ConceptSegPredictor:
    """
    Runs a trained model on single images in either inference mode.

    The forward pass (and therefore every mask) is computed once per image and
    shared by all requested reweight variants.
    """

    def __init__(self, model, vocabulary: Vocabulary, table: CategoryEmbeddingTable, config: InferenceConfig):
        if len(table) != len(vocabulary):
            raise ValidationError("Embedding table must cover the test vocabulary")
        self.model = model.eval()
        self.vocabulary = vocabulary
        self.table = table
        self.config = check_config(config, name='inference')

    @property
    def temperature(self) -> float:
        return self.model.decoder.temperature

    def _forward(self, image: SceneImage, concept_embeddings: torch.Tensor):
        dtype = self.model.dtype
        membership = torch.ones(1, concept_embeddings.shape[0], dtype=torch.bool)
        with torch.no_grad():
            output = self.model(images_to_tensor([image], dtype=dtype), concept_embeddings.to(dtype), membership,
                                concept_embeddings.to(dtype))
        logits = upsample_mask_logits(output.final.mask_logits[0], image.height, image.width)
        return output.mask_embeddings[0], logits

    def predict(self, image: SceneImage, concepts: ConceptSet, variants: Sequence[str] = ('exp',),
                mode: Optional[str] = None) -> Dict[str, ImagePrediction]:
        """
        Args:
            image: Image to segment.
            concepts: Its concept set.
            variants: Reweight variants (open-vocabulary mode only).
            mode: Override of config.mode.

        Raises:
            ValidationError: Vocabulary-free mode with an empty concept set.
        """
        mode = mode or self.config.mode
        mapped = map_to_vocabulary(concepts, self.vocabulary, self.table)
        if mode == 'vocabulary-free':
            if not concepts.concepts:
                raise ValidationError(f"Effective vocabulary for {image.image_id} is empty")
            # Scores use only the concepts' own embeddings; the test table just maps columns to category ids
            concept_table = encode_text(concepts.labels, self.table.spec)
            embeddings = concept_table.as_tensor(self.model.dtype)
            mask_embeddings, logits = self._forward(image, embeddings)
            column_categories = [entry.target_category_id for entry in mapped.entries]
            ones = ReweightVector(np.ones(len(concept_table) + 1), 'none')
            runs = {variant: (concept_table, ones, column_categories) for variant in variants}
        else:
            context_ids = mapped.category_ids()
            if not context_ids:
                logger.warning(f"No concepts for {image.image_id}; falling back to the full vocabulary")
                context_ids = list(range(len(self.vocabulary)))
            embeddings = self.table.as_tensor(self.model.dtype)[context_ids]
            mask_embeddings, logits = self._forward(image, embeddings)
            runs = {variant: (self.table, reweight_vector(mapped, self.vocabulary, variant), None)
                    for variant in variants}

        mask_probs = torch.sigmoid(logits.double()).numpy()
        results = {}
        for variant, (table, weights, columns) in runs.items():
            prediction = predict_categories(mask_embeddings, table, weights, self.model.decoder.no_object.detach(),
                                            self.temperature, column_categories=columns)
            panoptic = panoptic_merge(prediction.probs, logits, self.config, thing_ids=self.vocabulary.thing_ids,
                                      column_categories=prediction.column_categories, image_id=image.image_id)
            results[variant] = ImagePrediction(panoptic=panoptic, class_probs=prediction.probs,
                                               mask_probs=mask_probs, mask_logits=logits)
        return results

    def enhanced_features(self, image: SceneImage, concepts: ConceptSet):
        """(V_g, V_sa) FeatureGrids for the clustering analysis."""
        mapped = map_to_vocabulary(concepts, self.vocabulary, self.table)
        context_ids = mapped.category_ids() or list(range(len(self.vocabulary)))
        embeddings = self.table.as_tensor(self.model.dtype)[context_ids]
        membership = torch.ones(1, len(context_ids), dtype=torch.bool)
        with torch.no_grad():
            output = self.model(images_to_tensor([image], dtype=self.model.dtype), embeddings, membership, embeddings)
        return (FeatureGrid(output.global_features[0], stride=self.model.backbone.stride),
                FeatureGrid(output.enhanced[0], stride=self.model.backbone.stride))
