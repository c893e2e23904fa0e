"""
Set-prediction training.

    rasterize_targets  panoptic ground truth -> per-segment binary masks at feature stride
    hungarian_match    minimum-cost injective query -> target assignment
    compute_loss       lambda_cls * cls + lambda_pixel * bce + lambda_dice * dice over supervised layers
    ConceptSegTrainer  deterministic AdamW loop writing a per-step loss log
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from django.core.exceptions import ValidationError
from scipy.optimize import linear_sum_assignment

from segApp.helpers.cs_cave import BatchConceptContext
from segApp.helpers.cs_config import TrainConfig, check_config
from segApp.helpers.cs_embeddings import CategoryEmbeddingTable, images_to_tensor
from segApp.helpers.cs_errors import NumericalError
from segApp.helpers.cs_model import ConceptSegModel
from segApp.helpers.cs_types import PanopticSegmentation, SceneImage
from segApp.helpers.cs_utils import ConceptSegUtilityHelpers

logger = logging.getLogger(__name__)

DICE_EPS = 1.0
LOSS_COLUMNS = ['step', 'total', 'cls', 'pixel', 'dice']


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, name: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ValidationError(f"{name}: prediction shape {tuple(a.shape)} does not match target {tuple(b.shape)}")


def dice_loss(pred_probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)"""
    _check_same_shape(pred_probs, target, 'dice_loss')
    target = target.to(pred_probs.dtype)
    numerator = 2.0 * (pred_probs * target).sum() + DICE_EPS
    denominator = pred_probs.sum() + target.sum() + DICE_EPS
    return 1.0 - numerator / denominator


def pixel_bce_loss(pred_logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on logits."""
    _check_same_shape(pred_logits, target, 'pixel_bce_loss')
    return F.binary_cross_entropy_with_logits(pred_logits, target.to(pred_logits.dtype), reduction='mean')


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int]]
    unmatched_queries: List[int]

    def total_cost(self, cost) -> float:
        cost = np.asarray(cost, dtype=np.float64)
        return float(sum(cost[q, t] for q, t in self.pairs))


def _assignment_cost(cost: np.ndarray) -> float:
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian_match(cost) -> MatchResult:
    """
    Minimum-cost injective assignment with min(K, T) pairs.

    Among optimal assignments the lexicographically smallest pair list wins: each
    query in turn takes its smallest target that still allows an optimal completion.

    Raises:
        NumericalError: Non-finite costs.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValidationError(f"Cost matrix must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise NumericalError("Matching cost contains non-finite values", component='matching')
    num_queries, num_targets = cost.shape
    n_pairs = min(num_queries, num_targets)
    best = _assignment_cost(cost)
    tolerance = 1e-9 * (1.0 + abs(best) + float(np.abs(cost).max(initial=0.0)))

    pairs: List[Tuple[int, int]] = []
    used = set()
    fixed = 0.0
    for q in range(num_queries):
        if len(pairs) == n_pairs:
            break
        rows = list(range(q + 1, num_queries))
        need = n_pairs - len(pairs) - 1
        for t in range(num_targets):
            if t in used:
                continue
            cols = [c for c in range(num_targets) if c not in used and c != t]
            if min(len(rows), len(cols)) < need:
                continue
            rest = _assignment_cost(cost[np.ix_(rows, cols)]) if need > 0 else 0.0
            if fixed + cost[q, t] + rest <= best + tolerance:
                pairs.append((q, t))
                used.add(t)
                fixed += cost[q, t]
                break
    matched = {q for q, _ in pairs}
    return MatchResult(pairs=pairs, unmatched_queries=[q for q in range(num_queries) if q not in matched])


@dataclass
class RasterizedTargets:
    masks: torch.Tensor            # (T, H', W') float 0/1
    classes: torch.Tensor          # (T,) column index into the class table
    segment_ids: List[int] = field(default_factory=list)
    category_ids: List[int] = field(default_factory=list)

    def __len__(self):
        return int(self.masks.shape[0])


def rasterize_targets(panoptic: PanopticSegmentation, stride: int,
                      class_index: Optional[Dict[int, int]] = None) -> RasterizedTargets:
    """
    Area-majority downsampling: a feature cell belongs to the segment owning most of
    its pixels (ties to the lowest segment id). Segments left without any cell are
    dropped with a warning.

    Args:
        panoptic: Ground truth at image resolution.
        stride: Feature stride.
        class_index: category_id -> classification column (identity when omitted).
    """
    id_map = panoptic.id_map
    height, width = id_map.shape
    out_h, out_w = math.ceil(height / stride), math.ceil(width / stride)
    padded = np.zeros((out_h * stride, out_w * stride), dtype=np.int64)
    padded[:height, :width] = id_map
    blocks = padded.reshape(out_h, stride, out_w, stride)

    segments = sorted(panoptic.segments, key=lambda s: s.segment_id)
    if not segments:
        empty = torch.zeros((0, out_h, out_w))
        return RasterizedTargets(empty, torch.zeros(0, dtype=torch.long))
    counts = np.stack([(blocks == s.segment_id).sum(axis=(1, 3)) for s in segments])
    owner = counts.argmax(axis=0)
    covered = counts.max(axis=0) > 0

    masks, classes, segment_ids, category_ids = [], [], [], []
    for index, segment in enumerate(segments):
        mask = (owner == index) & covered
        if not mask.any():
            logger.warning(
                f"Segment {segment.segment_id} of {panoptic.image_id} vanished at stride {stride}; excluded from the loss"
            )
            continue
        column = segment.category_id if class_index is None else class_index.get(segment.category_id)
        if column is None:
            raise ValidationError(
                f"Category {segment.category_id} of {panoptic.image_id} is not in the training class table"
            )
        masks.append(mask)
        classes.append(column)
        segment_ids.append(segment.segment_id)
        category_ids.append(segment.category_id)
    if not masks:
        return RasterizedTargets(torch.zeros((0, out_h, out_w)), torch.zeros(0, dtype=torch.long))
    return RasterizedTargets(torch.as_tensor(np.stack(masks), dtype=torch.float64),
                             torch.as_tensor(classes, dtype=torch.long), segment_ids, category_ids)


@dataclass
class LayerLoss:
    cls: torch.Tensor
    pixel: torch.Tensor
    dice: torch.Tensor

    def weighted(self, config: TrainConfig) -> torch.Tensor:
        return config.lambda_cls * self.cls + config.lambda_pixel * self.pixel + config.lambda_dice * self.dice


@dataclass
class LossBreakdown:
    """Final-layer components plus auxiliary layers; total sums every supervised layer."""
    total: torch.Tensor
    cls: torch.Tensor
    pixel: torch.Tensor
    dice: torch.Tensor
    aux: List[LayerLoss] = field(default_factory=list)
    match: Optional[MatchResult] = None

    def as_dict(self) -> Dict[str, float]:
        return {'total': float(self.total), 'cls': float(self.cls), 'pixel': float(self.pixel), 'dice': float(self.dice)}


def _unpack(prediction):
    if isinstance(prediction, (tuple, list)):
        return prediction[0], prediction[1]
    return prediction.class_logits, prediction.mask_logits


def matching_cost(class_logits: torch.Tensor, mask_logits: torch.Tensor, targets: RasterizedTargets,
                  config: TrainConfig) -> np.ndarray:
    """K x T cost: lambda_cls * (-log p(class)) + lambda_pixel * bce + lambda_dice * dice."""
    with torch.no_grad():
        dtype = torch.float64
        log_probs = class_logits.to(dtype).log_softmax(dim=-1)
        cls = -log_probs[:, targets.classes]
        logits = mask_logits.to(dtype).flatten(1)
        target = targets.masks.to(dtype).flatten(1)
        pixels = logits.shape[1]
        pos = F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits), reduction='none')
        neg = F.binary_cross_entropy_with_logits(logits, torch.zeros_like(logits), reduction='none')
        bce = (pos @ target.T + neg @ (1.0 - target).T) / pixels
        probs = logits.sigmoid()
        dice = 1.0 - (2.0 * probs @ target.T + DICE_EPS) / (probs.sum(-1)[:, None] + target.sum(-1)[None, :] + DICE_EPS)
        cost = config.lambda_cls * cls + config.lambda_pixel * bce + config.lambda_dice * dice
    return cost.cpu().numpy()


def _layer_loss(class_logits, mask_logits, targets: RasterizedTargets, match: MatchResult,
                config: TrainConfig) -> LayerLoss:
    num_queries, columns = class_logits.shape
    no_object = columns - 1
    target_classes = torch.full((num_queries,), no_object, dtype=torch.long)
    weights = torch.full((num_queries,), config.no_object_weight, dtype=class_logits.dtype)
    for q, t in match.pairs:
        target_classes[q] = targets.classes[t]
        weights[q] = 1.0
    nll = -class_logits.log_softmax(dim=-1).gather(1, target_classes[:, None])[:, 0]
    weight_sum = weights.sum()
    cls = (weights * nll).sum() / weight_sum if weight_sum > 0 else nll.sum() * 0.0

    if match.pairs:
        target_masks = targets.masks.to(mask_logits.dtype)
        pixel = torch.stack([pixel_bce_loss(mask_logits[q], target_masks[t]) for q, t in match.pairs]).mean()
        dice = torch.stack([dice_loss(mask_logits[q].sigmoid(), target_masks[t]) for q, t in match.pairs]).mean()
    else:
        pixel = mask_logits.sum() * 0.0
        dice = mask_logits.sum() * 0.0
    return LayerLoss(cls=cls, pixel=pixel, dice=dice)


def compute_loss(predictions: Sequence, targets: RasterizedTargets, config: TrainConfig) -> LossBreakdown:
    """
    Loss for one image.

    Args:
        predictions: Per-layer (class_logits (K, n+1), mask_logits (K, H', W')), final layer last.
        targets: Rasterized ground truth at the mask resolution.
        config: Loss weights, no-object weight and aux options.

    Raises:
        NumericalError: A loss component is not finite (names it).
    """
    if not predictions:
        raise ValidationError("compute_loss needs at least one layer of predictions")
    final_logits, final_masks = _unpack(predictions[-1])
    if len(targets) and tuple(final_masks.shape[-2:]) != tuple(targets.masks.shape[-2:]):
        raise ValidationError(
            f"Target resolution {tuple(targets.masks.shape[-2:])} does not match masks {tuple(final_masks.shape[-2:])}"
        )
    match = hungarian_match(matching_cost(final_logits, final_masks, targets, config)) if len(targets) else \
        MatchResult(pairs=[], unmatched_queries=list(range(final_logits.shape[0])))

    final = _layer_loss(final_logits, final_masks, targets, match, config)
    aux = []
    if config.aux_supervision:
        for prediction in predictions[:-1]:
            logits, masks = _unpack(prediction)
            layer_match = match
            if config.rematch_aux_layers and len(targets):
                layer_match = hungarian_match(matching_cost(logits, masks, targets, config))
            aux.append(_layer_loss(logits, masks, targets, layer_match, config))

    for name in ('cls', 'pixel', 'dice'):
        for layer in [final] + aux:
            if not torch.isfinite(getattr(layer, name)):
                raise NumericalError(f"Non-finite {name} loss", component=name)
    total = final.weighted(config)
    for layer in aux:
        total = total + layer.weighted(config)
    return LossBreakdown(total=total, cls=final.cls, pixel=final.pixel, dice=final.dice, aux=aux, match=match)


def average_losses(losses: Sequence[LossBreakdown]) -> LossBreakdown:
    count = len(losses)
    aux = []
    for i in range(len(losses[0].aux)):
        aux.append(LayerLoss(
            cls=sum(l.aux[i].cls for l in losses) / count,
            pixel=sum(l.aux[i].pixel for l in losses) / count,
            dice=sum(l.aux[i].dice for l in losses) / count,
        ))
    return LossBreakdown(
        total=sum(l.total for l in losses) / count,
        cls=sum(l.cls for l in losses) / count,
        pixel=sum(l.pixel for l in losses) / count,
        dice=sum(l.dice for l in losses) / count,
        aux=aux,
    )


@dataclass
class TrainingExample:
    image: SceneImage
    targets: RasterizedTargets
    concept_ids: List[int]


@dataclass
class TrainResult:
    steps: int
    loss_log: pd.DataFrame


class ConceptSegTrainer:
    """
    Deterministic training loop: the epoch order comes from a generator seeded with
    config.seed, parameters from build_model's seed. Frozen tensors never reach the
    optimizer.
    """

    def __init__(self, model: ConceptSegModel, examples: Sequence[TrainingExample],
                 concept_table: CategoryEmbeddingTable, class_ids: Sequence[int], config: TrainConfig):
        if not examples:
            raise ValidationError("Training needs a non-empty dataset")
        self.config = check_config(config, name='train')
        self.model = model
        self.examples = list(examples)
        self.concept_table = concept_table
        self.class_ids = list(class_ids)
        self.class_embeddings = concept_table.as_tensor(model.dtype)[self.class_ids]
        if self.config.freeze_backbone:
            model.backbone.freeze()
        else:
            model.backbone.unfreeze()
        trainable = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(trainable, lr=self.config.learning_rate,
                                           weight_decay=self.config.weight_decay)
        self._order_rng = np.random.default_rng(self.config.seed)
        self.step_count = 0

    def batches_for_epoch(self) -> List[List[TrainingExample]]:
        order = self._order_rng.permutation(len(self.examples))
        size = self.config.batch_size
        return [[self.examples[i] for i in order[start:start + size]] for start in range(0, len(order), size)]

    def forward_batch(self, batch: Sequence[TrainingExample]):
        context = BatchConceptContext.build([ex.concept_ids for ex in batch], self.concept_table,
                                            dtype=self.model.dtype)
        pixels = images_to_tensor([ex.image for ex in batch], dtype=self.model.dtype)
        return self.model(pixels, context.embeddings, context.membership_tensor(), self.class_embeddings)

    def batch_loss(self, batch: Sequence[TrainingExample]) -> LossBreakdown:
        output = self.forward_batch(batch)
        losses = []
        for b, example in enumerate(batch):
            layers = [(layer.class_logits[b], layer.mask_logits[b]) for layer in output.layers]
            losses.append(compute_loss(layers, example.targets, self.config))
        return average_losses(losses)

    def step(self, batch: Sequence[TrainingExample]) -> LossBreakdown:
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        loss = self.batch_loss(batch)
        if not torch.isfinite(loss.total):
            raise NumericalError(f"Non-finite total loss at step {self.step_count + 1}", component='total')
        loss.total.backward()
        self.optimizer.step()
        self.step_count += 1
        return loss

    def fit(self) -> TrainResult:
        limit = self.config.max_steps
        records = []
        for epoch in range(self.config.epochs):
            for batch in self.batches_for_epoch():
                if limit is not None and self.step_count >= limit:
                    break
                loss = self.step(batch)
                records.append({'step': self.step_count, **loss.as_dict()})
                if self.step_count % self.config.log_every == 0:
                    logger.info(
                        f"step {self.step_count} epoch {epoch + 1}: total={records[-1]['total']:.4f} "
                        f"cls={records[-1]['cls']:.4f} pixel={records[-1]['pixel']:.4f} dice={records[-1]['dice']:.4f}"
                    )
            if limit is not None and self.step_count >= limit:
                break
        self.model.eval()
        return TrainResult(steps=self.step_count, loss_log=pd.DataFrame(records, columns=LOSS_COLUMNS))


def fit(examples: Sequence[TrainingExample], model: ConceptSegModel, config: TrainConfig,
        concept_table: CategoryEmbeddingTable, class_ids: Sequence[int]) -> TrainResult:
    """Train ``model`` in place; the caller serializes the checkpoint and loss log."""
    ConceptSegUtilityHelpers.seed_everything(config.seed)
    return ConceptSegTrainer(model, examples, concept_table, class_ids, config).fit()


def write_loss_log(loss_log: pd.DataFrame, path) -> None:
    loss_log.to_csv(path, index=False, float_format='%.10g')
