"""
Evaluation metrics: panoptic quality (with SQ/RQ), mean IoU, COCO-style instance
mAP and concept-set precision/recall.

Every metric keeps summable per-category counts so results over many images are
accumulated by adding counts before dividing.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from django.core.exceptions import ValidationError

from segApp.helpers.cs_types import VOID, PanopticSegmentation, Vocabulary

logger = logging.getLogger(__name__)

MATCH_IOU = 0.5
MAP_IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
MAP_RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def _check_shapes(pred_shape, gt_shape):
    if tuple(pred_shape) != tuple(gt_shape):
        raise ValidationError(f"Prediction shape {tuple(pred_shape)} does not match ground truth {tuple(gt_shape)}")


class PQStatCat:
    def __init__(self):
        self.iou = 0.0
        self.tp = 0
        self.fp = 0
        self.fn = 0

    def __iadd__(self, other: 'PQStatCat'):
        self.iou += other.iou
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def counted(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    def pq(self) -> float:
        return self.iou / (self.tp + 0.5 * self.fp + 0.5 * self.fn)

    def sq(self) -> float:
        return self.iou / self.tp if self.tp else 0.0

    def rq(self) -> float:
        return self.tp / (self.tp + 0.5 * self.fp + 0.5 * self.fn)

    def as_dict(self) -> dict:
        return {'iou_sum': self.iou, 'tp': self.tp, 'fp': self.fp, 'fn': self.fn,
                'pq': self.pq(), 'sq': self.sq(), 'rq': self.rq()}


class PQReport:
    """Per-category PQ counts with category-averaged PQ/SQ/RQ views."""

    def __init__(self, vocabulary: Optional[Vocabulary] = None):
        self.vocabulary = vocabulary
        self.pq_per_cat: Dict[int, PQStatCat] = defaultdict(PQStatCat)

    def __getitem__(self, category_id: int) -> PQStatCat:
        return self.pq_per_cat[category_id]

    def __iadd__(self, other: 'PQReport'):
        for category_id, stat in other.pq_per_cat.items():
            self.pq_per_cat[category_id] += stat
        return self

    def average(self, category_ids: Optional[Iterable[int]] = None) -> dict:
        """Mean PQ/SQ/RQ over the given categories, skipping those with tp+fp+fn == 0."""
        ids = sorted(self.pq_per_cat) if category_ids is None else list(category_ids)
        pq = sq = rq = 0.0
        n = 0
        for category_id in ids:
            stat = self.pq_per_cat.get(category_id)
            if stat is None or not stat.counted:
                continue
            n += 1
            pq += stat.pq()
            sq += stat.sq()
            rq += stat.rq()
        return {'pq': pq / n if n else 0.0, 'sq': sq / n if n else 0.0, 'rq': rq / n if n else 0.0, 'n': n}

    @property
    def pq(self) -> float:
        return self.average()['pq']

    @property
    def sq(self) -> float:
        return self.average()['sq']

    @property
    def rq(self) -> float:
        return self.average()['rq']

    def breakdowns(self) -> dict:
        out = {'all': self.average()}
        if self.vocabulary is not None:
            out['things'] = self.average(self.vocabulary.thing_ids)
            out['stuff'] = self.average(self.vocabulary.stuff_ids)
            out['seen'] = self.average(self.vocabulary.seen_ids)
            out['unseen'] = self.average(self.vocabulary.unseen_ids)
        return out

    def per_category(self) -> Dict[str, dict]:
        return {str(c): self.pq_per_cat[c].as_dict() for c in sorted(self.pq_per_cat) if self.pq_per_cat[c].counted}


def _segment_areas(panoptic: PanopticSegmentation) -> Dict[int, int]:
    ids, counts = np.unique(panoptic.id_map, return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts) if i != 0}


def panoptic_quality(pred: PanopticSegmentation, gt: PanopticSegmentation,
                     vocabulary: Optional[Vocabulary] = None) -> PQReport:
    """
    Standard panoptic quality for one image pair.

    Same-category pairs with IoU > 0.5 are true positives. Ground-truth id 0 is
    void: void pixels are removed from the union of every pair, and a predicted
    segment lying more than half in void is neither matched nor counted as a
    false positive.

    Raises:
        ValidationError: Dimension mismatch.
    """
    _check_shapes(pred.shape, gt.shape)
    report = PQReport(vocabulary)
    gt_areas, pred_areas = _segment_areas(gt), _segment_areas(pred)
    gt_categories = {s.segment_id: s.category_id for s in gt.segments}
    pred_categories = {s.segment_id: s.category_id for s in pred.segments}

    offset = int(pred.id_map.max()) + 1
    pair_ids, pair_counts = np.unique(gt.id_map * offset + pred.id_map, return_counts=True)
    intersections = {(int(k) // offset, int(k) % offset): int(c) for k, c in zip(pair_ids, pair_counts)}

    matched_gt, matched_pred = set(), set()
    for (gt_id, pred_id), inter in sorted(intersections.items()):
        if gt_id == 0 or pred_id == 0:
            continue
        if gt_categories[gt_id] != pred_categories[pred_id]:
            continue
        union = pred_areas[pred_id] + gt_areas[gt_id] - inter - intersections.get((0, pred_id), 0)
        iou = inter / union
        if iou > MATCH_IOU:
            stat = report[gt_categories[gt_id]]
            stat.tp += 1
            stat.iou += iou
            matched_gt.add(gt_id)
            matched_pred.add(pred_id)

    for gt_id in sorted(gt_areas):
        if gt_id not in matched_gt:
            report[gt_categories[gt_id]].fn += 1
    for pred_id, area in sorted(pred_areas.items()):
        if pred_id in matched_pred:
            continue
        if intersections.get((0, pred_id), 0) / area > MATCH_IOU:
            continue
        report[pred_categories[pred_id]].fp += 1
    return report


@dataclass
class MeanIoUReport:
    intersection: Dict[int, int] = field(default_factory=lambda: defaultdict(int))
    union: Dict[int, int] = field(default_factory=lambda: defaultdict(int))
    vocabulary: Optional[Vocabulary] = None

    def __iadd__(self, other: 'MeanIoUReport'):
        for c, v in other.intersection.items():
            self.intersection[c] += v
        for c, v in other.union.items():
            self.union[c] += v
        return self

    def per_category(self) -> Dict[int, float]:
        return {c: self.intersection[c] / self.union[c] for c in sorted(self.union) if self.union[c] > 0}

    def mean(self, category_ids: Optional[Iterable[int]] = None) -> Optional[float]:
        """Mean over categories present in either map; None when none is."""
        ious = self.per_category()
        ids = ious.keys() if category_ids is None else [c for c in category_ids if c in ious]
        values = [ious[c] for c in ids]
        return float(np.mean(values)) if values else None

    @property
    def miou(self) -> float:
        value = self.mean()
        return 0.0 if value is None else value

    def breakdowns(self) -> dict:
        out = {'all': self.mean()}
        if self.vocabulary is not None:
            out['seen'] = self.mean(self.vocabulary.seen_ids)
            out['unseen'] = self.mean(self.vocabulary.unseen_ids)
        return out


def mean_iou(pred_semantic: np.ndarray, gt_semantic: np.ndarray, vocabulary: Optional[Vocabulary] = None) -> MeanIoUReport:
    """
    Per-category IoU over the pixels whose ground truth is not VOID. Categories
    absent from both maps are left out of the mean.

    Raises:
        ValidationError: Dimension mismatch.
    """
    pred_semantic, gt_semantic = np.asarray(pred_semantic), np.asarray(gt_semantic)
    _check_shapes(pred_semantic.shape, gt_semantic.shape)
    valid = gt_semantic != VOID
    pred, gt = pred_semantic[valid], gt_semantic[valid]
    report = MeanIoUReport(vocabulary=vocabulary)
    for category_id in np.union1d(np.unique(pred), np.unique(gt)):
        if category_id == VOID:
            continue
        in_pred, in_gt = pred == category_id, gt == category_id
        report.intersection[int(category_id)] += int(np.sum(in_pred & in_gt))
        report.union[int(category_id)] += int(np.sum(in_pred | in_gt))
    return report


@dataclass
class InstanceTarget:
    mask: np.ndarray
    category_id: int
    image_id: str = ''


def thing_targets(panoptic: PanopticSegmentation, vocabulary: Vocabulary) -> List[InstanceTarget]:
    """Visible thing segments of a ground-truth annotation."""
    out = []
    for segment in panoptic.segments:
        mask = panoptic.id_map == segment.segment_id
        if vocabulary.is_thing(segment.category_id) and mask.any():
            out.append(InstanceTarget(mask=mask, category_id=segment.category_id, image_id=panoptic.image_id))
    return out


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def _average_precision(tps: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from a score-ordered TP indicator."""
    if num_gt == 0:
        return 0.0
    if tps.size == 0:
        return 0.0
    tp_cum = np.cumsum(tps)
    fp_cum = np.cumsum(1 - tps)
    recall = tp_cum / num_gt
    precision = tp_cum / (tp_cum + fp_cum)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    indices = np.searchsorted(recall, MAP_RECALL_POINTS, side='left')
    sampled = [precision[i] if i < precision.size else 0.0 for i in indices]
    return float(np.mean(sampled))


@dataclass
class MapReport:
    map: float
    per_category: Dict[int, float]
    per_threshold: Dict[str, float]


def instance_map(preds: Sequence, gts: Mapping[str, Sequence[InstanceTarget]]) -> MapReport:
    """
    COCO-style mask mAP: per category and IoU threshold in 0.50:0.05:0.95, predictions
    are taken by descending score (ties in insertion order) and each is greedily
    matched to the unmatched same-image ground truth with the highest IoU >= the
    threshold; on an IoU tie the later ground truth wins, as in pycocotools. AP
    uses 101-point interpolated precision; mAP averages over thresholds and over
    categories with at least one ground-truth instance.
    """
    gt_by_category: Dict[int, List[InstanceTarget]] = defaultdict(list)
    for image_id in sorted(gts):
        for target in gts[image_id]:
            gt_by_category[target.category_id].append(target)
    if not gt_by_category:
        return MapReport(map=0.0, per_category={}, per_threshold={})

    ap_table = np.zeros((len(MAP_IOU_THRESHOLDS), len(gt_by_category)))
    categories = sorted(gt_by_category)
    for column, category_id in enumerate(categories):
        targets = gt_by_category[category_id]
        ranked = sorted([(i, p) for i, p in enumerate(preds) if p.category_id == category_id],
                        key=lambda item: (-item[1].score, item[0]))
        ious = np.array([[_mask_iou(p.mask, t.mask) if p.image_id == t.image_id else 0.0 for t in targets]
                         for _, p in ranked]).reshape(len(ranked), len(targets))
        same_image = np.array([[p.image_id == t.image_id for t in targets]
                               for _, p in ranked], dtype=bool).reshape(len(ranked), len(targets))
        for row, threshold in enumerate(MAP_IOU_THRESHOLDS):
            matched = np.zeros(len(targets), dtype=bool)
            tps = np.zeros(len(ranked))
            for k in range(len(ranked)):
                best, best_iou = -1, min(threshold, 1 - 1e-10)
                for g in range(len(targets)):
                    if matched[g] or not same_image[k, g]:
                        continue
                    if ious[k, g] < best_iou:
                        continue
                    best, best_iou = g, ious[k, g]
                if best >= 0:
                    matched[best] = True
                    tps[k] = 1
            ap_table[row, column] = _average_precision(tps, len(targets))

    return MapReport(
        map=float(ap_table.mean()),
        per_category={c: float(ap_table[:, i].mean()) for i, c in enumerate(categories)},
        per_threshold={f'{t:.2f}': float(ap_table[i].mean()) for i, t in enumerate(MAP_IOU_THRESHOLDS)},
    )


@dataclass
class ConceptPRReport:
    per_image: Dict[str, dict] = field(default_factory=dict)
    true_positives: int = 0
    predicted: int = 0
    relevant: int = 0

    @staticmethod
    def _ratio(num: int, den: int) -> Optional[float]:
        return num / den if den else None

    def add(self, image_id: str, predicted: Iterable[int], gt_categories: Iterable[int]) -> dict:
        predicted, gt_categories = set(int(c) for c in predicted), set(int(c) for c in gt_categories)
        hits = len(predicted & gt_categories)
        entry = {
            'precision': self._ratio(hits, len(predicted)),
            'recall': self._ratio(hits, len(gt_categories)),
            'predicted': sorted(predicted),
            'ground_truth': sorted(gt_categories),
        }
        self.per_image[image_id] = entry
        self.true_positives += hits
        self.predicted += len(predicted)
        self.relevant += len(gt_categories)
        return entry

    @property
    def precision(self) -> Optional[float]:
        return self._ratio(self.true_positives, self.predicted)

    @property
    def recall(self) -> Optional[float]:
        return self._ratio(self.true_positives, self.relevant)

    def as_dict(self) -> dict:
        return {'precision': self.precision, 'recall': self.recall,
                'per_image': {k: self.per_image[k] for k in sorted(self.per_image)}}


def concept_precision_recall(predicted, gt_categories: Iterable[int], image_id: str = '') -> ConceptPRReport:
    """
    Set precision/recall of predicted concept categories. ``predicted`` is a
    MappedConceptSet or an iterable of category ids. Precision is None for an
    empty prediction; recall is None for an empty ground truth.
    """
    if hasattr(predicted, 'category_ids'):
        image_id = image_id or predicted.image_id
        predicted = predicted.category_ids()
    report = ConceptPRReport()
    report.add(image_id, predicted, gt_categories)
    return report


def build_metric_report(pq: PQReport, miou: MeanIoUReport, map_report: Optional[MapReport] = None,
                        concept_pr: Optional[ConceptPRReport] = None, extra: Optional[dict] = None) -> dict:
    """The JSON metric document: pq, sq, rq, per_category, miou, map, concept_pr."""
    per_category = {}
    ious = miou.per_category()
    for key, stat in pq.per_category().items():
        per_category[key] = {**stat, 'iou': ious.get(int(key))}
    for category_id, iou in ious.items():
        per_category.setdefault(str(category_id), {'iou': iou})
    report = {
        'pq': pq.pq,
        'sq': pq.sq,
        'rq': pq.rq,
        'pq_breakdown': pq.breakdowns(),
        'per_category': dict(sorted(per_category.items(), key=lambda kv: int(kv[0]))),
        'miou': miou.miou,
        'miou_breakdown': miou.breakdowns(),
        'map': None if map_report is None else map_report.map,
        'concept_pr': None if concept_pr is None else {'precision': concept_pr.precision, 'recall': concept_pr.recall},
    }
    report.update(extra or {})
    return report
