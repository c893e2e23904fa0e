# segApp/tests/utils.py
"""
Shared fixtures and independent oracles for the segApp test suites.
"""
import itertools
import math
import os

import numpy as np
import torch

from segApp.helpers.cs_config import ModelConfig, SceneConfig, TextEncoderSpec, TrainConfig
from segApp.helpers.cs_synth import default_vocabulary
from segApp.helpers.cs_types import Category, PanopticSegmentation, SceneImage, Segment, Vocabulary

RUN_SLOW = os.environ.get('CONCEPTSEG_RUN_SLOW', '').lower() in ('1', 'true', 'yes')


def tiny_vocabulary() -> Vocabulary:
    """3 seen things, 1 unseen thing, 1 seen stuff, 1 unseen stuff (ids 0-5)."""
    return default_vocabulary(seen_things=3, unseen_things=1, seen_stuff=1, unseen_stuff=1)


def toy_vocabulary(labels_and_things, seen=None) -> Vocabulary:
    categories = [Category(i, label, is_thing) for i, (label, is_thing) in enumerate(labels_and_things)]
    return Vocabulary(categories=categories, seen_mask=list(seen) if seen else [True] * len(categories))


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(dim=8, heads=2, num_queries=2, enhancer_layers=1, decoder_layers=1, sampling_points=2)
    values.update(overrides)
    return ModelConfig(**values)


def tiny_text_spec(dim: int = 8, seed: int = 0) -> TextEncoderSpec:
    return TextEncoderSpec(dim=dim, seed=seed)


def tiny_scene_config(**overrides) -> SceneConfig:
    values = dict(height=16, width=16, max_objects=2, noise_std=0.0, seed=0)
    values.update(overrides)
    return SceneConfig(**values)


def plain_train_config(**overrides) -> TrainConfig:
    values = dict(aux_supervision=False, no_object_weight=0.1)
    values.update(overrides)
    return TrainConfig(**values)


def random_image(height: int = 16, width: int = 16, seed: int = 0, image_id: str = 'img_000') -> SceneImage:
    rng = np.random.default_rng(seed)
    return SceneImage(pixels=rng.integers(0, 256, size=(height, width, 3)) / 255.0, image_id=image_id)


def panoptic_from_map(id_map, categories, image_id: str = 'img_000') -> PanopticSegmentation:
    """``categories`` maps segment id -> category id."""
    segments = [Segment(segment_id=int(sid), category_id=int(cat)) for sid, cat in sorted(categories.items())]
    return PanopticSegmentation(id_map=np.asarray(id_map), segments=segments, image_id=image_id)


def random_panoptic(rng, height: int, width: int, num_segments: int, num_categories: int,
                    allow_void: bool, image_id: str = 'img_000') -> PanopticSegmentation:
    low = 0 if allow_void else 1
    id_map = rng.integers(low, num_segments + 1, size=(height, width))
    categories = {sid: int(rng.integers(0, num_categories)) for sid in range(1, num_segments + 1)}
    return panoptic_from_map(id_map, categories, image_id=image_id)


def sampled_gradient_error(module: torch.nn.Module, loss_fn, samples_per_tensor: int = 4,
                           step: float = 1e-5, seed: int = 0):
    """
    Central-difference gradient check on sampled entries of every trainable tensor.

    Returns:
        (worst relative error, name of the worst tensor). Per tensor the error is
        max|analytic - numeric| / max(max|numeric|, max|analytic|, 1e-6).
    """
    rng = np.random.default_rng(seed)
    params = [(name, p) for name, p in module.named_parameters() if p.requires_grad]
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    analytic = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for name, p in params}

    worst, worst_name = 0.0, None
    with torch.no_grad():
        for name, p in params:
            flat = p.data.view(-1)
            picks = rng.choice(flat.numel(), size=min(samples_per_tensor, flat.numel()), replace=False)
            a_vals, n_vals = [], []
            for index in picks:
                original = flat[index].item()
                flat[index] = original + step
                plus = loss_fn().item()
                flat[index] = original - step
                minus = loss_fn().item()
                flat[index] = original
                n_vals.append((plus - minus) / (2 * step))
                a_vals.append(analytic[name].view(-1)[index].item())
            a_vals, n_vals = np.array(a_vals), np.array(n_vals)
            scale = max(np.abs(n_vals).max(), np.abs(a_vals).max(), 1e-6)
            error = float(np.abs(a_vals - n_vals).max() / scale)
            if error > worst:
                worst, worst_name = error, name
    return worst, worst_name


def brute_force_assignment(cost):
    """Minimum total cost over every injective assignment of min(K, T) pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    num_queries, num_targets = cost.shape
    best, best_pairs = math.inf, None
    if num_queries >= num_targets:
        for queries in itertools.permutations(range(num_queries), num_targets):
            total = sum(cost[q, t] for t, q in enumerate(queries))
            if total < best:
                best, best_pairs = total, sorted((q, t) for t, q in enumerate(queries))
    else:
        for targets in itertools.permutations(range(num_targets), num_queries):
            total = sum(cost[q, t] for q, t in enumerate(targets))
            if total < best:
                best, best_pairs = total, [(q, t) for q, t in enumerate(targets)]
    return best, best_pairs


def brute_force_pq(pred: PanopticSegmentation, gt: PanopticSegmentation) -> dict:
    """Pixel-set PQ with void (gt id 0) excluded from unions; returns per-category counts."""
    stats = {}

    def stat(category):
        return stats.setdefault(category, {'iou': 0.0, 'tp': 0, 'fp': 0, 'fn': 0})

    gt_void = gt.id_map == 0
    gt_segs = [s for s in gt.segments if (gt.id_map == s.segment_id).any()]
    pred_segs = [s for s in pred.segments if (pred.id_map == s.segment_id).any()]
    matched_gt, matched_pred = set(), set()
    for g in gt_segs:
        g_mask = gt.id_map == g.segment_id
        for p in pred_segs:
            if p.category_id != g.category_id:
                continue
            p_mask = pred.id_map == p.segment_id
            inter = np.sum(g_mask & p_mask)
            union = np.sum((g_mask | p_mask) & ~(p_mask & gt_void))
            if union and inter / union > 0.5:
                stat(g.category_id)['tp'] += 1
                stat(g.category_id)['iou'] += inter / union
                matched_gt.add(g.segment_id)
                matched_pred.add(p.segment_id)
    for g in gt_segs:
        if g.segment_id not in matched_gt:
            stat(g.category_id)['fn'] += 1
    for p in pred_segs:
        if p.segment_id in matched_pred:
            continue
        p_mask = pred.id_map == p.segment_id
        if np.sum(p_mask & gt_void) / np.sum(p_mask) > 0.5:
            continue
        stat(p.category_id)['fp'] += 1
    return stats


def brute_force_pq_average(stats: dict) -> float:
    values = []
    for s in stats.values():
        if s['tp'] + s['fp'] + s['fn'] == 0:
            continue
        values.append(s['iou'] / (s['tp'] + 0.5 * s['fp'] + 0.5 * s['fn']))
    return sum(values) / len(values) if values else 0.0


def brute_force_miou(pred_semantic, gt_semantic, void: int = -1) -> dict:
    ious = {}
    height, width = gt_semantic.shape
    categories = set()
    for y in range(height):
        for x in range(width):
            if gt_semantic[y, x] == void:
                continue
            categories.add(int(gt_semantic[y, x]))
            if pred_semantic[y, x] != void:
                categories.add(int(pred_semantic[y, x]))
    for c in categories:
        inter = union = 0
        for y in range(height):
            for x in range(width):
                if gt_semantic[y, x] == void:
                    continue
                in_p, in_g = pred_semantic[y, x] == c, gt_semantic[y, x] == c
                inter += int(in_p and in_g)
                union += int(in_p or in_g)
        ious[c] = inter / union
    return ious
