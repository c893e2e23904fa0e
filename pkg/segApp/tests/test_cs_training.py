# segApp/tests/test_cs_training.py
"""
Tests for target rasterization, Hungarian matching, the composite loss, the
training loop and the checkpoint container.
"""
import itertools
import math
from unittest.mock import patch

import numpy as np
import pytest
import torch
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from segApp.helpers.cs_checkpoint import MAGIC, load_checkpoint, restore_model, save_checkpoint
from segApp.helpers.cs_config import RunConfig
from segApp.helpers.cs_embeddings import encode_text
from segApp.helpers.cs_errors import DatasetParseError, NumericalError
from segApp.helpers.cs_model import build_model
from segApp.helpers.cs_synth import default_vocabulary, generate_dataset
from segApp.helpers.cs_training import (
    LOSS_COLUMNS,
    ConceptSegTrainer,
    LossBreakdown,
    RasterizedTargets,
    TrainingExample,
    compute_loss,
    dice_loss,
    fit,
    hungarian_match,
    pixel_bce_loss,
    rasterize_targets,
    write_loss_log,
)
from segApp.tests.utils import (
    brute_force_assignment,
    panoptic_from_map,
    plain_train_config,
    tiny_model_config,
    tiny_scene_config,
    tiny_text_spec,
    tiny_vocabulary,
)


def _log_softmax(row):
    top = max(row)
    log_total = top + math.log(sum(math.exp(v - top) for v in row))
    return [v - log_total for v in row]


def _bce(logit, target):
    return max(logit, 0.0) - logit * target + math.log1p(math.exp(-abs(logit)))


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def _smallest_optimal_pairs(cost, best):
    num_queries, num_targets = cost.shape
    n_pairs = min(num_queries, num_targets)
    candidates = []
    for queries in itertools.combinations(range(num_queries), n_pairs):
        for targets in itertools.permutations(range(num_targets), n_pairs):
            pairs = list(zip(queries, targets))
            if sum(cost[q, t] for q, t in pairs) == best:
                candidates.append(pairs)
    return min(candidates)


def _oracle_loss(class_logits, mask_logits, target_masks, target_classes, lambdas, no_object_weight):
    """Enumerate every injection, pick the cheapest, then recompute each component."""
    num_queries, columns = class_logits.shape
    num_targets = len(target_classes)
    pixels = mask_logits[0].size

    def pair_terms(q, t):
        cls = -_log_softmax(list(class_logits[q]))[target_classes[t]]
        bce = sum(_bce(l, g) for l, g in zip(mask_logits[q].ravel(), target_masks[t].ravel())) / pixels
        probs = [_sigmoid(l) for l in mask_logits[q].ravel()]
        inter = sum(p * g for p, g in zip(probs, target_masks[t].ravel()))
        dice = 1.0 - (2.0 * inter + 1.0) / (sum(probs) + target_masks[t].sum() + 1.0)
        return cls, bce, dice

    best, best_pairs = math.inf, None
    for queries in itertools.permutations(range(num_queries), num_targets):
        pairs = list(zip(queries, range(num_targets)))
        cost = sum(lambdas[0] * c + lambdas[1] * b + lambdas[2] * d for c, b, d in (pair_terms(q, t) for q, t in pairs))
        if cost < best:
            best, best_pairs = cost, pairs

    weighted, weight_sum = 0.0, 0.0
    matched = {q: t for q, t in best_pairs}
    for q in range(num_queries):
        log_probs = _log_softmax(list(class_logits[q]))
        if q in matched:
            weighted += -log_probs[target_classes[matched[q]]]
            weight_sum += 1.0
        else:
            weighted += -no_object_weight * log_probs[columns - 1]
            weight_sum += no_object_weight
    cls = weighted / weight_sum
    terms = [pair_terms(q, t) for q, t in best_pairs]
    pixel = sum(t[1] for t in terms) / len(terms)
    dice = sum(t[2] for t in terms) / len(terms)
    return lambdas[0] * cls + lambdas[1] * pixel + lambdas[2] * dice, cls, pixel, dice


class LossComponentTestCase(SimpleTestCase):

    def test_dice_closed_forms(self):
        ones = torch.ones(2, 2, dtype=torch.float64)
        self.assertAlmostEqual(dice_loss(ones, ones).item(), 0.0)
        self.assertAlmostEqual(dice_loss(ones, torch.zeros(2, 2)).item(), 0.8)

    def test_dice_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        probs, target = rng.random((4, 5)), (rng.random((4, 5)) > 0.5).astype(float)
        expected = 1.0 - (2.0 * sum(p * t for p, t in zip(probs.ravel(), target.ravel())) + 1.0) / (
            probs.sum() + target.sum() + 1.0)
        self.assertAlmostEqual(dice_loss(torch.tensor(probs), torch.tensor(target)).item(), expected, places=9)

    def test_bce_at_zero_logits_is_ln2(self):
        target = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        self.assertAlmostEqual(pixel_bce_loss(torch.zeros(2, 2, dtype=torch.float64), target).item(), math.log(2))

    def test_bce_saturates(self):
        target = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        self.assertLess(pixel_bce_loss(200.0 * target - 100.0, target).item(), 1e-6)

    def test_bce_matches_oracle(self):
        rng = np.random.default_rng(1)
        logits, target = rng.normal(0, 3, (3, 3)), (rng.random((3, 3)) > 0.5).astype(float)
        expected = sum(_bce(l, t) for l, t in zip(logits.ravel(), target.ravel())) / 9
        self.assertAlmostEqual(pixel_bce_loss(torch.tensor(logits), torch.tensor(target)).item(), expected, places=9)

    def test_shape_mismatch(self):
        with self.assertRaises(ValidationError):
            dice_loss(torch.ones(2, 2), torch.ones(2, 3))
        with self.assertRaises(ValidationError):
            pixel_bce_loss(torch.ones(2, 2), torch.ones(3, 2))


class HungarianMatchTestCase(SimpleTestCase):

    def test_forced_optimum(self):
        match = hungarian_match([[0, 9], [9, 0]])
        self.assertEqual(match.pairs, [(0, 0), (1, 1)])
        self.assertEqual(match.total_cost([[0, 9], [9, 0]]), 0.0)

    def test_single_pair(self):
        self.assertEqual(hungarian_match([[5]]).pairs, [(0, 0)])

    def test_ties_take_the_lexicographically_smallest_pairs(self):
        self.assertEqual(hungarian_match(np.ones((3, 2))).pairs, [(0, 0), (1, 1)])
        self.assertEqual(hungarian_match(np.ones((2, 3))).pairs, [(0, 0), (1, 1)])
        self.assertEqual(hungarian_match(np.ones((3, 2))).unmatched_queries, [2])

    def test_matches_exhaustive_search_on_integer_costs(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            num_targets = int(rng.integers(1, 6))
            num_queries = int(rng.integers(1, 7))
            # narrow cost ranges force ties
            high = int(rng.choice([2, 4, 100]))
            cost = rng.integers(0, high, size=(num_queries, num_targets)).astype(float)
            best, _ = brute_force_assignment(cost)
            match = hungarian_match(cost)
            self.assertEqual(match.total_cost(cost), best)
            self.assertEqual(match.pairs, _smallest_optimal_pairs(cost, best))
            self.assertEqual(len(match.pairs), min(num_queries, num_targets))

    def test_matches_exhaustive_search_on_float_costs(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            cost = rng.normal(size=(5, 4))
            best, _ = brute_force_assignment(cost)
            self.assertAlmostEqual(hungarian_match(cost).total_cost(cost), best, delta=1e-12)

    def test_rejects_non_finite(self):
        with self.assertRaises(NumericalError):
            hungarian_match([[0.0, float('nan')]])


class RasterizeTargetsTestCase(SimpleTestCase):

    def test_area_majority_downsampling(self):
        id_map = np.ones((8, 8), dtype=int)
        id_map[:4, :4] = 2
        id_map[4:7, 4:7] = 3
        panoptic = panoptic_from_map(id_map, {1: 4, 2: 0, 3: 1})
        targets = rasterize_targets(panoptic, stride=4, class_index={4: 0, 0: 1, 1: 2})
        self.assertEqual(targets.segment_ids, [1, 2, 3])
        self.assertEqual(targets.classes.tolist(), [0, 1, 2])
        np.testing.assert_array_equal(targets.masks[0].numpy(), [[0, 1], [1, 0]])
        np.testing.assert_array_equal(targets.masks[1].numpy(), [[1, 0], [0, 0]])
        np.testing.assert_array_equal(targets.masks[2].numpy(), [[0, 0], [0, 1]])

    def test_vanishing_segment_is_dropped_with_warning(self):
        id_map = np.ones((8, 8), dtype=int)
        id_map[0, 0] = 2
        panoptic = panoptic_from_map(id_map, {1: 4, 2: 0})
        with self.assertLogs('segApp.helpers.cs_training', level='WARNING'):
            targets = rasterize_targets(panoptic, stride=4)
        self.assertEqual(targets.segment_ids, [1])
        self.assertEqual(len(targets), 1)

    def test_category_outside_class_table(self):
        panoptic = panoptic_from_map(np.ones((8, 8), dtype=int), {1: 3})
        with self.assertRaises(ValidationError):
            rasterize_targets(panoptic, stride=4, class_index={0: 0})


@pytest.mark.unit
class TestComputeLoss:

    def _targets(self):
        masks = torch.tensor([[[1, 1], [0, 0]], [[0, 0], [1, 1]]], dtype=torch.float64)
        return RasterizedTargets(masks=masks, classes=torch.tensor([2, 0]))

    def test_perfect_prediction_has_near_zero_loss(self):
        targets = self._targets()
        class_logits = torch.full((3, 4), -50.0, dtype=torch.float64)
        class_logits[0, 0] = 50.0
        class_logits[1, 2] = 50.0
        class_logits[2, 3] = 50.0
        mask_logits = torch.stack([
            200.0 * targets.masks[1] - 100.0, 200.0 * targets.masks[0] - 100.0, torch.full((2, 2), -100.0,
                                                                                         dtype=torch.float64),
        ])
        loss = compute_loss([(class_logits, mask_logits)], targets, plain_train_config())
        assert loss.match.pairs == [(0, 1), (1, 0)]
        assert loss.cls.item() < 1e-6
        assert loss.pixel.item() < 1e-6
        assert loss.dice.item() < 1e-6

    def test_classification_only_when_mask_weights_vanish(self):
        targets = self._targets()
        class_logits = torch.randn(3, 4, dtype=torch.float64)
        mask_logits = torch.randn(3, 2, 2, dtype=torch.float64)
        config = plain_train_config(lambda_pixel=0.0, lambda_dice=0.0)
        loss = compute_loss([(class_logits, mask_logits)], targets, config)
        assert loss.total.item() == config.lambda_cls * loss.cls.item()

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            num_queries = int(rng.integers(2, 6))
            num_targets = int(rng.integers(1, min(num_queries, 4) + 1))
            num_classes = int(rng.integers(2, 7))
            class_logits = rng.normal(0, 2, (num_queries, num_classes + 1))
            mask_logits = rng.normal(0, 2, (num_queries, 3, 3))
            target_masks = (rng.random((num_targets, 3, 3)) > 0.5).astype(float)
            target_masks[:, 0, 0] = 1.0
            target_classes = [int(c) for c in rng.integers(0, num_classes, size=num_targets)]
            targets = RasterizedTargets(torch.tensor(target_masks), torch.tensor(target_classes))
            config = plain_train_config()
            loss = compute_loss([(torch.tensor(class_logits), torch.tensor(mask_logits))], targets, config)
            total, cls, pixel, dice = _oracle_loss(class_logits, mask_logits, target_masks, target_classes,
                                                   (config.lambda_cls, config.lambda_pixel, config.lambda_dice),
                                                   config.no_object_weight)
            assert loss.total.item() == pytest.approx(total, rel=1e-9)
            assert loss.cls.item() == pytest.approx(cls, rel=1e-9)
            assert loss.pixel.item() == pytest.approx(pixel, rel=1e-9)
            assert loss.dice.item() == pytest.approx(dice, rel=1e-9)

    def test_aux_layers_reuse_the_final_matching(self):
        targets = self._targets()
        layers = [(torch.randn(3, 4, dtype=torch.float64), torch.randn(3, 2, 2, dtype=torch.float64))
                  for _ in range(3)]
        config = plain_train_config(aux_supervision=True)
        loss = compute_loss(layers, targets, config)
        assert len(loss.aux) == 2
        expected = loss.cls * config.lambda_cls + loss.pixel * config.lambda_pixel + loss.dice * config.lambda_dice
        for aux in loss.aux:
            expected = expected + aux.weighted(config)
        assert loss.total.item() == pytest.approx(expected.item(), rel=1e-12)
        without = compute_loss(layers, targets, plain_train_config(aux_supervision=False))
        assert without.aux == []
        assert without.match.pairs == loss.match.pairs
        assert without.total.item() < loss.total.item()

    def test_no_targets_supervises_no_object_only(self):
        empty = RasterizedTargets(torch.zeros(0, 2, 2, dtype=torch.float64), torch.zeros(0, dtype=torch.long))
        class_logits = torch.randn(3, 4, dtype=torch.float64)
        loss = compute_loss([(class_logits, torch.randn(3, 2, 2, dtype=torch.float64))], empty, plain_train_config())
        assert loss.pixel.item() == 0.0
        assert loss.dice.item() == 0.0
        expected = -class_logits.log_softmax(dim=-1)[:, 3].mean()
        assert loss.cls.item() == pytest.approx(expected.item(), rel=1e-12)

    def test_non_finite_component_is_named(self):
        targets = self._targets()
        class_logits = torch.randn(3, 4, dtype=torch.float64)
        class_logits[0, 0] = float('nan')
        with pytest.raises(NumericalError):
            compute_loss([(class_logits, torch.randn(3, 2, 2, dtype=torch.float64))], targets, plain_train_config())

    def test_resolution_mismatch(self):
        with pytest.raises(ValidationError):
            compute_loss([(torch.randn(3, 4), torch.randn(3, 4, 4))], self._targets(), plain_train_config())


def _examples(count=4, seed=0):
    vocab = tiny_vocabulary()
    class_ids = vocab.seen_ids
    class_index = {c: i for i, c in enumerate(class_ids)}
    examples = []
    for image, annotation in generate_dataset(tiny_scene_config(seed=seed), vocab, count=count):
        examples.append(TrainingExample(image, rasterize_targets(annotation, 4, class_index), annotation.category_ids()))
    table = encode_text(vocab.labels, tiny_text_spec())
    return vocab, examples, table, class_ids


@pytest.mark.integration
class TestTrainer:

    def test_zero_epochs_keep_the_initialization(self):
        _, examples, table, class_ids = _examples()
        model = build_model(tiny_model_config(), seed=1)
        initial = {k: v.clone() for k, v in model.state_dict().items()}
        result = fit(examples, model, plain_train_config(epochs=0), table, class_ids)
        assert result.steps == 0
        assert list(result.loss_log.columns) == LOSS_COLUMNS
        for name, tensor in model.state_dict().items():
            assert torch.equal(tensor, initial[name]), name

    def test_zero_gradient_step_without_decay_changes_nothing(self):
        _, examples, table, class_ids = _examples()
        model = build_model(tiny_model_config(), seed=1)
        trainer = ConceptSegTrainer(model, examples, table, class_ids, plain_train_config(weight_decay=0.0))
        initial = {k: v.clone() for k, v in model.state_dict().items()}
        trainable = [p for p in model.parameters() if p.requires_grad]
        zero = sum((p * 0.0).sum() for p in trainable)
        detached = LossBreakdown(total=zero, cls=zero.detach(), pixel=zero.detach(), dice=zero.detach())
        with patch.object(trainer, 'batch_loss', return_value=detached):
            trainer.step(examples[:2])
        for name, tensor in model.state_dict().items():
            assert torch.equal(tensor, initial[name]), name

    def test_frozen_backbone_is_untouched(self):
        _, examples, table, class_ids = _examples()
        model = build_model(tiny_model_config(), seed=2)
        backbone = {k: v.clone() for k, v in model.backbone.state_dict().items()}
        query_feat = model.decoder.query_feat.detach().clone()
        fit(examples, model, plain_train_config(epochs=1, batch_size=2, learning_rate=1e-2), table, class_ids)
        for name, tensor in model.backbone.state_dict().items():
            assert torch.equal(tensor, backbone[name]), name
        assert not torch.equal(model.decoder.query_feat.detach(), query_feat)

    def test_unfrozen_backbone_trains(self):
        _, examples, table, class_ids = _examples()
        model = build_model(tiny_model_config(), seed=2, freeze_backbone=False)
        before = model.backbone.proj.weight.detach().clone()
        fit(examples, model, plain_train_config(epochs=1, freeze_backbone=False, learning_rate=1e-2),
            table, class_ids)
        assert not torch.equal(model.backbone.proj.weight.detach(), before)

    def test_equal_seeds_give_equal_loss_logs(self):
        _, examples, table, class_ids = _examples()
        logs = []
        for _ in range(2):
            model = build_model(tiny_model_config(), seed=3)
            logs.append(fit(examples, model, plain_train_config(epochs=2, batch_size=2, seed=4), table,
                            class_ids).loss_log)
        assert logs[0].equals(logs[1])
        assert len(logs[0]) == 4

    def test_max_steps_caps_training(self):
        _, examples, table, class_ids = _examples()
        model = build_model(tiny_model_config(), seed=3)
        result = fit(examples, model, plain_train_config(epochs=5, batch_size=1, max_steps=3), table, class_ids)
        assert result.steps == 3
        assert result.loss_log['step'].tolist() == [1, 2, 3]

    def test_empty_dataset_rejected(self):
        _, _, table, class_ids = _examples(count=1)
        with pytest.raises(ValidationError):
            ConceptSegTrainer(build_model(tiny_model_config()), [], table, class_ids, plain_train_config())

    def test_loss_log_csv(self, tmp_path):
        _, examples, table, class_ids = _examples()
        result = fit(examples, build_model(tiny_model_config()), plain_train_config(epochs=1, batch_size=2),
                     table, class_ids)
        write_loss_log(result.loss_log, tmp_path / 'loss.csv')
        lines = (tmp_path / 'loss.csv').read_text().splitlines()
        assert lines[0] == 'step,total,cls,pixel,dice'
        assert len(lines) == 3


@pytest.mark.integration
class TestCheckpoint:

    def test_save_then_restore_is_bitwise(self, tmp_path):
        vocab = tiny_vocabulary()
        config = RunConfig(model=tiny_model_config(), text_encoder=tiny_text_spec())
        model = build_model(config.model, seed=5)
        path = save_checkpoint(tmp_path / 'model.cseg', model, config, vocab, extra={'steps': 0})
        assert path.read_bytes()[:8] == MAGIC

        checkpoint = load_checkpoint(path, vocabulary=vocab)
        assert checkpoint.config.model_dump() == config.model_dump()
        assert checkpoint.vocabulary == vocab
        assert checkpoint.header['extra'] == {'steps': 0}
        fresh = restore_model(checkpoint, build_model(config.model, seed=99))
        for name, tensor in model.state_dict().items():
            assert torch.equal(fresh.state_dict()[name], tensor), name

    def test_double_precision_round_trip(self, tmp_path):
        vocab = tiny_vocabulary()
        config = RunConfig(model=tiny_model_config(), text_encoder=tiny_text_spec())
        model = build_model(config.model, seed=5, precision='float64')
        checkpoint = load_checkpoint(save_checkpoint(tmp_path / 'm.cseg', model, config, vocab))
        assert checkpoint.state['decoder.query_feat'].dtype == torch.float64

    def test_vocabulary_mismatch(self, tmp_path):
        config = RunConfig(model=tiny_model_config(), text_encoder=tiny_text_spec())
        path = save_checkpoint(tmp_path / 'm.cseg', build_model(config.model), config, tiny_vocabulary())
        with pytest.raises(ValidationError):
            load_checkpoint(path, vocabulary=default_vocabulary())

    def test_bad_magic_and_truncation(self, tmp_path):
        bogus = tmp_path / 'bogus.cseg'
        bogus.write_bytes(b'NOTACKPT' + b'\x00' * 16)
        with pytest.raises(DatasetParseError, match='magic'):
            load_checkpoint(bogus)

        config = RunConfig(model=tiny_model_config(), text_encoder=tiny_text_spec())
        path = save_checkpoint(tmp_path / 'm.cseg', build_model(config.model), config, tiny_vocabulary())
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(DatasetParseError, match='truncated'):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetParseError):
            load_checkpoint(tmp_path / 'absent.cseg')
