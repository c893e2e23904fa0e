# segApp/tests/test_cs_decoder.py
"""
Tests for mask generation, mask pooling, cosine classification, the concept
decoder and the assembled model.
"""
import math

import numpy as np
import pytest
import torch
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from segApp.helpers.cs_decoder import (
    ConceptDecoder,
    MaskSet,
    classify,
    compute_masks,
    decoder_forward,
    mask_pool,
    upsample_mask_logits,
)
from segApp.helpers.cs_embeddings import CategoryEmbeddingTable, FeatureGrid
from segApp.helpers.cs_errors import NumericalError
from segApp.helpers.cs_model import build_model
from segApp.tests.utils import tiny_model_config


def _decoder(seed=0, **kwargs):
    torch.manual_seed(seed)
    values = dict(dim=8, heads=2, num_queries=2, layers=1)
    values.update(kwargs)
    return ConceptDecoder(**values).double()


class ComputeMasksTestCase(SimpleTestCase):

    def test_orthogonal_query_gives_zero_logits(self):
        grid = torch.zeros(3, 3, 4, dtype=torch.float64)
        grid[..., :2] = torch.randn(3, 3, 2, dtype=torch.float64)
        queries = torch.tensor([[0.0, 0.0, 1.0, -2.0], [1.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
        masks = compute_masks(queries, FeatureGrid(grid))
        self.assertTrue(torch.equal(masks.logits[0], torch.zeros(3, 3, dtype=torch.float64)))

    def test_logit_peaks_where_query_equals_feature(self):
        features = torch.randn(3, 3, 8, dtype=torch.float64)
        features = features / features.norm(dim=-1, keepdim=True)
        masks = compute_masks(features[1, 2].unsqueeze(0), FeatureGrid(features))
        self.assertEqual(int(masks.logits[0].argmax()), 1 * 3 + 2)

    def test_matches_loop_oracle(self):
        queries = torch.randn(2, 8, dtype=torch.float64)
        grid = torch.randn(3, 3, 8, dtype=torch.float64)
        logits = compute_masks(queries, grid).logits
        for k in range(2):
            for y in range(3):
                for x in range(3):
                    expected = sum(queries[k, d].item() * grid[y, x, d].item() for d in range(8))
                    self.assertAlmostEqual(logits[k, y, x].item(), expected, places=10)

    def test_upsample_to_image_size(self):
        masks = compute_masks(torch.randn(2, 8), torch.randn(4, 4, 8), image_size=(16, 16))
        self.assertEqual(tuple(masks.upsampled.shape), (2, 16, 16))
        constant = upsample_mask_logits(torch.full((1, 2, 2), 3.0), 8, 8)
        self.assertTrue(torch.allclose(constant, torch.full((1, 8, 8), 3.0)))

    def test_dim_mismatch(self):
        with self.assertRaises(ValidationError):
            compute_masks(torch.randn(2, 4), torch.randn(3, 3, 8))

    def test_non_finite_logits_rejected(self):
        with self.assertRaises(NumericalError):
            MaskSet(torch.tensor([[[float('nan')]]]))


class MaskPoolTestCase(SimpleTestCase):

    def test_one_hot_mask_selects_the_pixel(self):
        grid = torch.randn(4, 4, 8, dtype=torch.float64)
        logits = torch.full((1, 4, 4), float('-inf'), dtype=torch.float64)
        logits[0, 2, 1] = float('inf')
        pooled = mask_pool(logits, grid)
        torch.testing.assert_close(pooled[0], grid[2, 1], rtol=0, atol=1e-12)

    def test_uniform_logits_give_the_mean(self):
        grid = torch.randn(4, 4, 8, dtype=torch.float64)
        pooled = mask_pool(torch.full((2, 4, 4), 0.7, dtype=torch.float64), FeatureGrid(grid))
        torch.testing.assert_close(pooled, grid.mean(dim=(0, 1)).expand(2, -1))

    def test_vanishing_mask_falls_back_to_the_mean(self):
        grid = torch.randn(4, 4, 8, dtype=torch.float64)
        pooled = mask_pool(torch.full((1, 4, 4), -40.0, dtype=torch.float64), grid)
        torch.testing.assert_close(pooled[0], grid.mean(dim=(0, 1)))

    def test_matches_weighted_mean_oracle(self):
        grid = torch.randn(3, 4, 8, dtype=torch.float64)
        logits = torch.randn(2, 3, 4, dtype=torch.float64)
        pooled = mask_pool(MaskSet(logits), grid).numpy()
        g, l = grid.numpy(), logits.numpy()
        for k in range(2):
            num, den = np.zeros(8), 0.0
            for y in range(3):
                for x in range(4):
                    w = 1.0 / (1.0 + math.exp(-l[k, y, x]))
                    num += w * g[y, x]
                    den += w
            np.testing.assert_allclose(pooled[k], num / den, rtol=0, atol=1e-6)

    def test_resolution_mismatch(self):
        with self.assertRaises(ValidationError):
            mask_pool(torch.randn(1, 4, 4), torch.randn(2, 2, 8))


class ClassifyTestCase(SimpleTestCase):

    def setUp(self):
        self.table = CategoryEmbeddingTable(np.eye(6)[:4], ['a', 'b', 'c', 'd'])
        self.no_object = torch.tensor(np.eye(6)[5])

    def test_argmax_is_the_matching_row(self):
        embeddings = torch.tensor(np.eye(6)[[2, 0, 3]] * 4.0)
        probs = classify(embeddings, self.table, 0.07, no_object=self.no_object)
        self.assertEqual(probs.argmax(dim=-1).tolist(), [2, 0, 3])
        self.assertEqual(tuple(probs.shape), (3, 5))

    def test_rows_sum_to_one(self):
        probs = classify(torch.randn(5, 6, dtype=torch.float64), self.table, 0.5, no_object=self.no_object)
        torch.testing.assert_close(probs.sum(dim=-1), torch.ones(5, dtype=torch.float64), rtol=0, atol=1e-6)

    def test_matches_cosine_softmax_oracle(self):
        rng = np.random.default_rng(1)
        vectors = rng.standard_normal((4, 6))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        table = CategoryEmbeddingTable(vectors, list('abcd'))
        embeddings = rng.standard_normal((3, 6))
        probs = classify(torch.tensor(embeddings), table, 0.3).numpy()
        for k in range(3):
            e = embeddings[k] / np.linalg.norm(embeddings[k])
            scores = np.array([e @ vectors[j] for j in range(4)]) / 0.3
            expected = np.exp(scores - scores.max())
            np.testing.assert_allclose(probs[k], expected / expected.sum(), rtol=0, atol=1e-6)

    def test_positive_scaling_leaves_probabilities_unchanged(self):
        embeddings = torch.randn(3, 6, dtype=torch.float64)
        a = classify(embeddings, self.table, 0.1, no_object=self.no_object)
        b = classify(embeddings * torch.tensor([[2.0], [0.01], [150.0]], dtype=torch.float64), self.table, 0.1,
                     no_object=self.no_object)
        torch.testing.assert_close(a, b)

    def test_zero_norm_embedding(self):
        with self.assertRaises(NumericalError):
            classify(torch.zeros(1, 6, dtype=torch.float64), self.table, 0.1)

    def test_temperature_must_be_positive(self):
        with self.assertRaises(ValidationError):
            classify(torch.randn(1, 6, dtype=torch.float64), self.table, 0.0)


@pytest.mark.unit
class TestConceptDecoder:

    def test_zeroed_blocks_return_initial_queries(self):
        decoder = _decoder(layers=2)
        with torch.no_grad():
            for layer in decoder.layers:
                for module in (layer.visual_attn.out_proj, layer.self_attn.out_proj, layer.ffn.fc2):
                    module.weight.zero_()
                    module.bias.zero_()
        init = torch.randn(2, 8, dtype=torch.float64)
        out = decoder_forward(init, torch.randn(3, 8, dtype=torch.float64),
                              torch.randn(4, 4, 8, dtype=torch.float64), decoder)
        assert torch.equal(out.final.queries[0], init)

    def test_constant_grid_gives_constant_logits(self):
        decoder = _decoder(num_queries=1)
        with torch.no_grad():
            decoder.mask_fc2.weight.zero_()
            decoder.mask_fc2.bias.zero_()
        c = torch.randn(8, dtype=torch.float64)
        grid = c.expand(4, 4, 8).clone()
        out = decoder_forward(decoder.query_feat, torch.randn(2, 8, dtype=torch.float64), grid, decoder)
        q_hat = out.final.mask_queries[0, 0]
        torch.testing.assert_close(q_hat, out.final.queries[0, 0])
        torch.testing.assert_close(out.final.mask_logits[0, 0], torch.full((4, 4), float(q_hat @ c),
                                                                           dtype=torch.float64))

    def test_last_layer_masks_equal_compute_masks(self):
        decoder = _decoder(layers=3)
        grid = torch.randn(4, 4, 8, dtype=torch.float64)
        out = decoder_forward(decoder.query_feat, torch.randn(2, 8, dtype=torch.float64), grid, decoder)
        assert len(out.layers) == 3
        recomputed = compute_masks(out.final.mask_queries[0], grid).logits
        assert torch.equal(out.final.mask_logits[0], recomputed)

    def test_shared_cross_attention_is_one_module(self):
        decoder = _decoder()
        layer = decoder.layers[0]
        assert layer.concept_attn is layer.visual_attn
        assert layer.concept_attn.q_proj.weight.data_ptr() == layer.visual_attn.q_proj.weight.data_ptr()
        unshared = _decoder(share_cross_attention=False).layers[0]
        assert unshared.concept_attn is not unshared.visual_attn

    def test_sharing_survives_a_gradient_step(self):
        decoder = _decoder(seed=3)
        optimizer = torch.optim.SGD(decoder.parameters(), lr=0.1)
        grid = torch.randn(4, 4, 8, dtype=torch.float64)
        out = decoder_forward(decoder.query_feat, torch.randn(3, 8, dtype=torch.float64), grid, decoder)
        out.final.mask_logits.pow(2).mean().backward()
        optimizer.step()
        layer = decoder.layers[0]
        for name in ('q_proj', 'k_proj', 'v_proj', 'out_proj'):
            assert torch.equal(getattr(layer.concept_attn, name).weight, getattr(layer.visual_attn, name).weight)

    def test_concepts_change_the_queries(self):
        decoder = _decoder(seed=4)
        grid = torch.randn(4, 4, 8, dtype=torch.float64)
        a = decoder_forward(decoder.query_feat, torch.randn(2, 8, dtype=torch.float64), grid, decoder)
        b = decoder_forward(decoder.query_feat, torch.randn(2, 8, dtype=torch.float64), grid, decoder)
        assert not torch.equal(a.final.queries, b.final.queries)

    def test_zero_member_concepts_rejected(self):
        decoder = _decoder()
        with pytest.raises(ValidationError):
            decoder_forward(decoder.query_feat, torch.zeros(0, 8, dtype=torch.float64),
                            torch.randn(4, 4, 8, dtype=torch.float64), decoder)
        with pytest.raises(ValidationError):
            decoder_forward(decoder.query_feat, torch.randn(2, 8, dtype=torch.float64),
                            torch.randn(4, 4, 8, dtype=torch.float64), decoder,
                            membership=torch.tensor([False, False]))

    def test_non_member_concepts_do_not_matter(self):
        decoder = _decoder(seed=5)
        grid = torch.randn(4, 4, 8, dtype=torch.float64)
        concepts = torch.randn(3, 8, dtype=torch.float64)
        member = torch.tensor([True, False, True])
        a = decoder_forward(decoder.query_feat, concepts, grid, decoder, membership=member)
        perturbed = concepts.clone()
        perturbed[1] = 50.0
        b = decoder_forward(decoder.query_feat, perturbed, grid, decoder, membership=member)
        assert torch.equal(a.final.mask_logits, b.final.mask_logits)

    def test_temperature_starts_at_init(self):
        assert _decoder(temperature_init=0.07).temperature == pytest.approx(0.07)


@pytest.mark.integration
class TestConceptSegModel:

    def test_forward_shapes(self):
        config = tiny_model_config(num_queries=3, decoder_layers=2)
        model = build_model(config, seed=0)
        out = model(torch.rand(2, 16, 16, 3), torch.randn(4, 8), torch.tensor([[True, False, True, False],
                                                                                [False, True, True, True]]),
                    torch.randn(5, 8))
        assert len(out.layers) == 2
        assert out.final.class_logits.shape == (2, 3, 6)
        assert out.final.mask_logits.shape == (2, 3, 4, 4)
        assert out.mask_embeddings.shape == (2, 3, 8)
        assert out.global_features.shape == out.enhanced.shape == (2, 4, 4, 8)

    def test_same_seed_same_parameters(self):
        a, b = build_model(tiny_model_config(), seed=3), build_model(tiny_model_config(), seed=3)
        for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(pa, pb), name
        c = build_model(tiny_model_config(), seed=4)
        assert not torch.equal(a.decoder.query_feat, c.decoder.query_feat)

    def test_backbone_frozen_by_default(self):
        model = build_model(tiny_model_config())
        assert model.backbone.frozen
        assert not build_model(tiny_model_config(), freeze_backbone=False).backbone.frozen

    def test_double_precision(self):
        model = build_model(tiny_model_config(), precision='float64')
        assert model.dtype == torch.float64

    def test_dual_scale_and_dense_variants_run(self):
        config = tiny_model_config(dual_scale=True, dsa_mode='dense', share_cross_attention=False)
        model = build_model(config)
        out = model(torch.rand(1, 16, 16, 3), torch.randn(2, 8), torch.tensor([[True, True]]), torch.randn(3, 8))
        assert out.final.mask_logits.shape == (1, 2, 4, 4)
