"""Query decoder and open-vocabulary detection heads."""

import numpy as np
import pytest
import torch

from ovrd.config import RunConfig
from ovrd.detector import (
    FrameDetections,
    OpenVocabularyDetector,
    QueryBundle,
    RelationAwareQueryDecoder,
    build_detector,
    classify_embeddings,
)


def small_detector(n_aux_relations=5, use_relation_query=True, seed=0):
    torch.manual_seed(seed)
    return OpenVocabularyDetector(
        feature_dim=8,
        width=32,
        n_layers=2,
        heads=4,
        ffn_dim=64,
        n_queries=12,
        n_aux_relations=n_aux_relations,
        use_relation_query=use_relation_query,
    )


def patches(b=None, g=4, d=8, seed=1):
    gen = torch.Generator().manual_seed(seed)
    shape = (g, g, d) if b is None else (b, g, g, d)
    return torch.randn(shape, generator=gen)


class TestDecoderShapes:
    def test_unbatched(self):
        det = small_detector()
        out = det(patches())
        assert isinstance(out, QueryBundle)
        assert out.object_states.shape == (12, 32)
        assert out.boxes.shape == (12, 4)
        assert out.object_embeddings.shape == (12, 8)
        assert out.relation_state.shape == (32,)
        assert out.relation_logits.shape == (5,)

    def test_batched(self):
        det = small_detector()
        out = det(patches(b=3))
        assert out.object_states.shape == (3, 12, 32)
        assert out.boxes.shape == (3, 12, 4)
        assert out.object_embeddings.shape == (3, 12, 8)
        assert out.relation_state.shape == (3, 32)
        assert out.relation_logits.shape == (3, 5)

    def test_no_relation_query(self):
        det = small_detector(use_relation_query=False)
        out = det(patches())
        assert out.relation_state is None
        assert out.relation_logits is None

    def test_boxes_are_normalized(self):
        det = small_detector()
        boxes = det(patches(seed=3)).boxes
        assert (boxes > 0).all() and (boxes < 1).all()

    def test_batched_matches_unbatched(self):
        det = small_detector()
        det.eval()
        p = patches(b=2, seed=5)
        full = det(p)
        one = det(p[1])
        assert torch.allclose(full.boxes[1], one.boxes, atol=1e-6)
        assert torch.allclose(full.object_states[1], one.object_states, atol=1e-5)


class TestDecoderBehavior:
    def test_deterministic_forward(self):
        det = small_detector(seed=7)
        p = patches(seed=2)
        a = det(p)
        b = det(p)
        assert torch.equal(a.boxes, b.boxes)

    def test_content_changes_output(self):
        det = small_detector()
        a = det(patches(seed=1))
        b = det(patches(seed=2))
        assert not torch.allclose(a.boxes, b.boxes)

    def test_cross_attention_off_ignores_content(self):
        det = small_detector()
        a = det(patches(seed=1), cross_attention=False)
        b = det(patches(seed=2), cross_attention=False)
        assert torch.allclose(a.boxes, b.boxes)
        assert torch.allclose(a.object_states, b.object_states)

    def test_patch_position_matters(self):
        # same multiset of patch features arranged differently must decode
        # differently, which is what the positional encoding provides
        det = small_detector()
        p = patches(seed=4)
        flipped = torch.flip(p, dims=[0])
        a = det(p)
        b = det(flipped)
        assert not torch.allclose(a.boxes, b.boxes)

    def test_gradients_reach_inputs_and_queries(self):
        det = small_detector()
        p = patches(seed=6).requires_grad_(True)
        out = det(p)
        loss = out.boxes.sum() + out.object_embeddings.sum() + out.relation_logits.sum()
        loss.backward()
        assert p.grad is not None and p.grad.abs().sum() > 0
        assert det.decoder.object_queries.grad is not None
        assert det.decoder.object_queries.grad.abs().sum() > 0
        assert det.decoder.relation_query.grad is not None
        assert det.decoder.relation_query.grad.abs().sum() > 0

    def test_relation_query_sees_objects(self):
        # severing cross attention must still let the relation state depend
        # on nothing; with it on, different scenes give different relation states
        det = small_detector()
        a = det(patches(seed=1)).relation_state
        b = det(patches(seed=2)).relation_state
        assert not torch.allclose(a, b)

    def test_double_precision_supported(self):
        det = small_detector().double()
        out = det(patches().double())
        assert out.boxes.dtype == torch.float64


class TestClassification:
    def test_aligned_embedding_wins(self):
        anchors = torch.eye(4)
        emb = torch.eye(4)[0:1]
        probs = classify_embeddings(emb, anchors, tau=0.01)
        assert probs.shape == (1, 4)
        assert probs[0, 0].item() == pytest.approx(1.0, abs=1e-9)

    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(3)
        emb = rng.normal(0, 1, (5, 8))
        anchors = rng.normal(0, 1, (3, 8))
        tau = 0.07
        en = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        an = anchors / np.linalg.norm(anchors, axis=1, keepdims=True)
        logits = en @ an.T / tau
        expect = np.exp(logits - logits.max(axis=1, keepdims=True))
        expect = expect / expect.sum(axis=1, keepdims=True)
        got = classify_embeddings(torch.tensor(emb), torch.tensor(anchors), tau=tau)
        np.testing.assert_allclose(got.numpy(), expect, atol=1e-9)

    def test_scale_invariance(self):
        rng = torch.Generator().manual_seed(0)
        emb = torch.randn(4, 8, generator=rng)
        anchors = torch.randn(3, 8, generator=rng)
        a = classify_embeddings(emb, anchors, tau=0.05)
        b = classify_embeddings(emb * 13.0, anchors * 0.02, tau=0.05)
        assert torch.allclose(a, b, atol=1e-6)

    def test_gradient_flows(self):
        emb = torch.randn(2, 8, requires_grad=True)
        anchors = torch.randn(3, 8)
        classify_embeddings(emb, anchors, tau=0.1).sum().backward()
        assert emb.grad is not None


class TestDetectFilter:
    def test_confident_kept_flat_dropped(self):
        det = small_detector()
        anchors = torch.eye(8)[:4]
        bundle = QueryBundle(
            object_states=torch.zeros(2, 32),
            boxes=torch.tensor([[0.5, 0.5, 0.2, 0.2], [0.3, 0.3, 0.1, 0.1]]),
            object_embeddings=torch.stack([anchors[1] * 3, torch.full((8,), 0.2)]),
            relation_state=None,
            relation_logits=None,
        )
        dets = det.filter_detections(bundle, anchors, epsilon=0.35, tau=0.01)
        assert isinstance(dets, FrameDetections)
        assert dets.query_indices.tolist() == [0]
        assert dets.scores.shape == (1, 4)
        assert int(dets.scores[0].argmax()) == 1
        assert dets.boxes.shape == (1, 4)
        assert dets.embeddings.shape == (1, 8)

    def test_epsilon_zero_keeps_all(self):
        det = small_detector()
        anchors = torch.eye(8)[:4]
        bundle = det(patches())
        dets = det.filter_detections(bundle, anchors, epsilon=0.0, tau=0.01)
        assert dets.boxes.shape[0] == 12


class TestFactory:
    def test_build_from_config(self):
        cfg = RunConfig()
        cfg.set("detector.n_queries", 16)
        cfg.set("detector.width", 32)
        cfg.set("detector.n_layers", 1)
        cfg.set("detector.ffn_dim", 64)
        cfg.set("detector.heads", 4)
        det = build_detector(cfg, feature_dim=32, n_aux_relations=5)
        out = det(torch.randn(6, 6, 32))
        assert out.object_states.shape == (16, 32)
        assert out.object_embeddings.shape == (16, 32)

    def test_param_count_scales_with_layers(self):
        cfg = RunConfig()
        cfg.set("detector.width", 32)
        cfg.set("detector.ffn_dim", 64)
        cfg.set("detector.heads", 4)
        cfg.set("detector.n_layers", 1)
        small = sum(p.numel() for p in build_detector(cfg, 8, 2).parameters())
        cfg.set("detector.n_layers", 3)
        large = sum(p.numel() for p in build_detector(cfg, 8, 2).parameters())
        assert large > small
