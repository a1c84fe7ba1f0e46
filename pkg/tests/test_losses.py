"""Training objectives: matcher, detector losses, and pair-classifier losses."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ovrd.config import ConfigError, RunConfig
from ovrd.encoders import EncoderSpec, MockVisionLanguageEncoder
from ovrd.losses import (
    ClassifierLossWeights,
    DetectorLossWeights,
    TrainingError,
    aux_relation_loss,
    bipartite_match,
    box_l1_loss,
    detector_total,
    distillation_loss,
    focal_loss,
    giou_loss,
    interaction_bce,
    object_consistency_ce,
    relation_bce,
    relation_total,
)
from ovrd.relation import PairFeatures, RelationClassifier

from oracles import (
    area_giou,
    bce_entry,
    brute_force_assignment,
    finite_difference_grad,
    focal_entry,
)


def _corners(box):
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _oracle_cost(pred_boxes, pred_probs, gt_boxes, gt_labels, w):
    cost = np.zeros((len(pred_boxes), len(gt_boxes)))
    for i, (pb, pp) in enumerate(zip(pred_boxes, pred_probs)):
        for j, (gb, gl) in enumerate(zip(gt_boxes, gt_labels)):
            l1 = sum(abs(a - b) for a, b in zip(pb, gb))
            g = area_giou(_corners(pb), _corners(gb))
            cost[i, j] = (w.focal * (1.0 - pp[gl]) + w.l1 * l1
                          + w.giou * (1.0 - g))
    return cost


class TestWeights:
    def test_defaults_from_config(self):
        w = DetectorLossWeights.from_config(RunConfig())
        assert (w.focal, w.l1, w.giou, w.distill, w.aux_relation) == (
            3.0, 5.0, 5.0, 2.0, 2.0)
        assert w.static_emphasis == 2.0
        c = ClassifierLossWeights.from_config(RunConfig())
        assert (c.object_weight, c.interaction_weight) == (0.2, 0.1)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            DetectorLossWeights(focal=-1.0)
        with pytest.raises(ValueError):
            ClassifierLossWeights(object_weight=-0.1)


class TestBipartiteMatch:
    W = DetectorLossWeights()

    def test_single_pair_matched(self):
        pred = torch.tensor([[0.5, 0.5, 0.2, 0.2]])
        probs = torch.tensor([[0.9, 0.1]])
        gt = torch.tensor([[0.5, 0.5, 0.2, 0.2]])
        rows, cols = bipartite_match(pred, probs, gt, torch.tensor([0]), self.W)
        assert rows.tolist() == [0] and cols.tolist() == [0]

    def test_two_by_two_against_enumeration(self):
        pred = torch.tensor([[0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1]])
        probs = torch.tensor([[0.7, 0.3], [0.2, 0.8]])
        gt = torch.tensor([[0.25, 0.2, 0.1, 0.1], [0.75, 0.8, 0.1, 0.1]])
        labels = torch.tensor([0, 1])
        rows, cols = bipartite_match(pred, probs, gt, labels, self.W)
        assert set(zip(rows.tolist(), cols.tolist())) == {(0, 0), (1, 1)}
        oracle_pairs, _ = brute_force_assignment(
            _oracle_cost(pred.numpy(), probs.numpy(), gt.numpy(),
                         labels.numpy(), self.W))
        assert set(zip(rows.tolist(), cols.tolist())) == oracle_pairs

    def test_permuting_predictions_permutes_assignment(self):
        rng = np.random.default_rng(0)
        pred = torch.tensor(rng.uniform(0.2, 0.8, (4, 4)), dtype=torch.float32)
        pred[:, 2:] = 0.2
        probs = torch.tensor(rng.dirichlet(np.ones(3), 4), dtype=torch.float32)
        gt = pred[:3].clone()
        labels = torch.tensor([0, 1, 2])
        rows, cols = bipartite_match(pred, probs, gt, labels, self.W)
        perm = torch.tensor([2, 0, 3, 1])
        rows_p, cols_p = bipartite_match(pred[perm], probs[perm], gt, labels, self.W)
        mapped = {(int(perm[r]), int(c)) for r, c in zip(rows_p, cols_p)}
        assert mapped == set(zip(rows.tolist(), cols.tolist()))

    def test_matching_is_injective_both_sides(self):
        rng = np.random.default_rng(1)
        for seed in range(10):
            rng = np.random.default_rng(seed)
            n_pred, n_gt = rng.integers(1, 7), rng.integers(1, 5)
            pred = torch.tensor(rng.uniform(0.1, 0.9, (n_pred, 4)),
                                dtype=torch.float64)
            pred[:, 2:] = pred[:, 2:] * 0.3 + 0.05
            gt = torch.tensor(rng.uniform(0.1, 0.9, (n_gt, 4)),
                              dtype=torch.float64)
            gt[:, 2:] = gt[:, 2:] * 0.3 + 0.05
            probs = torch.tensor(rng.dirichlet(np.ones(3), n_pred),
                                 dtype=torch.float64)
            labels = torch.tensor(rng.integers(0, 3, n_gt))
            rows, cols = bipartite_match(pred, probs, gt, labels, self.W)
            assert len(rows) == min(n_pred, n_gt)
            assert len(set(rows.tolist())) == len(rows)
            assert len(set(cols.tolist())) == len(cols)

    def test_total_cost_optimal_over_seeds(self):
        for seed in range(30):
            rng = np.random.default_rng(100 + seed)
            n_pred, n_gt = rng.integers(1, 6), rng.integers(1, 5)
            pred = rng.uniform(0.1, 0.9, (n_pred, 4))
            pred[:, 2:] = pred[:, 2:] * 0.3 + 0.05
            gt = rng.uniform(0.1, 0.9, (n_gt, 4))
            gt[:, 2:] = gt[:, 2:] * 0.3 + 0.05
            probs = rng.dirichlet(np.ones(4), n_pred)
            labels = rng.integers(0, 4, n_gt)
            cost = _oracle_cost(pred, probs, gt, labels, self.W)
            rows, cols = bipartite_match(
                torch.tensor(pred), torch.tensor(probs),
                torch.tensor(gt), torch.tensor(labels), self.W)
            _, best = brute_force_assignment(cost)
            got = sum(cost[r, c] for r, c in zip(rows, cols))
            assert abs(got - best) < 1e-9

    def test_empty_ground_truth(self):
        pred = torch.rand(3, 4)
        probs = torch.full((3, 2), 0.5)
        rows, cols = bipartite_match(pred, probs, torch.zeros((0, 4)),
                                     torch.zeros(0, dtype=torch.long), self.W)
        assert len(rows) == 0 and len(cols) == 0


class TestFocalLoss:
    def test_reduces_to_cross_entropy(self):
        rng = np.random.default_rng(2)
        probs = torch.tensor(rng.dirichlet(np.ones(4), 5))
        labels = torch.tensor(rng.integers(0, 4, 5))
        loss = focal_loss(probs, labels, gamma_foc=0.0, alpha_foc=1.0)
        expect = float(np.mean([-np.log(float(probs[i, labels[i]]))
                                for i in range(5)]))
        assert abs(float(loss) - expect) < 1e-9

    def test_matches_definition_oracle(self):
        rng = np.random.default_rng(3)
        probs = torch.tensor(rng.dirichlet(np.ones(3), 6))
        labels = torch.tensor(rng.integers(0, 3, 6))
        loss = focal_loss(probs, labels, gamma_foc=2.0, alpha_foc=0.25)
        expect = np.mean([focal_entry(probs[i].numpy(), int(labels[i]),
                                      0.25, 2.0) for i in range(6)])
        assert abs(float(loss) - expect) < 1e-9

    def test_confident_correct_is_near_zero(self):
        probs = torch.tensor([[1.0 - 1e-7, 1e-7]])
        loss = focal_loss(probs, torch.tensor([0]), 2.0, 0.25)
        assert float(loss) < 1e-6

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            focal_loss(torch.tensor([[1.5, -0.5]]), torch.tensor([0]), 2.0, 0.25)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        raw = torch.tensor(rng.uniform(0.05, 0.95, (4, 3)), requires_grad=True)
        labels = torch.tensor(rng.integers(0, 3, 4))
        loss = focal_loss(raw, labels, 2.0, 0.25)
        loss.backward()

        def scalar():
            with torch.no_grad():
                return focal_loss(raw, labels, 2.0, 0.25)

        fd = finite_difference_grad(scalar, raw.data, h=1e-6)
        np.testing.assert_allclose(raw.grad.numpy(), fd, rtol=1e-4, atol=1e-9)


class TestBoxLosses:
    def test_perfect_boxes_zero(self):
        b = torch.rand(3, 4) * 0.4 + 0.2
        assert float(box_l1_loss(b, b)) == 0.0
        assert abs(float(giou_loss(b, b))) < 1e-7

    def test_l1_known_offset(self):
        a = torch.tensor([[0.5, 0.5, 0.2, 0.2]])
        b = torch.tensor([[0.6, 0.5, 0.2, 0.2]])
        assert abs(float(box_l1_loss(a, b)) - 0.1) < 1e-7

    def test_giou_matches_oracle(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(0.2, 0.8, (6, 4))
        a[:, 2:] = a[:, 2:] * 0.2 + 0.05
        b = rng.uniform(0.2, 0.8, (6, 4))
        b[:, 2:] = b[:, 2:] * 0.2 + 0.05
        loss = giou_loss(torch.tensor(a), torch.tensor(b))
        expect = np.mean([1.0 - area_giou(_corners(a[i]), _corners(b[i]))
                          for i in range(6)])
        assert abs(float(loss) - expect) < 1e-9

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(6)
        pred = torch.tensor(rng.uniform(0.3, 0.7, (3, 4)), requires_grad=True)
        gt = torch.tensor(rng.uniform(0.3, 0.7, (3, 4)))
        gt[:, 2:] = gt[:, 2:] * 0.3 + 0.05
        loss = box_l1_loss(pred, gt) + giou_loss(pred, gt)
        loss.backward()

        def scalar():
            with torch.no_grad():
                return box_l1_loss(pred, gt) + giou_loss(pred, gt)

        fd = finite_difference_grad(scalar, pred.data, h=1e-6)
        np.testing.assert_allclose(pred.grad.numpy(), fd, rtol=1e-4, atol=1e-8)


class TestDistillation:
    def test_identical_is_zero(self):
        z = torch.rand(4, 8)
        assert float(distillation_loss(z, z.clone())) == 0.0

    def test_unit_offset_is_one(self):
        e = torch.rand(5, 16)
        z = e + 1.0
        assert abs(float(distillation_loss(z, e)) - 1.0) < 1e-7

    def test_empty_is_zero(self):
        assert float(distillation_loss(torch.zeros(0, 8), torch.zeros(0, 8))) == 0.0

    def test_targets_receive_no_gradient(self):
        z = torch.rand(3, 8, requires_grad=True)
        e = torch.rand(3, 8, requires_grad=True)
        distillation_loss(z, e).backward()
        assert z.grad is not None
        assert e.grad is None

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        z = torch.tensor(rng.normal(0, 1, (3, 6)), requires_grad=True)
        e = torch.tensor(rng.normal(0, 1, (3, 6)))
        distillation_loss(z, e).backward()

        def scalar():
            with torch.no_grad():
                return distillation_loss(z, e)

        fd = finite_difference_grad(scalar, z.data, h=1e-6)
        np.testing.assert_allclose(z.grad.numpy(), fd, rtol=1e-4, atol=1e-9)


class TestAuxRelationLoss:
    def test_overlapping_subsets_rejected(self):
        probs = torch.full((2, 4), 0.5)
        with pytest.raises(ConfigError):
            aux_relation_loss(probs, torch.zeros(2, 4), [0, 1], [1, 2, 3], 2.0)

    def test_unit_emphasis_matches_subset_oracle(self):
        rng = np.random.default_rng(8)
        probs = torch.tensor(rng.uniform(0.05, 0.95, (3, 5)))
        targets = torch.tensor(rng.integers(0, 2, (3, 5)).astype(np.float64))
        static, dynamic = [0, 2], [1, 3, 4]
        loss = aux_relation_loss(probs, targets, static, dynamic, 1.0)
        part = {}
        for name, idx in (("s", static), ("d", dynamic)):
            vals = [bce_entry(probs[t, c], float(targets[t, c]))
                    for t in range(3) for c in idx]
            part[name] = float(np.mean(vals))
        assert abs(float(loss) - (part["d"] + part["s"])) < 1e-9

    def test_static_emphasis_weighting(self):
        rng = np.random.default_rng(9)
        probs = torch.tensor(rng.uniform(0.05, 0.95, (2, 4)))
        targets = torch.tensor(rng.integers(0, 2, (2, 4)).astype(np.float64))
        static, dynamic = [0], [1, 2, 3]
        base = float(aux_relation_loss(probs, targets, static, dynamic, 1.0))
        heavy = float(aux_relation_loss(probs, targets, static, dynamic, 2.0))
        s_part = float(np.mean([bce_entry(probs[t, 0], float(targets[t, 0]))
                                for t in range(2)]))
        assert abs(heavy - base - s_part) < 1e-9

    def test_confident_correct_near_zero(self):
        targets = torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
        probs = targets * (1 - 2e-7) + 1e-7
        loss = aux_relation_loss(probs, targets, [0], [1, 2], 2.0)
        assert float(loss) < 1e-5

    def test_empty_dynamic_subset(self):
        probs = torch.full((2, 2), 0.5)
        targets = torch.zeros(2, 2)
        loss = aux_relation_loss(probs, targets, [0, 1], [], 2.0)
        assert float(loss) == pytest.approx(2.0 * -math.log(0.5), rel=1e-6)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        probs = torch.tensor(rng.uniform(0.1, 0.9, (3, 4)), requires_grad=True)
        targets = torch.tensor(rng.integers(0, 2, (3, 4)).astype(np.float64))
        aux_relation_loss(probs, targets, [0, 1], [2, 3], 2.0).backward()

        def scalar():
            with torch.no_grad():
                return aux_relation_loss(probs, targets, [0, 1], [2, 3], 2.0)

        fd = finite_difference_grad(scalar, probs.data, h=1e-6)
        np.testing.assert_allclose(probs.grad.numpy(), fd, rtol=1e-4, atol=1e-9)


class TestDetectorTotal:
    PARTS = {"focal": 0.3, "l1": 0.2, "giou": 0.6, "distill": 0.15,
             "aux_relation": 0.4}

    def test_default_weighting(self):
        w = DetectorLossWeights()
        parts = {k: torch.tensor(v, dtype=torch.float64)
                 for k, v in self.PARTS.items()}
        total = detector_total(parts, w)
        expect = 3 * 0.3 + 5 * 0.2 + 5 * 0.6 + 2 * 0.15 + 2 * 0.4
        assert abs(float(total) - expect) < 1e-7

    def test_zero_parts(self):
        parts = {k: torch.tensor(0.0) for k in self.PARTS}
        assert float(detector_total(parts, DetectorLossWeights())) == 0.0

    def test_doubling_one_part(self):
        w = DetectorLossWeights()
        parts = {k: torch.tensor(v, dtype=torch.float64)
                 for k, v in self.PARTS.items()}
        base = float(detector_total(parts, w))
        parts["giou"] = parts["giou"] * 2
        assert float(detector_total(parts, w)) - base == pytest.approx(
            5.0 * 0.6, rel=1e-7)

    def test_nan_part_names_the_culprit(self):
        parts = {k: torch.tensor(v) for k, v in self.PARTS.items()}
        parts["distill"] = torch.tensor(float("nan"))
        with pytest.raises(TrainingError, match="distill"):
            detector_total(parts, DetectorLossWeights())


class TestRelationLossParts:
    def test_relation_bce_known_value(self):
        scores = torch.tensor([0.8, 0.3])
        target = torch.tensor([1.0, 0.0])
        expect = np.mean([bce_entry(0.8, 1.0), bce_entry(0.3, 0.0)])
        assert abs(float(relation_bce(scores, target)) - expect) < 1e-7

    def test_object_ce_averages_roles(self):
        sims_s = torch.tensor([0.9, 0.1, -0.2])
        sims_o = torch.tensor([-0.5, 0.7, 0.0])
        loss = object_consistency_ce(sims_s, 0, sims_o, 1)
        ce_s = F.cross_entropy(sims_s[None], torch.tensor([0]))
        ce_o = F.cross_entropy(sims_o[None], torch.tensor([1]))
        assert float(loss) == pytest.approx(
            0.5 * (float(ce_s) + float(ce_o)), rel=1e-5)

    def test_interaction_bce_mean_over_frames(self):
        probs = torch.tensor([0.9, 0.2, 0.6])
        bits = torch.tensor([1.0, 0.0, 1.0])
        expect = np.mean([bce_entry(p, y) for p, y in zip(probs, bits)])
        assert abs(float(interaction_bce(probs, bits)) - expect) < 1e-7

    def test_total_defaults_and_reduction(self):
        w = ClassifierLossWeights()
        total = relation_total(torch.tensor(0.5), torch.tensor(1.2),
                               torch.tensor(0.7), w)
        assert float(total) == pytest.approx(0.5 + 0.2 * 1.2 + 0.1 * 0.7)
        bare = relation_total(torch.tensor(0.5), torch.tensor(1.2),
                              torch.tensor(0.7),
                              ClassifierLossWeights(0.0, 0.0))
        assert float(bare) == pytest.approx(0.5)

    def test_nan_names_the_part(self):
        w = ClassifierLossWeights()
        with pytest.raises(TrainingError, match="interaction"):
            relation_total(torch.tensor(0.1), torch.tensor(0.1),
                           torch.tensor(float("nan")), w)

    def test_full_loss_gradient_on_toy_pair(self):
        """End-to-end classifier loss against central differences."""
        spec = EncoderSpec(feature_dim=16, patch_grid=(2, 2),
                           input_resolution=32, text_context_length=24,
                           token_dim=16)
        enc = MockVisionLanguageEncoder(spec)
        torch.manual_seed(11)
        cls = RelationClassifier(enc, width=8, heads=2, ffn_dim=8,
                                 n_spatial_blocks=1, n_temporal_blocks=1,
                                 pool="mean", max_span=4).double()
        rng = np.random.default_rng(11)
        t = 2
        pair = PairFeatures(
            torch.tensor(rng.normal(0, 1, (t, 16))),
            torch.tensor(rng.normal(0, 1, (t, 16))),
            torch.tensor(rng.normal(0, 1, (t, 16))),
            torch.tensor(rng.uniform(0.3, 0.6, (t, 4))),
            torch.tensor(rng.uniform(0.3, 0.6, (t, 4))))
        names = ("left of", "above")
        rel_target = torch.tensor([1.0, 0.0], dtype=torch.float64)
        bits = torch.tensor([1.0, 0.0], dtype=torch.float64)
        w = ClassifierLossWeights()
        with torch.no_grad():
            text = cls.relation_text_features(pair, names)
            obj_text = cls.handcrafted_text_features(["cube", "vane"]).double()

        def full_loss():
            v_dot, v_ddot = cls.encode_pair(pair)
            scores = cls.relation_scores_from(cls.pair_embedding(v_ddot), text)
            v_s, v_o = cls.object_consistency_features(v_dot)
            ce = object_consistency_ce(
                RelationClassifier.cosine_scores(v_s, obj_text), 0,
                RelationClassifier.cosine_scores(v_o, obj_text), 1)
            inter = interaction_bce(cls.predict_interaction(v_ddot), bits)
            return relation_total(relation_bce(scores, rel_target), ce,
                                  inter, w)

        def scalar():
            with torch.no_grad():
                return full_loss()

        full_loss().backward()
        checked = (cls.in_proj.bias, cls.rel_map[2].bias,
                   cls.interaction_head[2].weight, cls.object_map[0].bias)
        for param in checked:
            fd = finite_difference_grad(scalar, param.data, h=1e-5)
            np.testing.assert_allclose(param.grad.numpy(), fd,
                                       rtol=1e-4, atol=1e-8)


class TestNonNegativity:
    def test_all_losses_nonnegative_on_random_inputs(self):
        for seed in range(8):
            rng = np.random.default_rng(200 + seed)
            probs = torch.tensor(rng.uniform(0.01, 0.99, (4, 3)))
            labels = torch.tensor(rng.integers(0, 3, 4))
            assert float(focal_loss(probs, labels, 2.0, 0.25)) >= 0.0
            a = torch.tensor(rng.uniform(0.2, 0.8, (4, 4)))
            a[:, 2:] = a[:, 2:] * 0.3 + 0.05
            b = torch.tensor(rng.uniform(0.2, 0.8, (4, 4)))
            b[:, 2:] = b[:, 2:] * 0.3 + 0.05
            assert float(box_l1_loss(a, b)) >= 0.0
            assert float(giou_loss(a, b)) >= 0.0
            z = torch.tensor(rng.normal(0, 1, (3, 5)))
            e = torch.tensor(rng.normal(0, 1, (3, 5)))
            assert float(distillation_loss(z, e)) >= 0.0
            rp = torch.tensor(rng.uniform(0.01, 0.99, (2, 4)))
            rt = torch.tensor(rng.integers(0, 2, (2, 4)).astype(np.float64))
            assert float(aux_relation_loss(rp, rt, [0], [1, 2, 3], 2.0)) >= 0.0
