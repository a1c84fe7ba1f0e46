"""Training objectives for the detector and the pair classifier.

Detector side: a set-based match between predicted and annotated boxes
followed by classification, box regression, embedding distillation, and
an auxiliary per-frame relation term. Classifier side: multi-label
relation BCE plus object-consistency and interaction regularizers.
"""

from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .config import ConfigError
from .geometry import elementwise_giou, pairwise_giou, pairwise_l1

EPS = 1e-7


class TrainingError(RuntimeError):
    """Raised when a loss goes non-finite and optimization must stop."""


@dataclass(frozen=True)
class DetectorLossWeights:
    focal: float = 3.0
    l1: float = 5.0
    giou: float = 5.0
    distill: float = 2.0
    aux_relation: float = 2.0
    static_emphasis: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"weight {f.name} must be nonnegative")

    @classmethod
    def from_config(cls, cfg) -> "DetectorLossWeights":
        return cls(
            focal=float(cfg["loss.lambda_focal"]),
            l1=float(cfg["loss.lambda_l1"]),
            giou=float(cfg["loss.lambda_giou"]),
            distill=float(cfg["loss.lambda_distill"]),
            aux_relation=float(cfg["loss.lambda_aux_relation"]),
            static_emphasis=float(cfg["loss.lambda_static"]),
        )


@dataclass(frozen=True)
class ClassifierLossWeights:
    object_weight: float = 0.2
    interaction_weight: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"weight {f.name} must be nonnegative")

    @classmethod
    def from_config(cls, cfg) -> "ClassifierLossWeights":
        return cls(
            object_weight=float(cfg["loss.gamma_object"]),
            interaction_weight=float(cfg["loss.delta_interaction"]),
        )


def bipartite_match(pred_boxes, pred_probs, gt_boxes, gt_labels, weights):
    """One-to-one assignment of predictions to annotations.

    The pairwise cost combines how little probability the prediction puts
    on the annotated class, the coordinate distance between the boxes, and
    their generalized-overlap deficit. Returns (pred_idx, gt_idx) index
    arrays of length min(P, G); predictions left out of the assignment are
    background for the classification term.
    """
    n_pred, n_gt = len(pred_boxes), len(gt_boxes)
    if n_pred == 0 or n_gt == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy()
    with torch.no_grad():
        cls_cost = 1.0 - pred_probs[:, gt_labels]
        l1_cost = pairwise_l1(pred_boxes, gt_boxes)
        giou_cost = 1.0 - pairwise_giou(pred_boxes, gt_boxes)
        cost = (weights.focal * cls_cost + weights.l1 * l1_cost
                + weights.giou * giou_cost)
    rows, cols = linear_sum_assignment(cost.cpu().numpy())
    return rows.astype(np.int64), cols.astype(np.int64)


def focal_loss(probs, labels, gamma_foc: float = 2.0, alpha_foc: float = 0.25):
    """Hardness-weighted classification loss over matched slots.

    `probs` holds per-slot class probabilities in [0, 1]; each slot's
    annotated class contributes -alpha (1-p)^gamma log p and every other
    class the mirrored negative term. Slot sums are averaged. With
    gamma_foc=0 and alpha_foc=1 this is plain cross entropy.
    """
    with torch.no_grad():
        lo, hi = probs.aminmax()
        if float(lo) < 0.0 or float(hi) > 1.0:
            raise ValueError("focal_loss expects probabilities in [0, 1]")
    p = probs.clamp(EPS, 1.0 - EPS)
    one_hot = F.one_hot(labels, num_classes=p.shape[-1]).to(p.dtype)
    pos = -alpha_foc * (1.0 - p).pow(gamma_foc) * p.log()
    neg = -(1.0 - alpha_foc) * p.pow(gamma_foc) * (1.0 - p).log()
    per_slot = (one_hot * pos + (1.0 - one_hot) * neg).sum(-1)
    return per_slot.mean()


def box_l1_loss(pred_boxes, gt_boxes):
    """Mean over boxes of the summed coordinate distance."""
    return (pred_boxes - gt_boxes).abs().sum(-1).mean()


def giou_loss(pred_boxes, gt_boxes):
    """Mean generalized-overlap deficit between matched box pairs."""
    return (1.0 - elementwise_giou(pred_boxes, gt_boxes)).mean()


def distillation_loss(queries, targets):
    """Mean elementwise distance pulling query embeddings toward targets.

    Targets come from the frozen image encoder and receive no gradient.
    An empty batch contributes zero.
    """
    if queries.numel() == 0:
        return queries.new_tensor(0.0)
    return (targets.detach() - queries).abs().mean()


def _bce(probs, targets):
    p = probs.clamp(EPS, 1.0 - EPS)
    return -(targets * p.log() + (1.0 - targets) * (1.0 - p).log())


def aux_relation_loss(probs, targets, static_indices, dynamic_indices,
                      static_emphasis: float):
    """Per-frame multi-label relation supervision on detector queries.

    The category axis is split into a static subset and a dynamic subset;
    each contributes the mean binary cross entropy over its own columns
    and the static part is scaled by `static_emphasis`. The subsets must
    not overlap.
    """
    shared = set(static_indices) & set(dynamic_indices)
    if shared:
        raise ConfigError(
            f"static and dynamic relation subsets overlap: {sorted(shared)}")

    def subset_mean(idx):
        if len(idx) == 0:
            return probs.new_tensor(0.0)
        cols = torch.as_tensor(list(idx), dtype=torch.long,
                               device=probs.device)
        return _bce(probs.index_select(-1, cols),
                    targets.index_select(-1, cols)).mean()

    return subset_mean(dynamic_indices) + static_emphasis * subset_mean(
        static_indices)


def relation_bce(scores, targets):
    """Multi-label binary cross entropy over relation categories."""
    return _bce(scores, targets).mean()


def object_consistency_ce(sims_subject, label_subject, sims_object,
                          label_object):
    """Cross entropy tying role embeddings to their trajectory classes.

    Each role's similarity row is softmax-normalized and scored against
    its annotated class; the two role losses are averaged.
    """

    def one_role(sims, label):
        p = F.softmax(sims, dim=-1).clamp(EPS, 1.0 - EPS)
        return -p[..., label].log()

    return 0.5 * (one_role(sims_subject, label_subject)
                  + one_role(sims_object, label_object))


def interaction_bce(probs, targets):
    """Per-frame binary cross entropy on the interaction indicator."""
    return _bce(probs, targets).mean()


_DETECTOR_PARTS = ("focal", "l1", "giou", "distill", "aux_relation")


def _check_finite(name, value):
    if not torch.isfinite(value).all():
        raise TrainingError(f"loss part '{name}' is not finite")


def detector_total(parts, weights: DetectorLossWeights):
    """Weighted sum of the five detector loss parts."""
    total = None
    for name in _DETECTOR_PARTS:
        value = parts[name]
        _check_finite(name, value)
        term = getattr(weights, name) * value
        total = term if total is None else total + term
    return total


def relation_total(rel, obj, inter, weights: ClassifierLossWeights):
    """Relation BCE plus weighted object and interaction regularizers."""
    for name, value in (("relation", rel), ("object", obj),
                        ("interaction", inter)):
        _check_finite(name, value)
    return (rel + weights.object_weight * obj
            + weights.interaction_weight * inter)
