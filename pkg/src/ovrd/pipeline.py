"""Video-level assembly: frames in, scored relation predictions out.

The stages are frame encoding with the frozen backbone, query-based
detection with prompt-ensembled category scores, trajectory association
over RoI-pooled frame features, and pair classification over every
trajectory pair with enough temporal overlap. Ground-truth trajectories
can replace the detection and association stages, which yields the
classification-only task variants.
"""

from typing import List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .association import (
    AssociationParams,
    Detection,
    Trajectory,
    TrajectoryMemory,
    associate,
    memory_pairs,
)
from .config import ConfigError
from .datasets import VideoAnnotation, VocabularySplit, render_frame
from .detector import build_detector, classify_embeddings
from .encoders import FeatureCache, FrameFeatures, build_encoder
from .evaluation import TASKS, ScoredRelation, ScoredTrack, VideoPrediction
from .geometry import Box, roi_pool
from .prompting import AuxObjectClassifier, EnsembleWeights, ensemble
from .relation import PairFeatures, build_relation_classifier


def encode_video(encoder, ann: VideoAnnotation,
                 cache: Optional[FeatureCache] = None) -> List[FrameFeatures]:
    """Render and encode every frame of a clip, using the cache if given."""
    out = []
    for t in range(ann.frame_count):
        image = render_frame(ann, t)
        feats = None
        key = None
        if cache is not None:
            key = cache.key_for(encoder, image)
            feats = cache.get(key)
            if feats is not None:
                feats = FrameFeatures(feats.global_feature, feats.patches, t)
        if feats is None:
            feats = encoder.encode_frame(image, t)
            if cache is not None:
                cache.put(key, feats)
        out.append(feats)
    return out


class RelationPipeline(nn.Module):
    """End-to-end model state plus the glue between stages.

    Holds the three trainable parts (detector, auxiliary object
    classifier, relation classifier) so checkpointing sees one module.
    The frozen encoder is shared by all of them.
    """

    def __init__(self, cfg, vocab: VocabularySplit, encoder=None):
        super().__init__()
        self.vocab = vocab
        self.encoder = encoder if encoder is not None else build_encoder(cfg)
        self.detector = build_detector(
            cfg, self.encoder.spec.feature_dim, len(vocab.base_relations))
        self.aux = AuxObjectClassifier(
            self.encoder,
            n_continuous=cfg["prompt.n_continuous"],
            n_conditional=cfg["prompt.n_conditional"])
        self.relation = build_relation_classifier(cfg, self.encoder)
        self.epsilon = float(cfg["detector.epsilon"])
        self.tau = float(cfg["detector.tau"])
        self.ensemble_weights = EnsembleWeights(
            alpha=cfg["ensemble.alpha"], beta=cfg["ensemble.beta"])
        self.assoc = AssociationParams.from_config(cfg)
        self.top_k = int(cfg["rel.top_k"])

    # ------------------------------------------------------------- text side

    def category_anchors(self, names: Sequence[str]) -> torch.Tensor:
        """Plain text features of category names, one row per name."""
        return torch.stack(
            [self.encoder.encode_text(name.split()) for name in names])

    def _base_mask(self, names: Sequence[str]) -> torch.Tensor:
        base = set(self.vocab.base_objects)
        return torch.tensor([n in base for n in names], dtype=torch.bool)

    # -------------------------------------------------------- detection path

    def _frame_detections(self, feats: FrameFeatures, anchors: torch.Tensor,
                          names: Sequence[str],
                          base_mask: torch.Tensor) -> List[Detection]:
        bundle = self.detector(feats.patches)
        kept = self.detector.filter_detections(
            bundle, anchors, self.epsilon, self.tau)
        out = []
        for i in range(kept.boxes.shape[0]):
            box = kept.boxes[i].detach().cpu().numpy().astype(float)
            pooled = roi_pool(feats.patches, Box(*box))
            rescored = self.aux.rescore(pooled, names, self.tau)
            mixed = ensemble(kept.scores[i], rescored,
                             self.ensemble_weights, base_mask)
            out.append(Detection(box=box, embedding=pooled, scores=mixed))
        return out

    def track_video(self, ann: VideoAnnotation, object_names: Sequence[str],
                    frames: Sequence[FrameFeatures]) -> TrajectoryMemory:
        """Detect per frame and link detections into trajectories."""
        anchors = self.category_anchors(object_names)
        base_mask = self._base_mask(object_names)
        per_frame = [
            self._frame_detections(f, anchors, object_names, base_mask)
            for f in frames]
        return TrajectoryMemory(ann.video_id, associate(per_frame, self.assoc))

    def memory_from_annotation(self, ann: VideoAnnotation,
                               object_names: Sequence[str],
                               frames: Sequence[FrameFeatures],
                               fixed_labels: bool = False) -> TrajectoryMemory:
        """Trajectories from ground-truth boxes.

        With fixed_labels the per-frame score vector is the one-hot
        annotation (the fully supervised label setting); otherwise boxes
        are classified from their pooled features like detections are.
        """
        names = list(object_names)
        anchors = None if fixed_labels else self.category_anchors(names)
        base_mask = self._base_mask(names)
        trajectories = []
        for tid in sorted(ann.tracks):
            seq = ann.tracks[tid]
            pooled = torch.stack([
                roi_pool(frames[t].patches, seq.box_at(t))
                for t in range(seq.start, seq.end + 1)])
            if fixed_labels:
                label = ann.categories[tid]
                if label not in names:
                    raise ConfigError(
                        f"annotated category {label!r} missing from the "
                        f"provided name list")
                scores = torch.zeros(pooled.shape[0], len(names))
                scores[:, names.index(label)] = 1.0
            else:
                plain = classify_embeddings(pooled, anchors, self.tau)
                rescored = torch.stack([
                    self.aux.rescore(e, names, self.tau) for e in pooled])
                scores = ensemble(plain, rescored, self.ensemble_weights,
                                  base_mask)
            trajectories.append(Trajectory(
                id=tid, span=seq, embeddings=pooled, frame_scores=scores,
                interpolated=np.zeros(len(seq), dtype=bool)))
        return TrajectoryMemory(ann.video_id, trajectories)

    # ------------------------------------------------------- relation stage

    def classify_pairs(self, memory: TrajectoryMemory,
                       frames: Sequence[FrameFeatures],
                       relation_names: Sequence[str]) -> List[ScoredRelation]:
        """Score every sufficiently overlapping ordered trajectory pair.

        Each pair emits its top-k relation categories as candidate
        instances over the full overlap span.
        """
        metas = memory_pairs(memory, self.assoc.min_overlap)
        if not metas:
            return []
        pairs = []
        for a, b, (start, end) in metas:
            sl_a = slice(start - a.span.start, end - a.span.start + 1)
            sl_b = slice(start - b.span.start, end - b.span.start + 1)
            context = torch.stack([
                frames[t].global_feature for t in range(start, end + 1)])
            pairs.append(PairFeatures(
                subject_features=a.embeddings[sl_a],
                object_features=b.embeddings[sl_b],
                context_features=context,
                subject_boxes=torch.as_tensor(a.span.boxes[sl_a],
                                              dtype=torch.float32),
                object_boxes=torch.as_tensor(b.span.boxes[sl_b],
                                             dtype=torch.float32),
                subject_tid=a.id,
                object_tid=b.id,
                frame_indices=torch.arange(start, end + 1)))
        rows = self.relation.score_relations_many(pairs, relation_names)
        out = []
        k = min(self.top_k, len(relation_names))
        for (a, b, (start, end)), row in zip(metas, rows):
            top = torch.topk(row, k)
            for val, idx in zip(top.values, top.indices):
                out.append(ScoredRelation(
                    a.id, relation_names[int(idx)], b.id,
                    start, end + 1, float(val)))
        return out

    # ------------------------------------------------------------ full runs

    def predict_video(self, ann: VideoAnnotation, task: str = "sgdet",
                      object_names: Optional[Sequence[str]] = None,
                      relation_names: Optional[Sequence[str]] = None,
                      frames: Optional[Sequence[FrameFeatures]] = None,
                      cache: Optional[FeatureCache] = None) -> VideoPrediction:
        """Run one clip through the stages a task variant requires."""
        if task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
        object_names = list(object_names if object_names is not None
                            else self.vocab.all_objects())
        relation_names = list(relation_names if relation_names is not None
                              else self.vocab.all_relations())
        with torch.no_grad():
            if frames is None:
                frames = encode_video(self.encoder, ann, cache)
            if task == "sgdet":
                memory = self.track_video(ann, object_names, frames)
            else:
                memory = self.memory_from_annotation(
                    ann, object_names, frames,
                    fixed_labels=task == "predcls")
            tracks = {}
            for tr in memory.trajectories:
                vec, label = tr.aggregate()
                tracks[tr.id] = ScoredTrack(
                    tr.id, object_names[label], float(vec[label]), tr.span)
            relations = self.classify_pairs(memory, frames, relation_names)
        return VideoPrediction(ann.video_id, tracks, relations)


def build_pipeline(cfg, vocab: VocabularySplit,
                   encoder=None) -> RelationPipeline:
    return RelationPipeline(cfg, vocab, encoder)
