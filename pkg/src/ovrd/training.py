"""Four-step optimization schedule over the assembled pipeline.

Step 1 fits the query detector on frame-level boxes plus the frame
relation-occupancy side task. Step 2 fits the prompt-based object
classifier on annotated boxes with the detector held fixed. Step 3 fits
the relation classifier on ground-truth trajectory pairs. Step 4
fine-tunes all three parts jointly, routing detected trajectories into
the relation stage through the hard association assignment. The frozen
backbone never enters any optimizer; each step checkpoints per epoch
and appends per-part loss values to one CSV log.
"""

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import ConfigError
from .datasets import VideoAnnotation, render_frame
from .detector import classify_embeddings
from .encoders import FrameFeatures
from .geometry import Box, TimedBoxSequence, roi_pool, viou
from .losses import (
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
from .pipeline import RelationPipeline, encode_video
from .relation import PairFeatures

STEPS = (1, 2, 3, 4)

# The joint loss of step 4 reaches the detector through the frame terms
# and the relation stage through routed pairs; the auxiliary object
# classifier has no term there, so it stays out of that step's groups.
_STEP_GROUPS: Dict[int, Tuple[str, ...]] = {
    1: ("detector",),
    2: ("aux",),
    3: ("relation",),
    4: ("detector", "relation"),
}

_EPS = 1e-7


# --------------------------------------------------------------------------
# ground-truth targets


def frame_targets(ann: VideoAnnotation, t: int, object_names: Sequence[str],
                  relation_names: Sequence[str]
                  ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Boxes, labels and relation occupancy annotated at one frame.

    Returns a (G, 4) float box tensor in (cx, cy, w, h), a (G,) long
    label-index tensor, and a multi-hot vector marking every relation
    category active at frame t. Tracks whose category is missing from
    object_names are skipped, as are relations outside relation_names.
    """
    name_idx = {n: i for i, n in enumerate(object_names)}
    rel_idx = {n: i for i, n in enumerate(relation_names)}
    boxes, labels = [], []
    for tid in sorted(ann.tracks):
        seq = ann.tracks[tid]
        if seq.covers(t) and ann.categories[tid] in name_idx:
            boxes.append(list(seq.box_at(t)))
            labels.append(name_idx[ann.categories[tid]])
    occupancy = torch.zeros(len(relation_names))
    for r in ann.relations:
        if r.begin <= t < r.end and r.predicate in rel_idx:
            occupancy[rel_idx[r.predicate]] = 1.0
    box_tensor = (torch.tensor(boxes, dtype=torch.float32)
                  if boxes else torch.zeros(0, 4))
    return box_tensor, torch.tensor(labels, dtype=torch.long), occupancy


@dataclass
class PairSample:
    """One trajectory pair prepared for the relation losses."""

    pair: PairFeatures
    relation_target: torch.Tensor
    interaction_target: torch.Tensor
    subject_label: int
    object_label: int


def _pair_targets(relations, subject_tid: int, object_tid: int,
                  relation_names: Sequence[str],
                  frame_indices: torch.Tensor
                  ) -> Tuple[torch.Tensor, torch.Tensor]:
    rel_idx = {n: i for i, n in enumerate(relation_names)}
    target = torch.zeros(len(relation_names))
    interacting = torch.zeros(frame_indices.shape[0])
    frames = frame_indices.tolist()
    for r in relations:
        if r.subject_tid != subject_tid or r.object_tid != object_tid:
            continue
        if r.predicate in rel_idx:
            target[rel_idx[r.predicate]] = 1.0
        for k, t in enumerate(frames):
            if r.begin <= t < r.end:
                interacting[k] = 1.0
    return target, interacting


def pair_samples(ann: VideoAnnotation, frames: Sequence[FrameFeatures],
                 object_names: Sequence[str],
                 relation_names: Sequence[str], min_overlap: int,
                 max_span: int,
                 track_features: Optional[Dict[int, torch.Tensor]] = None
                 ) -> List[PairSample]:
    """Every ordered ground-truth pair with enough overlap, with targets.

    Pairs with no annotated relation come out with all-zero targets and
    serve as negatives. Long pairs are thinned to max_span frames before
    the interaction bits are read off, so bits and rows stay aligned.
    """
    names = list(object_names)
    if track_features is None:
        track_features = gt_track_features(ann, frames)
    tids = [tid for tid in sorted(ann.tracks) if ann.categories[tid] in names]
    out = []
    for a in tids:
        for b in tids:
            if a == b:
                continue
            sa, sb = ann.tracks[a], ann.tracks[b]
            start, end = max(sa.start, sb.start), min(sa.end, sb.end)
            if end - start + 1 < min_overlap:
                continue
            sl_a = slice(start - sa.start, end - sa.start + 1)
            sl_b = slice(start - sb.start, end - sb.start + 1)
            context = torch.stack([
                frames[t].global_feature for t in range(start, end + 1)])
            pair = PairFeatures(
                subject_features=track_features[a][sl_a],
                object_features=track_features[b][sl_b],
                context_features=context,
                subject_boxes=torch.as_tensor(sa.boxes[sl_a],
                                              dtype=torch.float32),
                object_boxes=torch.as_tensor(sb.boxes[sl_b],
                                             dtype=torch.float32),
                subject_tid=a, object_tid=b,
                frame_indices=torch.arange(start, end + 1))
            pair = pair.subsample(max_span)
            target, interacting = _pair_targets(
                ann.relations, a, b, relation_names, pair.frame_indices)
            out.append(PairSample(
                pair=pair, relation_target=target,
                interaction_target=interacting,
                subject_label=names.index(ann.categories[a]),
                object_label=names.index(ann.categories[b])))
    return out


def gt_track_features(ann: VideoAnnotation,
                      frames: Sequence[FrameFeatures]
                      ) -> Dict[int, torch.Tensor]:
    """Pooled frozen features over every annotated track, per frame."""
    out = {}
    with torch.no_grad():
        for tid in sorted(ann.tracks):
            seq = ann.tracks[tid]
            out[tid] = torch.stack([
                roi_pool(frames[t].patches, seq.box_at(t))
                for t in range(seq.start, seq.end + 1)])
    return out


# --------------------------------------------------------------------------
# parameter bookkeeping


def parameter_checksums(pipeline: RelationPipeline) -> Dict[str, str]:
    """SHA-256 digests of each trainable group plus the frozen encoder."""
    out = {}
    for group in ("detector", "aux", "relation"):
        module = getattr(pipeline, group)
        digest = hashlib.sha256()
        for name, param in sorted(module.named_parameters()):
            digest.update(name.encode())
            digest.update(param.detach().cpu().numpy().tobytes())
        out[group] = digest.hexdigest()
    out["encoder"] = pipeline.encoder.state_checksum()
    return out


def _vocab_hash(vocab) -> str:
    text = repr((vocab.base_objects, vocab.novel_objects,
                 vocab.base_relations, vocab.novel_relations,
                 vocab.static_relations))
    return hashlib.sha256(text.encode()).hexdigest()


def restore_pipeline(pipeline: RelationPipeline, path) -> dict:
    """Load checkpointed weights into a pipeline and return the raw state.

    Refuses checkpoints written against a different frozen backbone or a
    different vocabulary, since silently mixing either would change what
    every anchor and prompt means.
    """
    state = torch.load(path, weights_only=True)
    if state["encoder"] != pipeline.encoder.state_checksum():
        raise ConfigError(
            "checkpoint was written with a different backbone")
    if state["vocab"] != _vocab_hash(pipeline.vocab):
        raise ConfigError(
            "checkpoint was written with a different vocabulary")
    pipeline.load_state_dict(state["model"])
    return state


# --------------------------------------------------------------------------
# trainer


class Trainer:
    """Runs the four optimization steps and owns checkpoints and the log.

    Frame features, rendered images and pair samples are cached per
    video id; all of them depend only on the frozen backbone and the
    annotations, so they stay valid across epochs and steps.
    """

    def __init__(self, pipeline: RelationPipeline, cfg, out_dir, seed: int = 0):
        self.pipeline = pipeline
        self.cfg = cfg
        self.seed = int(seed)
        self.out_dir = Path(out_dir)
        (self.out_dir / "ckpt").mkdir(parents=True, exist_ok=True)
        self.log_path = self.out_dir / "train_log.csv"
        if not self.log_path.exists():
            with open(self.log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(["step", "part", "value"])
        self.det_weights = DetectorLossWeights.from_config(cfg)
        self.cls_weights = ClassifierLossWeights.from_config(cfg)
        self.focal_gamma = float(cfg["loss.focal_gamma"])
        self.focal_alpha = float(cfg["loss.focal_alpha"])
        self.weight_decay = float(cfg["train.weight_decay"])
        vocab = pipeline.vocab
        self.object_names = list(vocab.base_objects)
        self.relation_names = list(vocab.base_relations)
        static = set(vocab.static_relations)
        self.static_idx = [i for i, n in enumerate(self.relation_names)
                           if n in static]
        self.dynamic_idx = [i for i, n in enumerate(self.relation_names)
                            if n not in static]
        self.global_step = 0
        self.history: Dict[int, List[float]] = {s: [] for s in STEPS}
        self._frames: Dict[str, List[FrameFeatures]] = {}
        self._images: Dict[str, List[np.ndarray]] = {}
        self._tracks: Dict[str, Dict[int, torch.Tensor]] = {}
        self._pairs: Dict[str, List[PairSample]] = {}
        self._anchors: Optional[torch.Tensor] = None
        self._object_text: Optional[torch.Tensor] = None

    # ------------------------------------------------------------- caches

    def frames_for(self, ann: VideoAnnotation) -> List[FrameFeatures]:
        if ann.video_id not in self._frames:
            with torch.no_grad():
                self._frames[ann.video_id] = encode_video(
                    self.pipeline.encoder, ann)
        return self._frames[ann.video_id]

    def images_for(self, ann: VideoAnnotation) -> List[np.ndarray]:
        if ann.video_id not in self._images:
            self._images[ann.video_id] = [
                render_frame(ann, t) for t in range(ann.frame_count)]
        return self._images[ann.video_id]

    def tracks_for(self, ann: VideoAnnotation) -> Dict[int, torch.Tensor]:
        if ann.video_id not in self._tracks:
            self._tracks[ann.video_id] = gt_track_features(
                ann, self.frames_for(ann))
        return self._tracks[ann.video_id]

    def pairs_for(self, ann: VideoAnnotation) -> List[PairSample]:
        if ann.video_id not in self._pairs:
            self._pairs[ann.video_id] = pair_samples(
                ann, self.frames_for(ann), self.object_names,
                self.relation_names, self.pipeline.assoc.min_overlap,
                self.pipeline.relation.max_span, self.tracks_for(ann))
        return self._pairs[ann.video_id]

    def set_pairs(self, video_id: str, samples: List[PairSample]) -> None:
        """Pin the pair set used for a video, e.g. to hold some pairs out."""
        self._pairs[video_id] = list(samples)

    def anchors(self) -> torch.Tensor:
        if self._anchors is None:
            with torch.no_grad():
                self._anchors = self.pipeline.category_anchors(
                    self.object_names)
        return self._anchors

    def object_text(self) -> torch.Tensor:
        if self._object_text is None:
            with torch.no_grad():
                self._object_text = \
                    self.pipeline.relation.handcrafted_text_features(
                        self.object_names)
        return self._object_text

    # -------------------------------------------------------- loss pieces

    def _crop_feature(self, image: np.ndarray, box: torch.Tensor) -> torch.Tensor:
        """Frozen-backbone feature of one predicted box, in pixel space."""
        h, w = image.shape[:2]
        cx, cy, bw, bh = [float(v) for v in box.detach()]
        x1 = float(np.clip((cx - bw / 2) * w, 0, w - 1))
        y1 = float(np.clip((cy - bh / 2) * h, 0, h - 1))
        x2 = float(np.clip((cx + bw / 2) * w, x1 + 1, w))
        y2 = float(np.clip((cy + bh / 2) * h, y1 + 1, h))
        return self.pipeline.encoder.encode_crop(image, (x1, y1, x2, y2))

    def detector_frame_parts(self, ann: VideoAnnotation, t: int,
                             feats: FrameFeatures, image: np.ndarray
                             ) -> Dict[str, torch.Tensor]:
        """All five detector loss parts for one frame."""
        bundle = self.pipeline.detector(feats.patches)
        with torch.no_grad():
            finite = bool(torch.isfinite(bundle.boxes).all()) and \
                bool(torch.isfinite(bundle.object_embeddings).all())
        if not finite:
            raise TrainingError("detector outputs are not finite")
        gt_boxes, gt_labels, occupancy = frame_targets(
            ann, t, self.object_names, self.relation_names)
        zero = bundle.boxes.sum() * 0.0
        parts = {k: zero for k in ("focal", "l1", "giou", "distill")}
        if gt_boxes.shape[0] > 0:
            probs = classify_embeddings(
                bundle.object_embeddings, self.anchors(), self.pipeline.tau)
            rows, cols = bipartite_match(
                bundle.boxes, probs, gt_boxes, gt_labels, self.det_weights)
            parts["focal"] = focal_loss(
                probs[rows], gt_labels[cols],
                self.focal_gamma, self.focal_alpha)
            parts["l1"] = box_l1_loss(bundle.boxes[rows], gt_boxes[cols])
            parts["giou"] = giou_loss(bundle.boxes[rows], gt_boxes[cols])
            crops = torch.stack([
                self._crop_feature(image, bundle.boxes[i]) for i in rows])
            parts["distill"] = distillation_loss(
                bundle.object_embeddings[rows], crops)
        if bundle.relation_logits is not None:
            parts["aux_relation"] = aux_relation_loss(
                torch.sigmoid(bundle.relation_logits), occupancy,
                self.static_idx, self.dynamic_idx,
                self.det_weights.static_emphasis)
        else:
            parts["aux_relation"] = zero
        return parts

    def classifier_loss(self, pooled: torch.Tensor, label: int) -> torch.Tensor:
        """Cross entropy of the prompt-based classifier on one box."""
        probs = self.pipeline.aux.rescore(
            pooled, self.object_names, self.pipeline.tau)
        return -torch.log(probs[label].clamp(_EPS, 1.0))

    def relation_pair_parts(self, sample: PairSample
                            ) -> Dict[str, torch.Tensor]:
        """Relation, object-consistency and interaction parts for a pair."""
        rel = self.pipeline.relation
        pair = sample.pair
        v_dot, v_ddot = rel.encode_pair(pair)
        text = rel.relation_text_features(pair, self.relation_names)
        scores = rel.relation_scores_from(
            rel.pair_embedding(v_ddot), text.to(v_ddot.dtype))
        parts = {"relation": relation_bce(scores, sample.relation_target)}
        zero = scores.sum() * 0.0
        if self.cls_weights.object_weight > 0:
            v_s, v_o = rel.object_consistency_features(v_dot)
            obj_text = self.object_text()
            parts["object"] = object_consistency_ce(
                rel.cosine_scores(v_s, obj_text), sample.subject_label,
                rel.cosine_scores(v_o, obj_text), sample.object_label)
        else:
            parts["object"] = zero
        if self.cls_weights.interaction_weight > 0:
            parts["interaction"] = interaction_bce(
                rel.predict_interaction(v_ddot), sample.interaction_target)
        else:
            parts["interaction"] = zero
        return parts

    # ---------------------------------------------------------- batching

    def _log_parts(self, step: int, parts: Dict[str, float]) -> None:
        with open(self.log_path, "a", newline="") as fh:
            writer = csv.writer(fh)
            for name, value in parts.items():
                writer.writerow(
                    [self.global_step, f"step{step}/{name}", repr(value)])

    def _optimize_batch(self, step: int, optimizer, total: torch.Tensor,
                        part_means: Dict[str, float]) -> None:
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        self.global_step += 1
        value = float(total.detach())
        self.history[step].append(value)
        part_means = dict(part_means)
        part_means["total"] = value
        self._log_parts(step, part_means)

    def _permutation(self, step: int, epoch: int, n: int) -> np.ndarray:
        rng = np.random.default_rng((self.seed, step, epoch))
        return rng.permutation(n)

    @staticmethod
    def _batches(order: np.ndarray, size: int) -> List[np.ndarray]:
        return [order[i:i + size] for i in range(0, len(order), size)]

    def _mean_parts(self, parts_list: List[Dict[str, torch.Tensor]],
                    weigher) -> Tuple[torch.Tensor, Dict[str, float]]:
        keys = parts_list[0].keys()
        mean = {k: torch.stack([p[k] for p in parts_list]).mean()
                for k in keys}
        total = weigher(mean)
        logged = {k: float(v.detach()) for k, v in mean.items()}
        return total, logged

    # ------------------------------------------------------- step epochs

    def _step1_epoch(self, annotations, optimizer, epoch: int,
                     batch: int) -> None:
        items = [(i, t) for i, ann in enumerate(annotations)
                 for t in range(ann.frame_count)]
        order = self._permutation(1, epoch, len(items))
        for chunk in self._batches(order, batch):
            parts_list = []
            for j in chunk:
                i, t = items[j]
                ann = annotations[i]
                parts_list.append(self.detector_frame_parts(
                    ann, t, self.frames_for(ann)[t], self.images_for(ann)[t]))
            total, logged = self._mean_parts(
                parts_list, lambda m: detector_total(m, self.det_weights))
            self._optimize_batch(1, optimizer, total, logged)

    def _step2_epoch(self, annotations, optimizer, epoch: int,
                     batch: int) -> None:
        items = []
        for i, ann in enumerate(annotations):
            for tid in sorted(ann.tracks):
                if ann.categories[tid] not in self.object_names:
                    continue
                label = self.object_names.index(ann.categories[tid])
                seq = ann.tracks[tid]
                for t in range(seq.start, seq.end + 1):
                    items.append((i, tid, t, label))
        order = self._permutation(2, epoch, len(items))
        for chunk in self._batches(order, batch):
            losses = []
            for j in chunk:
                i, tid, t, label = items[j]
                ann = annotations[i]
                pooled = self.tracks_for(ann)[tid][t - ann.tracks[tid].start]
                losses.append(self.classifier_loss(pooled, label))
            total = torch.stack(losses).mean()
            if not bool(torch.isfinite(total.detach())):
                raise TrainingError("loss part 'object_ce' is not finite")
            self._optimize_batch(
                2, optimizer, total, {"object_ce": float(total.detach())})

    def _step3_epoch(self, annotations, optimizer, epoch: int,
                     batch: int) -> None:
        samples = [s for ann in annotations for s in self.pairs_for(ann)]
        order = self._permutation(3, epoch, len(samples))
        for chunk in self._batches(order, batch):
            parts_list = [self.relation_pair_parts(samples[j]) for j in chunk]
            total, logged = self._mean_parts(
                parts_list,
                lambda m: relation_total(
                    m["relation"], m["object"], m["interaction"],
                    self.cls_weights))
            self._optimize_batch(3, optimizer, total, logged)

    def _step4_epoch(self, annotations, optimizer, epoch: int,
                     batch: int) -> None:
        order = self._permutation(4, epoch, len(annotations))
        for chunk in self._batches(order, max(batch, 1)):
            parts_list = []
            rel_parts_list = []
            for j in chunk:
                ann = annotations[j]
                frames = self.frames_for(ann)
                images = self.images_for(ann)
                for t in range(ann.frame_count):
                    parts_list.append(self.detector_frame_parts(
                        ann, t, frames[t], images[t]))
                rel_parts_list.extend(self._detected_pair_parts(ann, frames))
            total, logged = self._mean_parts(
                parts_list, lambda m: detector_total(m, self.det_weights))
            if rel_parts_list:
                rel_total, rel_logged = self._mean_parts(
                    rel_parts_list,
                    lambda m: relation_total(
                        m["relation"], m["object"], m["interaction"],
                        self.cls_weights))
                total = total + rel_total
                logged.update(rel_logged)
            self._optimize_batch(4, optimizer, total, logged)

    def _detected_pair_parts(self, ann: VideoAnnotation,
                             frames) -> List[Dict[str, torch.Tensor]]:
        """Relation parts over detected trajectories routed to GT labels.

        The association output is matched to annotated tracks by overlap;
        only pairs whose two members both matched contribute, since the
        targets come from the matched annotation. The assignment itself
        carries no gradient, the classifier input features do.
        """
        with torch.no_grad():
            memory = self.pipeline.track_video(ann, self.object_names, frames)
        matched = _route_to_gt(memory, ann)
        out = []
        rel = self.pipeline.relation
        for tr_a in memory.trajectories:
            for tr_b in memory.trajectories:
                if tr_a.id == tr_b.id:
                    continue
                if tr_a.id not in matched or tr_b.id not in matched:
                    continue
                ga, gb = matched[tr_a.id], matched[tr_b.id]
                start = max(tr_a.span.start, tr_b.span.start)
                end = min(tr_a.span.end, tr_b.span.end)
                if end - start + 1 < self.pipeline.assoc.min_overlap:
                    continue
                sl_a = slice(start - tr_a.span.start,
                             end - tr_a.span.start + 1)
                sl_b = slice(start - tr_b.span.start,
                             end - tr_b.span.start + 1)
                context = torch.stack([
                    frames[t].global_feature for t in range(start, end + 1)])
                pair = PairFeatures(
                    subject_features=tr_a.embeddings[sl_a],
                    object_features=tr_b.embeddings[sl_b],
                    context_features=context,
                    subject_boxes=torch.as_tensor(
                        tr_a.span.boxes[sl_a], dtype=torch.float32),
                    object_boxes=torch.as_tensor(
                        tr_b.span.boxes[sl_b], dtype=torch.float32),
                    subject_tid=tr_a.id, object_tid=tr_b.id,
                    frame_indices=torch.arange(start, end + 1))
                pair = pair.subsample(rel.max_span)
                target, interacting = _pair_targets(
                    ann.relations, ga, gb, self.relation_names,
                    pair.frame_indices)
                sample = PairSample(
                    pair=pair, relation_target=target,
                    interaction_target=interacting,
                    subject_label=self.object_names.index(
                        ann.categories[ga]),
                    object_label=self.object_names.index(
                        ann.categories[gb]))
                out.append(self.relation_pair_parts(sample))
        return out

    # ----------------------------------------------------------- running

    def _recipe(self, step: int) -> Tuple[float, int, int]:
        base = f"train.step{step}"
        return (float(self.cfg[f"{base}.lr"]),
                int(self.cfg[f"{base}.epochs"]),
                int(self.cfg[f"{base}.batch"]))

    def _step3_lr(self, base_lr: float, epoch: int) -> float:
        milestones = [int(m) for m in self.cfg["train.step3.milestones"]]
        decay = float(self.cfg["train.step3.lr_decay"])
        return base_lr * decay ** sum(epoch >= m for m in milestones)

    def _build_optimizer(self, step: int, lr: float):
        params = []
        for group in ("detector", "aux", "relation"):
            active = group in _STEP_GROUPS[step]
            module = getattr(self.pipeline, group)
            for p in module.parameters():
                p.requires_grad_(active)
                if active:
                    params.append(p)
        return torch.optim.AdamW(params, lr=lr,
                                 weight_decay=self.weight_decay)

    def checkpoint_path(self, step: int, epoch: int) -> Path:
        return self.out_dir / "ckpt" / f"step{step}" / f"epoch{epoch}" / \
            "state.pt"

    def save_checkpoint(self, step: int, epoch: int,
                        optimizer=None) -> Path:
        path = self.checkpoint_path(step, epoch)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "model": self.pipeline.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer else None,
            "step": step,
            "epoch": epoch,
            "global_step": self.global_step,
            "encoder": self.pipeline.encoder.state_checksum(),
            "vocab": _vocab_hash(self.pipeline.vocab),
        }, path)
        return path

    def load_checkpoint(self, path, optimizer=None) -> dict:
        state = restore_pipeline(self.pipeline, path)
        if optimizer is not None and state["optimizer"] is not None:
            optimizer.load_state_dict(state["optimizer"])
        self.global_step = int(state["global_step"])
        return state

    def run_step(self, step: int, annotations: Sequence[VideoAnnotation],
                 start_epoch: int = 0) -> List[float]:
        """Run one training step, returning its per-batch loss totals.

        start_epoch > 0 resumes from that epoch's checkpoint; epoch 0 is
        always the pre-training snapshot, so a step configured for zero
        epochs leaves exactly that behind.
        """
        if step not in STEPS:
            raise ConfigError(f"step must be one of {STEPS}, got {step}")
        lr, epochs, batch = self._recipe(step)
        if batch < 1:
            raise ConfigError(f"train.step{step}.batch must be positive")
        if not 0 <= start_epoch <= epochs:
            raise ConfigError(
                f"start_epoch {start_epoch} outside 0..{epochs}")
        epoch_fn = getattr(self, f"_step{step}_epoch")
        optimizer = self._build_optimizer(step, lr)
        if start_epoch > 0:
            self.load_checkpoint(
                self.checkpoint_path(step, start_epoch), optimizer)
        else:
            self.save_checkpoint(step, 0, optimizer)
        last_good = self.checkpoint_path(step, start_epoch)
        first = len(self.history[step])
        try:
            for epoch in range(start_epoch, epochs):
                if step == 3:
                    new_lr = self._step3_lr(lr, epoch)
                    for g in optimizer.param_groups:
                        g["lr"] = new_lr
                epoch_fn(annotations, optimizer, epoch, batch)
                last_good = self.save_checkpoint(step, epoch + 1, optimizer)
        except TrainingError:
            self.load_checkpoint(last_good)
            raise
        finally:
            for p in self.pipeline.parameters():
                p.requires_grad_(True)
        return self.history[step][first:]

    def run_all(self, annotations: Sequence[VideoAnnotation]) -> None:
        init = str(self.cfg["train.init_checkpoint"])
        if init:
            self.load_checkpoint(init)
        for step in STEPS:
            self.run_step(step, annotations)


def _route_to_gt(memory, ann: VideoAnnotation,
                 threshold: float = 0.5) -> Dict[int, int]:
    """Greedy overlap assignment of detected trajectories to GT tracks."""
    candidates = []
    for tr in memory.trajectories:
        for tid in sorted(ann.tracks):
            v = viou(tr.span, ann.tracks[tid])
            if v >= threshold:
                candidates.append((v, tr.id, tid))
    candidates.sort(key=lambda c: -c[0])
    matched: Dict[int, int] = {}
    used = set()
    for v, det_id, tid in candidates:
        if det_id in matched or tid in used:
            continue
        matched[det_id] = tid
        used.add(tid)
    return matched
