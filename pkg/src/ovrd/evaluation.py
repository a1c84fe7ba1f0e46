"""Metrics for video relation detection over base/novel category splits.

A prediction set per video holds scored object trajectories plus scored
relation instances referencing them. Matching against annotations is
greedy in descending confidence with a trajectory-overlap threshold on
both roles; average precision integrates the precision envelope over
recall. Reports cover relation mAP (per-video mean), trajectory mAP over
object categories, and recall at fixed prediction budgets.
"""

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .config import ConfigError
from .datasets import VideoAnnotation, VocabularySplit
from .geometry import TimedBoxSequence, viou

TASKS = ("sgdet", "sgcls", "predcls")
SPLITS = ("all", "novel")
_TIE = 1e-12


@dataclass(frozen=True)
class TaskSpec:
    """Which task variant and category split a report covers."""

    task: str = "sgdet"
    split: str = "all"
    viou_threshold: float = 0.5
    k_values: Tuple[int, ...] = (50, 100)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.split not in SPLITS:
            raise ConfigError(
                f"split must be one of {SPLITS}, got {self.split!r}")
        if not 0.0 < self.viou_threshold <= 1.0:
            raise ConfigError("viou_threshold must lie in (0, 1]")
        ks = tuple(int(k) for k in self.k_values)
        if not ks or any(k <= 0 for k in ks) or list(ks) != sorted(set(ks)):
            raise ConfigError("k_values must be positive and increasing")
        object.__setattr__(self, "k_values", ks)


@dataclass(frozen=True)
class ScoredTrack:
    tid: int
    label: str
    score: float
    track: TimedBoxSequence


@dataclass(frozen=True)
class ScoredRelation:
    subject_tid: int
    predicate: str
    object_tid: int
    begin: int
    end: int
    score: float


@dataclass
class VideoPrediction:
    """Model output for one video: scored tracks and relation instances."""

    video_id: str
    tracks: Dict[int, ScoredTrack]
    relations: List[ScoredRelation] = field(default_factory=list)

    def __post_init__(self):
        for st in self.tracks.values():
            if not 0.0 <= st.score <= 1.0:
                raise ValueError(f"track {st.tid} score outside [0, 1]")
        for r in self.relations:
            if not 0.0 <= r.score <= 1.0:
                raise ValueError(f"relation score outside [0, 1]: {r}")
            if r.begin < 0 or r.begin >= r.end:
                raise ValueError(f"relation span invalid: {r}")
            for tid in (r.subject_tid, r.object_tid):
                if tid not in self.tracks:
                    raise ValueError(f"relation references unknown tid: {r}")
                tr = self.tracks[tid].track
                if r.begin < tr.start or r.end - 1 > tr.end:
                    raise ValueError(
                        f"relation span [{r.begin}, {r.end}) leaves track "
                        f"{tid} coverage [{tr.start}, {tr.end}]")


class Triplet(NamedTuple):
    """One ranked candidate: labels plus role trajectories over its span."""

    confidence: float
    labels: Tuple[str, str, str]
    subject_part: TimedBoxSequence
    object_part: TimedBoxSequence


def match_triplets(predictions: Sequence[Triplet], gts, viou_thr: float):
    """Greedy hit assignment in the given (descending-confidence) order.

    `gts` holds (labels, subject_track, object_track) tuples. A prediction
    hits when an unmatched annotation carries identical labels and both
    role overlaps reach the threshold; among eligible annotations the one
    with the largest worst-role overlap wins, ties to the lowest index.
    """
    taken = [False] * len(gts)
    flags: List[bool] = []
    for p in predictions:
        best = -1
        best_key = -1.0
        for gi, (g_labels, g_sub, g_obj) in enumerate(gts):
            if taken[gi] or tuple(g_labels) != tuple(p.labels):
                continue
            vs = viou(p.subject_part, g_sub)
            if vs < viou_thr:
                continue
            vo = viou(p.object_part, g_obj)
            if vo < viou_thr:
                continue
            key = min(vs, vo)
            if key > best_key + _TIE:
                best_key = key
                best = gi
        flags.append(best >= 0)
        if best >= 0:
            taken[best] = True
    return flags


def average_precision(hits: Sequence[bool], n_gt: int) -> Optional[float]:
    """Area under the precision envelope over recall, all points.

    Returns None when there is no ground truth (the unit is excluded from
    any mean rather than counted as zero).
    """
    if n_gt < 0:
        raise ValueError("n_gt must be nonnegative")
    if n_gt == 0:
        return None
    recalls: List[float] = []
    precisions: List[float] = []
    tp = 0
    for rank, hit in enumerate(hits, start=1):
        if hit:
            tp += 1
            recalls.append(tp / n_gt)
            precisions.append(tp / rank)
    envelope = [0.0] * len(precisions)
    running = 0.0
    for i in range(len(precisions) - 1, -1, -1):
        running = max(running, precisions[i])
        envelope[i] = running
    ap = 0.0
    prev = 0.0
    for r, e in zip(recalls, envelope):
        ap += (r - prev) * e
        prev = r
    return ap


@dataclass(frozen=True)
class EvalReport:
    task: str
    split: str
    map_objects: float
    map_relations: float
    recalls: Dict[int, float]
    object_ap: Dict[str, Optional[float]]
    predicate_ap: Dict[str, Optional[float]]

    def __post_init__(self):
        named = {"mAP_o": self.map_objects, "mAP": self.map_relations}
        named.update({f"R@{k}": v for k, v in self.recalls.items()})
        for key, value in named.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{key} outside [0, 1]: {value}")
        for table in (self.object_ap, self.predicate_ap):
            for name, value in table.items():
                if value is not None and not 0.0 <= value <= 1.0:
                    raise ValueError(f"AP for {name!r} outside [0, 1]")

    def as_dict(self) -> dict:
        out = {
            "task": self.task,
            "split": self.split,
            "mAP_o": self.map_objects * 100.0,
            "mAP": self.map_relations * 100.0,
        }
        for k in sorted(self.recalls):
            out[f"R@{k}"] = self.recalls[k] * 100.0
        out["object_ap"] = {
            n: None if v is None else v * 100.0
            for n, v in self.object_ap.items()}
        out["predicate_ap"] = {
            n: None if v is None else v * 100.0
            for n, v in self.predicate_ap.items()}
        return out

    def table(self) -> str:
        ks = sorted(self.recalls)
        header = ["task", "split", "mAP_o", "mAP"] + [f"R@{k}" for k in ks]
        row = [self.task, self.split,
               f"{self.map_objects * 100:.2f}",
               f"{self.map_relations * 100:.2f}"]
        row += [f"{self.recalls[k] * 100:.2f}" for k in ks]
        widths = [max(len(h), len(r)) for h, r in zip(header, row)]
        lines = [
            "  ".join(h.ljust(w) for h, w in zip(header, widths)),
            "  ".join(r.ljust(w) for r, w in zip(row, widths)),
        ]
        return "\n".join(lines)


def _validate_names(annotations, predictions, vocab: VocabularySplit):
    objects = set(vocab.all_objects())
    relations = set(vocab.all_relations())
    for ann in annotations:
        for tid, name in ann.categories.items():
            if name not in objects:
                raise ConfigError(
                    f"annotation {ann.video_id} track {tid} has category "
                    f"{name!r} outside the vocabulary")
        for r in ann.relations:
            if r.predicate not in relations:
                raise ConfigError(
                    f"annotation {ann.video_id} uses unknown predicate "
                    f"{r.predicate!r}")
    for pred in predictions.values():
        for st in pred.tracks.values():
            if st.label not in objects:
                raise ConfigError(
                    f"prediction {pred.video_id} track {st.tid} labeled "
                    f"{st.label!r} outside the vocabulary")
        for r in pred.relations:
            if r.predicate not in relations:
                raise ConfigError(
                    f"prediction {pred.video_id} uses unknown predicate "
                    f"{r.predicate!r}")


def _gt_triplets(ann: VideoAnnotation, novel_only: bool,
                 vocab: VocabularySplit):
    out = []
    for r in ann.relations:
        if novel_only and not vocab.is_novel_relation(r.predicate):
            continue
        labels = (ann.categories[r.subject_tid], r.predicate,
                  ann.categories[r.object_tid])
        out.append((labels,
                    ann.tracks[r.subject_tid].slice(r.begin, r.end - 1),
                    ann.tracks[r.object_tid].slice(r.begin, r.end - 1)))
    return out


def _pred_triplets(pred: Optional[VideoPrediction], novel_only: bool,
                   vocab: VocabularySplit) -> List[Triplet]:
    if pred is None:
        return []
    out = []
    for r in pred.relations:
        if novel_only and not vocab.is_novel_relation(r.predicate):
            continue
        sub = pred.tracks[r.subject_tid]
        obj = pred.tracks[r.object_tid]
        out.append(Triplet(
            confidence=r.score * sub.score * obj.score,
            labels=(sub.label, r.predicate, obj.label),
            subject_part=sub.track.slice(r.begin, r.end - 1),
            object_part=obj.track.slice(r.begin, r.end - 1)))
    out.sort(key=lambda t: -t.confidence)
    return out


def _trajectory_ap(annotations, predictions, novel_only, vocab, thr):
    """Per-category trajectory AP pooled over the whole video set."""
    cat_gts = defaultdict(list)
    for ann in annotations:
        for tid, tr in ann.tracks.items():
            name = ann.categories[tid]
            if novel_only and not vocab.is_novel_object(name):
                continue
            cat_gts[name].append((ann.video_id, tr))
    cat_preds = defaultdict(list)
    for pred in predictions.values():
        for st in pred.tracks.values():
            if novel_only and not vocab.is_novel_object(st.label):
                continue
            cat_preds[st.label].append((st.score, pred.video_id, st.track))
    table: Dict[str, Optional[float]] = {}
    for name in vocab.all_objects():
        gts = cat_gts.get(name, [])
        if not gts:
            table[name] = None
            continue
        ranked = sorted(cat_preds.get(name, []), key=lambda p: -p[0])
        taken = [False] * len(gts)
        flags = []
        for _score, vid, seq in ranked:
            best = -1
            best_v = -1.0
            for gi, (g_vid, g_seq) in enumerate(gts):
                if taken[gi] or g_vid != vid:
                    continue
                v = viou(seq, g_seq)
                if v >= thr and v > best_v + _TIE:
                    best_v = v
                    best = gi
            flags.append(best >= 0)
            if best >= 0:
                taken[best] = True
        table[name] = average_precision(flags, len(gts))
    return table


def evaluate(spec: TaskSpec, predictions: Mapping[str, VideoPrediction],
             annotations: Sequence[VideoAnnotation],
             vocab: VocabularySplit) -> EvalReport:
    """Score predictions against annotations for one task/split cell.

    Prediction entries for videos absent from `annotations` are ignored.
    On the novel split, annotated relations are restricted to novel
    predicates and base-predicate predictions are dropped; the trajectory
    side keeps only novel object categories on both sides.
    """
    _validate_names(annotations, predictions, vocab)
    novel = spec.split == "novel"

    video_aps: List[float] = []
    recall_fracs = {k: [] for k in spec.k_values}
    pred_pool = defaultdict(list)
    gt_counts = defaultdict(int)
    for ann in annotations:
        gts = _gt_triplets(ann, novel, vocab)
        preds = _pred_triplets(predictions.get(ann.video_id), novel, vocab)
        flags = match_triplets(preds, gts, spec.viou_threshold)
        for trip, hit in zip(preds, flags):
            pred_pool[trip.labels[1]].append((trip.confidence, hit))
        for labels, _s, _o in gts:
            gt_counts[labels[1]] += 1
        if gts:
            video_aps.append(average_precision(flags, len(gts)))
            for k in spec.k_values:
                recall_fracs[k].append(sum(flags[:k]) / len(gts))

    predicate_ap: Dict[str, Optional[float]] = {}
    for name in vocab.all_relations():
        n_gt = gt_counts.get(name, 0)
        if n_gt == 0:
            predicate_ap[name] = None
            continue
        ranked = sorted(pred_pool.get(name, []), key=lambda p: -p[0])
        predicate_ap[name] = average_precision([h for _c, h in ranked], n_gt)

    object_ap = _trajectory_ap(annotations, predictions, novel, vocab,
                               spec.viou_threshold)
    defined = [v for v in object_ap.values() if v is not None]

    return EvalReport(
        task=spec.task,
        split=spec.split,
        map_objects=float(np.mean(defined)) if defined else 0.0,
        map_relations=float(np.mean(video_aps)) if video_aps else 0.0,
        recalls={k: float(np.mean(v)) if v else 0.0
                 for k, v in recall_fracs.items()},
        object_ap=object_ap,
        predicate_ap=predicate_ap,
    )


def save_predictions(predictions: Mapping[str, VideoPrediction], path):
    """Write predictions as JSON lines: track records then relations."""
    path = Path(path)
    with path.open("w") as fh:
        for vid in sorted(predictions):
            pred = predictions[vid]
            for tid in sorted(pred.tracks):
                st = pred.tracks[tid]
                fh.write(json.dumps({
                    "kind": "track", "video_id": pred.video_id,
                    "tid": st.tid, "label": st.label, "score": st.score,
                    "start": st.track.start,
                    "boxes": st.track.boxes.tolist(),
                }) + "\n")
            for r in pred.relations:
                fh.write(json.dumps({
                    "kind": "relation", "video_id": pred.video_id,
                    "subject_tid": r.subject_tid, "predicate": r.predicate,
                    "object_tid": r.object_tid, "begin": r.begin,
                    "end": r.end, "score": r.score,
                }) + "\n")


def load_predictions(path) -> Dict[str, VideoPrediction]:
    path = Path(path)
    tracks: Dict[str, Dict[int, ScoredTrack]] = defaultdict(dict)
    relations: Dict[str, List[ScoredRelation]] = defaultdict(list)
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        record = json.loads(line)
        kind = record.get("kind")
        vid = record["video_id"]
        if kind == "track":
            boxes = np.asarray(record["boxes"], dtype=np.float64)
            seq = TimedBoxSequence(record["start"],
                                   record["start"] + len(boxes) - 1, boxes)
            tracks[vid][record["tid"]] = ScoredTrack(
                record["tid"], record["label"], record["score"], seq)
        elif kind == "relation":
            relations[vid].append(ScoredRelation(
                record["subject_tid"], record["predicate"],
                record["object_tid"], record["begin"], record["end"],
                record["score"]))
        else:
            raise ValueError(f"{path}:{line_no}: unknown record kind {kind!r}")
    return {vid: VideoPrediction(vid, tracks[vid], relations.get(vid, []))
            for vid in tracks}
