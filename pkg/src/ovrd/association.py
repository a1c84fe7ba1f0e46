"""Linking frame detections into trajectories.

A greedy frame-by-frame tracker: each new frame's detections are matched
to live trajectories by minimum-cost bipartite assignment, where cost
mixes appearance (cosine distance between embeddings) and geometry (IoU
against a constant-velocity box prediction). Matches above the gating
cost are refused. Short gaps are bridged by linear box interpolation;
interpolated frames are flagged and never contribute to score averaging.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .geometry import Box, TimedBoxSequence, iou


@dataclass
class AssociationParams:
    w_feature: float = 0.7
    w_spatial: float = 0.3
    gate: float = 0.7
    max_age: int = 3
    min_len: int = 2
    min_overlap: int = 2

    @staticmethod
    def from_config(cfg) -> "AssociationParams":
        return AssociationParams(
            w_feature=cfg["assoc.w_feature"],
            w_spatial=cfg["assoc.w_spatial"],
            gate=cfg["assoc.gate"],
            max_age=cfg["assoc.max_age"],
            min_len=cfg["assoc.min_len"],
            min_overlap=cfg["assoc.min_overlap"],
        )


@dataclass
class Detection:
    """One filtered detection in one frame."""

    box: np.ndarray
    embedding: torch.Tensor
    scores: torch.Tensor


@dataclass
class Trajectory:
    id: int
    span: TimedBoxSequence
    embeddings: torch.Tensor
    frame_scores: torch.Tensor
    interpolated: np.ndarray

    def __post_init__(self):
        n = len(self.span)
        if self.embeddings.shape[0] != n or self.frame_scores.shape[0] != n \
                or self.interpolated.shape[0] != n:
            raise ValueError("per-frame field lengths disagree with the span")

    def aggregate(self) -> Tuple[torch.Tensor, int]:
        return aggregate(self.frame_scores, self.interpolated)


@dataclass
class TrajectoryMemory:
    video_id: str
    trajectories: List[Trajectory]

    def __post_init__(self):
        ids = [t.id for t in self.trajectories]
        if len(ids) != len(set(ids)):
            raise ValueError("trajectory ids must be unique")


def aggregate(frame_scores: torch.Tensor,
              interpolated: Optional[np.ndarray] = None) -> Tuple[torch.Tensor, int]:
    """Mean score vector over real (non-interpolated) frames, plus its argmax.

    Ties break to the lowest category index.
    """
    if frame_scores.shape[0] == 0:
        raise ValueError("cannot aggregate an empty trajectory")
    if interpolated is not None:
        real = torch.from_numpy(~np.asarray(interpolated))
        if not bool(real.any()):
            raise ValueError("trajectory has no real frames")
        frame_scores = frame_scores[real]
    vec = frame_scores.mean(dim=0)
    label = int(np.argmax(vec.detach().numpy()))
    return vec, label


class _Track:
    """Mutable build state for one trajectory during association."""

    def __init__(self, track_id: int, t: int, d: Detection):
        self.id = track_id
        self.frames: List[Tuple[int, np.ndarray, torch.Tensor, torch.Tensor, bool]] = [
            (t, np.asarray(d.box, dtype=float), d.embedding, d.scores, False)]
        self.misses = 0

    @property
    def last(self):
        return self.frames[-1]

    def real_frames(self):
        return [f for f in self.frames if not f[4]]

    def predicted_box(self, t: int) -> np.ndarray:
        reals = self.real_frames()
        last_t, last_box = reals[-1][0], reals[-1][1]
        if len(reals) < 2:
            return last_box.copy()
        prev_t, prev_box = reals[-2][0], reals[-2][1]
        vel = (last_box[:2] - prev_box[:2]) / max(last_t - prev_t, 1)
        out = last_box.copy()
        out[:2] = last_box[:2] + vel * (t - last_t)
        return out

    def extend(self, t: int, d: Detection) -> None:
        last_t, last_box = self.last[0], self.last[1]
        new_box = np.asarray(d.box, dtype=float)
        gap = t - last_t
        if gap > 1:
            left_emb, left_scores = self.last[2], self.last[3]
            for k in range(1, gap):
                u = k / gap
                box = last_box * (1 - u) + new_box * u
                near_right = (gap - k) < k
                emb = d.embedding if near_right else left_emb
                scores = d.scores if near_right else left_scores
                self.frames.append((last_t + k, box, emb, scores, True))
        self.frames.append((t, new_box, d.embedding, d.scores, False))
        self.misses = 0

    def build(self) -> Trajectory:
        ts = [f[0] for f in self.frames]
        return Trajectory(
            id=self.id,
            span=TimedBoxSequence(ts[0], ts[-1], np.stack([f[1] for f in self.frames])),
            embeddings=torch.stack([f[2] for f in self.frames]),
            frame_scores=torch.stack([f[3] for f in self.frames]),
            interpolated=np.array([f[4] for f in self.frames], dtype=bool),
        )


def _match_cost(track: _Track, t: int, d: Detection, params: AssociationParams) -> float:
    emb_prev = track.real_frames()[-1][2]
    sim = float(F.cosine_similarity(emb_prev, d.embedding, dim=0))
    pred = track.predicted_box(t)
    overlap = iou(Box(*pred), Box(*np.asarray(d.box, dtype=float)))
    return params.w_feature * (1.0 - sim) + params.w_spatial * (1.0 - overlap)


def associate(frames: Sequence[Sequence[Detection]],
              params: AssociationParams) -> List[Trajectory]:
    """Link per-frame detections into trajectories; see the module docstring."""
    active: List[_Track] = []
    finished: List[_Track] = []
    next_id = 0
    for t, dets in enumerate(frames):
        dets = list(dets)
        if active and dets:
            cost = np.zeros((len(active), len(dets)))
            for i, tr in enumerate(active):
                for j, d in enumerate(dets):
                    cost[i, j] = _match_cost(tr, t, d, params)
            rows, cols = linear_sum_assignment(cost)
            matched_tracks = set()
            matched_dets = set()
            for i, j in zip(rows, cols):
                if cost[i, j] <= params.gate:
                    active[i].extend(t, dets[j])
                    matched_tracks.add(i)
                    matched_dets.add(j)
        else:
            matched_tracks = set()
            matched_dets = set()
        for j, d in enumerate(dets):
            if j not in matched_dets:
                active.append(_Track(next_id, t, d))
                next_id += 1
        still_active = []
        for i, tr in enumerate(active):
            if tr.last[0] == t:
                still_active.append(tr)
            else:
                tr.misses += 1
                if tr.misses > params.max_age:
                    finished.append(tr)
                else:
                    still_active.append(tr)
        active = still_active
    finished.extend(active)
    out = []
    for tr in finished:
        if len(tr.real_frames()) >= params.min_len:
            out.append(tr.build())
    out.sort(key=lambda tr: tr.id)
    return out


def memory_pairs(memory: TrajectoryMemory, min_overlap: int
                 ) -> List[Tuple[Trajectory, Trajectory, Tuple[int, int]]]:
    """All ordered trajectory pairs overlapping in at least min_overlap frames.

    The returned span (start, end) is the inclusive intersection of the two
    trajectory spans.
    """
    out = []
    trajs = memory.trajectories
    for a in trajs:
        for b in trajs:
            if a.id == b.id:
                continue
            start = max(a.span.start, b.span.start)
            end = min(a.span.end, b.span.end)
            if end - start + 1 >= min_overlap:
                out.append((a, b, (start, end)))
    return out


def dump_trajectories(trajectories: Sequence[Trajectory],
                      class_names: Sequence[str],
                      path: Union[str, Path]) -> None:
    """Write one JSON record per trajectory, one per line."""
    with open(path, "w") as fh:
        for tr in trajectories:
            vec, label = tr.aggregate()
            rec = {
                "id": tr.id,
                "category": class_names[label],
                "score": float(vec[label]),
                "frames": [
                    {"t": tr.span.start + k, "box": [float(x) for x in tr.span.boxes[k]]}
                    for k in range(len(tr.span))
                ],
            }
            fh.write(json.dumps(rec) + "\n")
