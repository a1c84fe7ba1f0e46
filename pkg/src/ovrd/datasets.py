"""Vocabulary splits, video annotations, and the synthetic clip generator.

Annotations follow the interchange schema of public video relation
benchmarks: per-frame trajectory boxes in pixels plus relation instances
with inclusive begin and exclusive end frame ids. Internally boxes are
normalized center-size arrays (see geometry.Box) and trajectories are
gap-free TimedBoxSequence spans with inclusive ends.

The generator composes each clip from motion archetypes (static layouts,
drifts, approaches, retreats, and chases) and then labels relations purely
from the realized geometry, so ground truth never depends on which
archetype was intended. Category appearance is tied to names through
``encoders.identity_color``, which is what lets a frozen mock encoder
recognize categories it never trained on.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .encoders import identity_color
from .geometry import TimedBoxSequence

# labeling thresholds, shared by every caller so ground truth is reproducible
_STATIC_MARGIN = 0.08
_STATIC_FRAME_FRACTION = 0.8
_AREA_RATIO = 1.5
_DIST_MARGIN = 0.08
_MIN_SPEED = 0.004
_HEADING_COS = 0.7
_SAME_DIR_COS = 0.7
_TRAIL_COS = 0.3
_GAP_DRIFT_FRACTION = 0.3
_GAP_DRIFT_FLOOR = 0.05


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class VocabularySplit:
    """Category names partitioned into training (base) and held-out (novel)."""

    base_objects: Tuple[str, ...]
    novel_objects: Tuple[str, ...]
    base_relations: Tuple[str, ...]
    novel_relations: Tuple[str, ...]
    static_relations: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "base_objects", tuple(self.base_objects))
        object.__setattr__(self, "novel_objects", tuple(self.novel_objects))
        object.__setattr__(self, "base_relations", tuple(self.base_relations))
        object.__setattr__(self, "novel_relations", tuple(self.novel_relations))
        object.__setattr__(self, "static_relations", tuple(self.static_relations))
        if set(self.base_objects) & set(self.novel_objects):
            raise ValueError("base and novel object names overlap")
        if set(self.base_relations) & set(self.novel_relations):
            raise ValueError("base and novel relation names overlap")

    def all_objects(self) -> Tuple[str, ...]:
        return self.base_objects + self.novel_objects

    def all_relations(self) -> Tuple[str, ...]:
        return self.base_relations + self.novel_relations

    def is_novel_object(self, name: str) -> bool:
        return name in self.novel_objects

    def is_novel_relation(self, name: str) -> bool:
        return name in self.novel_relations


def vocabulary_to_dict(vocab: VocabularySplit) -> Dict[str, List[str]]:
    return {
        "base_objects": list(vocab.base_objects),
        "novel_objects": list(vocab.novel_objects),
        "base_relations": list(vocab.base_relations),
        "novel_relations": list(vocab.novel_relations),
        "static_relations": list(vocab.static_relations),
    }


def vocabulary_from_dict(data: Dict[str, Sequence[str]]) -> VocabularySplit:
    """Rebuild a split from its JSON form, naming whatever field is absent."""
    try:
        return VocabularySplit(
            base_objects=tuple(data["base_objects"]),
            novel_objects=tuple(data["novel_objects"]),
            base_relations=tuple(data["base_relations"]),
            novel_relations=tuple(data["novel_relations"]),
            static_relations=tuple(data.get("static_relations", ())),
        )
    except KeyError as missing:
        raise DatasetError(f"vocabulary entry is missing field {missing}")


def check_color_separation(names: Sequence[str], min_dist: float = 0.35) -> None:
    """Reject vocabularies whose identity colors sit too close to tell apart."""
    cols = {n: np.asarray(identity_color(n), dtype=float) / 255.0 for n in names}
    items = list(cols.items())
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            d = float(np.linalg.norm(items[i][1] - items[j][1]))
            if d < min_dist:
                raise ValueError(
                    f"categories {items[i][0]!r} and {items[j][0]!r} have "
                    f"near-identical identity colors (distance {d:.3f})")


def golden_vocabulary() -> VocabularySplit:
    """The stock split used by the synthetic benchmark.

    Every novel relation has a base partner on the same semantic axis
    (toward/away, leads/follows), which is the structure zero-shot relation
    transfer relies on.
    """
    vocab = VocabularySplit(
        base_objects=("cube", "vane", "disc", "spool"),
        novel_objects=("star", "orb"),
        base_relations=("left of", "above", "larger than", "moves toward", "leads"),
        novel_relations=("moves away", "follows"),
        static_relations=("left of", "above", "larger than"),
    )
    check_color_separation(vocab.all_objects(), 0.35)
    return vocab


@dataclass(frozen=True)
class RelationInstance:
    """One relation triplet over [begin, end) frame ids."""

    subject_tid: int
    predicate: str
    object_tid: int
    begin: int
    end: int


@dataclass
class VideoAnnotation:
    video_id: str
    width: int
    height: int
    frame_count: int
    fps: float
    categories: Dict[int, str]
    tracks: Dict[int, TimedBoxSequence]
    relations: List[RelationInstance]
    scene: Optional[dict] = None

    def __post_init__(self):
        if set(self.categories) != set(self.tracks):
            raise ValueError("categories and tracks must cover the same tids")
        for tid, tr in self.tracks.items():
            if tr.start < 0 or tr.end >= self.frame_count:
                raise ValueError(
                    f"track {tid} spans [{tr.start}, {tr.end}] outside "
                    f"0..{self.frame_count - 1}")
        for r in self.relations:
            if r.subject_tid not in self.tracks or r.object_tid not in self.tracks:
                raise ValueError(f"relation references unknown tid: {r}")
            if not 0 <= r.begin < r.end <= self.frame_count:
                raise ValueError(f"relation span invalid for {self.frame_count} frames: {r}")
            for tid in (r.subject_tid, r.object_tid):
                tr = self.tracks[tid]
                if r.begin < tr.start or r.end - 1 > tr.end:
                    raise ValueError(
                        f"relation span [{r.begin}, {r.end}) leaves track {tid} "
                        f"coverage [{tr.start}, {tr.end}]")


# --------------------------------------------------------------------------
# serialization


def save_annotation(ann: VideoAnnotation, path: Union[str, Path]) -> None:
    frames: List[List[dict]] = [[] for _ in range(ann.frame_count)]
    for tid in sorted(ann.tracks):
        tr = ann.tracks[tid]
        for t in range(tr.start, tr.end + 1):
            cx, cy, w, h = tr.boxes[t - tr.start]
            frames[t].append({
                "tid": tid,
                "bbox": {
                    "xmin": (cx - w / 2) * ann.width,
                    "ymin": (cy - h / 2) * ann.height,
                    "xmax": (cx + w / 2) * ann.width,
                    "ymax": (cy + h / 2) * ann.height,
                },
            })
    payload = {
        "video_id": ann.video_id,
        "width": ann.width,
        "height": ann.height,
        "frame_count": ann.frame_count,
        "fps": ann.fps,
        "subject/objects": [
            {"tid": tid, "category": ann.categories[tid]} for tid in sorted(ann.categories)
        ],
        "trajectories": frames,
        "relation_instances": [
            {
                "subject_tid": r.subject_tid,
                "predicate": r.predicate,
                "object_tid": r.object_tid,
                "begin_fid": r.begin,
                "end_fid": r.end,
            }
            for r in ann.relations
        ],
    }
    if ann.scene is not None:
        payload["synthetic"] = ann.scene
    Path(path).write_text(json.dumps(payload))


def load_annotation(path: Union[str, Path]) -> VideoAnnotation:
    raw = json.loads(Path(path).read_text())
    width = int(raw["width"])
    height = int(raw["height"])
    frame_count = int(raw["frame_count"])
    categories = {int(e["tid"]): e["category"] for e in raw["subject/objects"]}
    per_tid: Dict[int, Dict[int, np.ndarray]] = {}
    traj = raw["trajectories"]
    if len(traj) != frame_count:
        raise DatasetError(
            f"{path}: trajectory list has {len(traj)} frames, expected {frame_count}")
    for t, entries in enumerate(traj):
        for e in entries:
            b = e["bbox"]
            cx = (b["xmin"] + b["xmax"]) / 2.0 / width
            cy = (b["ymin"] + b["ymax"]) / 2.0 / height
            w = (b["xmax"] - b["xmin"]) / width
            h = (b["ymax"] - b["ymin"]) / height
            per_tid.setdefault(int(e["tid"]), {})[t] = np.array([cx, cy, w, h])
    tracks: Dict[int, TimedBoxSequence] = {}
    for tid, frames in per_tid.items():
        ts = sorted(frames)
        if ts != list(range(ts[0], ts[-1] + 1)):
            raise DatasetError(f"{path}: track {tid} has gaps in frame coverage")
        tracks[tid] = TimedBoxSequence(ts[0], ts[-1], np.stack([frames[t] for t in ts]))
    relations = [
        RelationInstance(
            int(r["subject_tid"]), r["predicate"], int(r["object_tid"]),
            int(r["begin_fid"]), int(r["end_fid"]))
        for r in raw.get("relation_instances", [])
    ]
    return VideoAnnotation(
        video_id=raw["video_id"],
        width=width,
        height=height,
        frame_count=frame_count,
        fps=float(raw.get("fps", 0.0)),
        categories=categories,
        tracks=tracks,
        relations=relations,
        scene=raw.get("synthetic"),
    )


def list_videos(directory: Union[str, Path]) -> List[Path]:
    return sorted(Path(directory).glob("*.json"))


# --------------------------------------------------------------------------
# relation labeling from realized geometry


def _mean_cos(a: np.ndarray, b: np.ndarray) -> float:
    """Average cosine between row-paired vectors, skipping near-zero rows."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 1e-9) & (nb > 1e-9)
    if not ok.any():
        return 0.0
    return float(((a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])).mean())


def label_relations(centers: np.ndarray, sizes: np.ndarray) -> List[RelationInstance]:
    """Name every relation the realized tracks exhibit.

    centers: [N, T, 2] normalized positions. sizes: [N] scalar extents or
    [N, 2] width-height pairs. Returns instances spanning the whole clip,
    with track indices as tids. A pair may carry several predicates.
    """
    centers = np.asarray(centers, dtype=float)
    if centers.ndim != 3 or centers.shape[2] != 2:
        raise ValueError(f"centers must be [N, T, 2], got {centers.shape}")
    n, t = centers.shape[:2]
    sizes = np.asarray(sizes, dtype=float)
    areas = sizes[:, 0] * sizes[:, 1] if sizes.ndim == 2 else sizes * sizes
    vel = centers[:, 1:] - centers[:, :-1]
    speed = np.linalg.norm(vel, axis=2).mean(axis=1)
    out: List[RelationInstance] = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            dx = centers[j, :, 0] - centers[i, :, 0]
            dy = centers[j, :, 1] - centers[i, :, 1]
            if dx.mean() > _STATIC_MARGIN and (dx > 0).mean() >= _STATIC_FRAME_FRACTION:
                out.append(RelationInstance(i, "left of", j, 0, t))
            if dy.mean() > _STATIC_MARGIN and (dy > 0).mean() >= _STATIC_FRAME_FRACTION:
                out.append(RelationInstance(i, "above", j, 0, t))
            if areas[i] > _AREA_RATIO * areas[j]:
                out.append(RelationInstance(i, "larger than", j, 0, t))

            offset = centers[j, :-1] - centers[i, :-1]
            dist = np.linalg.norm(centers[j] - centers[i], axis=1)
            d_change = dist[-1] - dist[0]
            heading = _mean_cos(vel[i], offset)
            if speed[i] > _MIN_SPEED:
                if d_change < -_DIST_MARGIN and heading > _HEADING_COS:
                    out.append(RelationInstance(i, "moves toward", j, 0, t))
                if d_change > _DIST_MARGIN and -heading > _HEADING_COS:
                    out.append(RelationInstance(i, "moves away", j, 0, t))
                gap_tolerance = max(_GAP_DRIFT_FRACTION * dist.mean(), _GAP_DRIFT_FLOOR)
                if (speed[j] > _MIN_SPEED
                        and _mean_cos(vel[i], vel[j]) > _SAME_DIR_COS
                        and heading > _TRAIL_COS
                        and abs(d_change) < gap_tolerance):
                    out.append(RelationInstance(i, "follows", j, 0, t))
                    out.append(RelationInstance(j, "leads", i, 0, t))
    return out


# --------------------------------------------------------------------------
# synthetic scenes


def _rng_for(label: str) -> np.random.Generator:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))


def _pixel_rect(cx: float, cy: float, w: float, h: float,
                width: int, height: int) -> Tuple[int, int, int, int]:
    x1 = int(round((cx - w / 2) * width))
    x2 = int(round((cx + w / 2) * width))
    y1 = int(round((cy - h / 2) * height))
    y2 = int(round((cy + h / 2) * height))
    x1, y1 = max(x1, 0), max(y1, 0)
    x2, y2 = min(x2, width), min(y2, height)
    if x2 <= x1:
        x2 = min(x1 + 1, width)
        x1 = x2 - 1
    if y2 <= y1:
        y2 = min(y1 + 1, height)
        y1 = y2 - 1
    return x1, y1, x2, y2


def _linear(p0: np.ndarray, p1: np.ndarray, t: int) -> np.ndarray:
    steps = np.linspace(0.0, 1.0, t)[:, None]
    return p0[None, :] * (1 - steps) + p1[None, :] * steps


def _sample_point(rng: np.random.Generator, margin: float) -> np.ndarray:
    return rng.uniform(margin, 1.0 - margin, 2)


def _scene_paths(rng: np.random.Generator, n_objects: int, sizes: np.ndarray,
                 t: int, archetype: str, min_sep: float) -> Optional[np.ndarray]:
    """One attempt at a set of in-bounds, well-separated center tracks."""
    margins = sizes / 2 + 0.02
    centers = np.zeros((n_objects, t, 2))

    def in_bounds(track: np.ndarray, margin: float) -> bool:
        return bool((track > margin - 1e-9).all() and (track < 1 - margin + 1e-9).all())

    if archetype == "chase" and n_objects >= 2:
        p0 = _sample_point(rng, margins[1] + 0.05)
        direction = rng.normal(0, 1, 2)
        direction /= np.linalg.norm(direction) + 1e-9
        length = rng.uniform(0.35, 0.5)
        p1 = p0 + direction * length
        leader = _linear(p0, p1, t)
        gap = max(0.75 * (sizes[0] + sizes[1]) / 2 + 0.04, 0.16)
        trailer = leader - direction[None, :] * gap
        if not (in_bounds(leader, margins[1]) and in_bounds(trailer, margins[0])):
            return None
        centers[0] = trailer
        centers[1] = leader
        fixed = 2
    elif archetype in ("approach", "retreat") and n_objects >= 2:
        target = _sample_point(rng, margins[1] + 0.02)
        away = rng.normal(0, 1, 2)
        away /= np.linalg.norm(away) + 1e-9
        near_d = max(0.6 * (sizes[0] + sizes[1]) / 2 + 0.04, 0.14)
        far_d = near_d + rng.uniform(0.3, 0.45)
        near = target + away * near_d
        far = target + away * far_d
        mover = _linear(far, near, t) if archetype == "approach" else _linear(near, far, t)
        if not (in_bounds(mover, margins[0]) and in_bounds(target[None, :], margins[1])):
            return None
        centers[0] = mover
        centers[1] = target[None, :].repeat(t, axis=0)
        fixed = 2
    else:
        fixed = 0

    for k in range(fixed, n_objects):
        if rng.uniform() < 0.5:
            p = _sample_point(rng, margins[k])
            centers[k] = p[None, :].repeat(t, axis=0)
        else:
            p0 = _sample_point(rng, margins[k])
            p1 = _sample_point(rng, margins[k])
            centers[k] = _linear(p0, p1, t)

    for i in range(n_objects):
        for j in range(i + 1, n_objects):
            if archetype == "chase" and {i, j} == {0, 1}:
                continue
            need = max(min_sep, 0.6 * (sizes[i] + sizes[j]) / 2 + 0.03)
            d = np.linalg.norm(centers[i] - centers[j], axis=1)
            if d.min() < need:
                return None
    return centers


_ARCHETYPES = ("static", "approach", "retreat", "chase")


def generate_video(video_id: str, seed: int, cfg, vocab: VocabularySplit,
                   novel_allowed: bool = False,
                   archetype: Optional[str] = None) -> VideoAnnotation:
    width = cfg["synth.width"]
    height = cfg["synth.height"]
    t = cfg["synth.n_frames"]
    for attempt in range(300):
        rng = _rng_for(f"{video_id}:{seed}:{attempt}")
        n_objects = int(rng.integers(cfg["synth.min_objects"], cfg["synth.max_objects"] + 1))
        pool = list(vocab.base_objects)
        names = list(rng.choice(pool, size=min(n_objects, len(pool)), replace=False))
        if novel_allowed:
            novel = list(rng.choice(list(vocab.novel_objects),
                                    size=min(1, len(vocab.novel_objects)), replace=False))
            names = novel + names[:n_objects - len(novel)]
        n_objects = len(names)
        arch = archetype or str(rng.choice(_ARCHETYPES))
        sizes = rng.uniform(cfg["synth.min_size"], cfg["synth.max_size"], n_objects)
        if arch == "chase":
            sizes[:2] = np.minimum(sizes[:2], 0.22)
        centers = _scene_paths(rng, n_objects, sizes, t, arch, cfg["synth.min_separation"])
        if centers is None:
            continue
        shapes = [str(rng.choice(["square", "disc"])) for _ in range(n_objects)]

        tracks: Dict[int, TimedBoxSequence] = {}
        realized = np.zeros_like(centers)
        for k in range(n_objects):
            boxes = np.zeros((t, 4))
            for ti in range(t):
                x1, y1, x2, y2 = _pixel_rect(centers[k, ti, 0], centers[k, ti, 1],
                                             sizes[k], sizes[k], width, height)
                boxes[ti] = [(x1 + x2) / 2 / width, (y1 + y2) / 2 / height,
                             (x2 - x1) / width, (y2 - y1) / height]
            tracks[k] = TimedBoxSequence(0, t - 1, boxes)
            realized[k] = boxes[:, :2]

        relations = label_relations(realized, sizes)
        if not relations:
            continue
        scene = {
            "background_seed": int(rng.integers(0, 2 ** 31)),
            "noise_level": 18,
            "objects": [
                {
                    "tid": k,
                    "shape": shapes[k],
                    "color": list(identity_color(names[k])),
                    "size": float(sizes[k]),
                    "centers": [[float(x), float(y)] for x, y in centers[k]],
                }
                for k in range(n_objects)
            ],
        }
        return VideoAnnotation(
            video_id=video_id,
            width=width,
            height=height,
            frame_count=t,
            fps=5.0,
            categories={k: names[k] for k in range(n_objects)},
            tracks=tracks,
            relations=relations,
            scene=scene,
        )
    raise DatasetError(f"could not realize a valid scene for {video_id} (seed {seed})")


def render_frame(ann: VideoAnnotation, t: int) -> np.ndarray:
    """Rasterize one frame of a synthetic clip from its stored scene."""
    if ann.scene is None:
        raise DatasetError(f"video {ann.video_id} carries no synthetic scene payload")
    if not 0 <= t < ann.frame_count:
        raise ValueError(f"frame {t} outside 0..{ann.frame_count - 1}")
    rng = _rng_for(f"bg:{ann.scene['background_seed']}:{t}")
    level = int(ann.scene.get("noise_level", 18))
    img = rng.integers(0, level, (ann.height, ann.width, 3)).astype(np.uint8)
    for obj in sorted(ann.scene["objects"], key=lambda o: o["tid"]):
        cx, cy = obj["centers"][t]
        size = obj["size"]
        x1, y1, x2, y2 = _pixel_rect(cx, cy, size, size, ann.width, ann.height)
        color = np.asarray(obj["color"], dtype=np.uint8)
        if obj["shape"] == "square":
            img[y1:y2, x1:x2] = color
        else:
            ys = np.arange(y1, y2) + 0.5
            xs = np.arange(x1, x2) + 0.5
            ry = max((y2 - y1) / 2.0, 0.5)
            rx = max((x2 - x1) / 2.0, 0.5)
            mcy = (y1 + y2) / 2.0
            mcx = (x1 + x2) / 2.0
            mask = (((ys[:, None] - mcy) / ry) ** 2 + ((xs[None, :] - mcx) / rx) ** 2) <= 1.0
            region = img[y1:y2, x1:x2]
            region[mask] = color
    return img


def generate_dataset(out_dir: Union[str, Path], cfg, vocab: VocabularySplit,
                     n_train: int = 40, n_val: int = 10, seed: int = 0) -> Dict[str, List[Path]]:
    """Write a train/val split of synthetic clips as annotation files.

    Training clips use base categories only and their annotations keep only
    base-relation instances; validation clips mix in novel objects and keep
    every realized relation. The scene geometry is labeled the same way in
    both splits, held-out names are simply dropped from training labels.
    """
    out_dir = Path(out_dir)
    base_rel = set(vocab.base_relations)
    written: Dict[str, List[Path]] = {"train": [], "val": []}
    for split, count, novel in (("train", n_train, False), ("val", n_val, True)):
        directory = out_dir / split
        os.makedirs(directory, exist_ok=True)
        # cycle archetypes so every split exercises static and dynamic scenes;
        # retreat and chase clips are what realize the held-out relations
        cycle = ("approach", "chase", "retreat", "static") if split == "train" else (
            "retreat", "chase", "approach", "chase")
        for k in range(count):
            vid = f"synth-{split}-{k:03d}"
            ann = generate_video(vid, seed * 100003 + k, cfg, vocab,
                                 novel_allowed=novel, archetype=cycle[k % len(cycle)])
            if split == "train":
                kept = [r for r in ann.relations if r.predicate in base_rel]
                if not kept:
                    ann = generate_video(vid, seed * 100003 + k + 7919, cfg, vocab,
                                         novel_allowed=False, archetype="approach")
                    kept = [r for r in ann.relations if r.predicate in base_rel]
                ann.relations = kept
            path = directory / f"{vid}.json"
            save_annotation(ann, path)
            written[split].append(path)
    return written


# --------------------------------------------------------------------------
# raster corpus on disk


def _write_png(image: np.ndarray, path: Union[str, Path]) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(image)).save(str(path), format="PNG")


def load_frame_images(directory: Union[str, Path]) -> List[np.ndarray]:
    """Read the PNG frames of one clip, in filename order."""
    from PIL import Image

    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise DatasetError(f"no frame images under {directory}")
    return [np.asarray(Image.open(p).convert("RGB")) for p in paths]


def synth_generate(out_dir: Union[str, Path], cfg, vocab: VocabularySplit,
                   n_videos: int, seed: int = 0, novel_allowed: bool = True
                   ) -> Tuple[dict, List[VideoAnnotation]]:
    """Write a flat synthetic corpus with rasters and a content manifest.

    Layout under out_dir: ``annotations/<vid>.json`` per clip,
    ``frames/<vid>/<t>.png`` lossless rasters, and ``manifest.json``
    recording the vocabulary plus per-clip digests. Digests cover the
    annotation bytes and the decoded pixel content, so two runs with the
    same inputs produce byte-identical manifests regardless of how the
    image encoder arranges its output.
    """
    if n_videos < 1:
        raise DatasetError("n_videos must be at least 1")
    if len(vocab.base_objects) < 2 or not vocab.novel_objects:
        raise DatasetError(
            "vocabulary too small: need at least 2 base and 1 novel object")
    if len(vocab.base_relations) < 2 or not vocab.novel_relations:
        raise DatasetError(
            "vocabulary too small: need at least 2 base and 1 novel relation")
    out_dir = Path(out_dir)
    ann_dir = out_dir / "annotations"
    os.makedirs(ann_dir, exist_ok=True)
    entries = []
    anns = []
    for k in range(n_videos):
        vid = f"synth-{k:03d}"
        ann = generate_video(vid, seed * 100003 + k, cfg, vocab,
                             novel_allowed=novel_allowed)
        ann_path = ann_dir / f"{vid}.json"
        save_annotation(ann, ann_path)
        frame_dir = out_dir / "frames" / vid
        os.makedirs(frame_dir, exist_ok=True)
        pixels = hashlib.sha256()
        frame_files = []
        for t in range(ann.frame_count):
            image = render_frame(ann, t)
            name = f"{t:05d}.png"
            _write_png(image, frame_dir / name)
            pixels.update(image.tobytes())
            frame_files.append(f"frames/{vid}/{name}")
        entries.append({
            "video_id": vid,
            "annotation": f"annotations/{vid}.json",
            "annotation_sha256": hashlib.sha256(
                ann_path.read_bytes()).hexdigest(),
            "frames": frame_files,
            "pixels_sha256": pixels.hexdigest(),
        })
        anns.append(ann)
    manifest = {
        "seed": int(seed),
        "frame_size": [int(cfg["synth.width"]), int(cfg["synth.height"])],
        "vocabulary": vocabulary_to_dict(vocab),
        "videos": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest, anns
