"""Open-vocabulary relation scoring over trajectory pairs.

A pair is described by three roles: the subject crops, the object crops,
and the whole-frame context. Per frame, the three role features attend to
each other through spatial blocks; per role, frames then attend across
time through temporal blocks that share weights between roles. The pooled
result maps into the encoder's joint embedding space and is scored by
sigmoid cosine similarity against per-role prompted relation names, so
unseen relation names can be queried at test time. Two side heads keep
training honest: per-frame interaction probabilities flag frames where
the pair relates at all, and an object-consistency map checks that the
adapted features still recognize the underlying object categories.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .prompting import PromptTemplate, VisionPromptNet, build_prompt, conditional_tokens

ROLES = ("subject", "object", "context")

OBJECT_PROMPT_TEMPLATE = "a photo of [OBJ]"

_FULL_IMAGE_BOX = (0.5, 0.5, 1.0, 1.0)

# Per-frame box motion is a few hundredths of the image per frame. This
# factor brings it to the magnitude of the absolute coordinates so the
# shared positional map sees both at comparable scale.
_MOTION_SCALE = 16.0

# Box widths and heights vary over a much narrower range than centers.
# Upscaling them evens out the input variance so size comparisons train
# as readily as position comparisons.
_BOX_INPUT_SCALE = (1.0, 1.0, 3.0, 3.0)


@dataclass
class PairFeatures:
    """Aligned per-frame evidence for one trajectory pair.

    All sequences cover the same frames of the overlap span. Context rows
    hold the whole-frame feature; the context box is implicit (the full
    image). frame_indices records which video frames the rows came from,
    which keeps subsampled pairs traceable.
    """

    subject_features: torch.Tensor
    object_features: torch.Tensor
    context_features: torch.Tensor
    subject_boxes: torch.Tensor
    object_boxes: torch.Tensor
    subject_tid: int = -1
    object_tid: int = -1
    frame_indices: Optional[torch.Tensor] = None

    def __post_init__(self):
        t = self.subject_features.shape[0]
        if t < 1:
            raise ValueError("a pair needs at least one frame")
        seqs = (self.object_features, self.context_features,
                self.subject_boxes, self.object_boxes)
        if any(s.shape[0] != t for s in seqs):
            raise ValueError("pair sequences must cover the same frames")
        if self.subject_boxes.shape[-1] != 4 or self.object_boxes.shape[-1] != 4:
            raise ValueError("boxes must be (cx, cy, w, h) rows")
        if self.frame_indices is None:
            self.frame_indices = torch.arange(t)
        elif self.frame_indices.shape[0] != t:
            raise ValueError("frame_indices must match the span length")

    @property
    def length(self) -> int:
        return int(self.subject_features.shape[0])

    def subsample(self, max_span: int) -> "PairFeatures":
        """Uniformly thin long pairs to max_span frames, keeping endpoints."""
        t = self.length
        if t <= max_span:
            return self
        keep = torch.tensor(
            np.round(np.linspace(0, t - 1, max_span)).astype(np.int64))
        return PairFeatures(
            self.subject_features[keep], self.object_features[keep],
            self.context_features[keep], self.subject_boxes[keep],
            self.object_boxes[keep], self.subject_tid, self.object_tid,
            self.frame_indices[keep])

    def swapped(self) -> "PairFeatures":
        """The same pair with subject and object roles exchanged."""
        return PairFeatures(
            self.object_features, self.subject_features,
            self.context_features, self.object_boxes, self.subject_boxes,
            self.object_tid, self.subject_tid, self.frame_indices)


@dataclass
class RelationPrediction:
    """Scored relation categories plus per-frame interaction evidence."""

    subject_tid: int
    object_tid: int
    categories: Tuple[str, ...]
    relation_scores: torch.Tensor
    interaction_scores: torch.Tensor
    frame_indices: torch.Tensor

    def __post_init__(self):
        if len(self.categories) != self.relation_scores.shape[0]:
            raise ValueError("one relation score per category required")
        if self.interaction_scores.shape[0] != self.frame_indices.shape[0]:
            raise ValueError("one interaction score per covered frame required")
        scores = self.relation_scores.detach()
        lo = float(scores.min()) if len(self.categories) else 0.0
        hi = float(scores.max()) if len(self.categories) else 0.0
        if lo < 0.0 or hi > 1.0:
            raise ValueError("relation scores must lie in [0, 1]")

    @property
    def span(self) -> Tuple[int, int]:
        return int(self.frame_indices[0]), int(self.frame_indices[-1]) + 1


class RoleEmbeddings(nn.Module):
    """Learned additive context for the three pair roles.

    positional: a two-layer map of the normalized (cx, cy, w, h) box,
    shared by every role and frame, plus a separate two-layer map of the
    per-frame box change. The motion map hands the network box velocity
    directly, so dynamic relations do not have to be recovered by
    differencing inside the attention blocks; its output layer starts at
    zero so the motion pathway only contributes once training asks for
    it. role_tokens: one vector per role so subject and object stay
    distinguishable even with equal evidence. theta: one vector per
    position of the (possibly subsampled) span, shared across roles.
    """

    def __init__(self, width: int, max_span: int, n_roles: int = 3):
        super().__init__()
        if n_roles != 3:
            raise ValueError("pair encoding is defined for exactly three roles")
        self.box_map = nn.Sequential(
            nn.Linear(4, width), nn.ReLU(), nn.Linear(width, width))
        self.motion_map = nn.Sequential(
            nn.Linear(4, width), nn.ReLU(), nn.Linear(width, width))
        nn.init.zeros_(self.motion_map[2].weight)
        nn.init.zeros_(self.motion_map[2].bias)
        self.role_tokens = nn.Parameter(torch.randn(n_roles, width) * 0.02)
        self.theta = nn.Parameter(torch.randn(max_span, width) * 0.02)

    def positional(self, boxes: torch.Tensor,
                   motion: Optional[torch.Tensor] = None) -> torch.Tensor:
        out = self.box_map(boxes * boxes.new_tensor(_BOX_INPUT_SCALE))
        if motion is not None:
            out = out + self.motion_map(motion)
        return out


class _AttentionBlock(nn.Module):
    """Pre-norm block: self attention then feed forward."""

    def __init__(self, width: int, heads: int, ffn_dim: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm_ffn = nn.LayerNorm(width)
        self.ffn = nn.Sequential(
            nn.Linear(width, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm_attn(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ffn(self.norm_ffn(x))


class RelationClassifier(nn.Module):
    """Scores open-vocabulary relations for trajectory pairs.

    The frozen encoder supplies per-frame features and prompt text
    encoding; everything trainable lives in this module.
    """

    def __init__(self, encoder, width: int = 16, heads: int = 4,
                 ffn_dim: int = 16, n_spatial_blocks: int = 1,
                 n_temporal_blocks: int = 1, pool: str = "mean",
                 max_span: int = 64, n_continuous: int = 8,
                 n_conditional: int = 8, class_token_fraction: float = 0.75):
        super().__init__()
        if pool not in ("mean", "max", "last"):
            raise ValueError(f"unknown pooling {pool!r}")
        if max_span < 1:
            raise ValueError("max_span must be positive")
        self.encoder = encoder
        self.width = width
        self.pool = pool
        self.max_span = max_span
        feature_dim = encoder.spec.feature_dim
        token_dim = encoder.spec.token_dim

        self.in_proj = nn.Linear(feature_dim, width)
        self.roles = RoleEmbeddings(width, max_span)
        self.spatial_blocks = nn.ModuleList(
            _AttentionBlock(width, heads, ffn_dim) for _ in range(n_spatial_blocks))
        self.temporal_blocks = nn.ModuleList(
            _AttentionBlock(width, heads, ffn_dim) for _ in range(n_temporal_blocks))

        # pooled role features -> joint embedding space, one slot per role
        self.rel_map = nn.Sequential(
            nn.Linear(3 * width, 3 * width), nn.ReLU(),
            nn.Linear(3 * width, 3 * feature_dim))
        self.interaction_head = nn.Sequential(
            nn.Linear(3 * width, 3 * width), nn.ReLU(),
            nn.Linear(3 * width, 1))
        self.object_map = nn.Sequential(
            nn.Linear(width, width), nn.ReLU(),
            nn.Linear(width, feature_dim))

        self.templates = nn.ModuleDict({
            role: PromptTemplate(token_dim, n_continuous, n_conditional,
                                 target_set="relation", role=role,
                                 class_token_position=class_token_fraction)
            for role in ROLES})
        self.prompt_nets = nn.ModuleDict({
            role: VisionPromptNet(feature_dim, token_dim, n_conditional)
            for role in ROLES})

    # ------------------------------------------------------------ encoding

    def _role_inputs(self, pair: PairFeatures) -> torch.Tensor:
        feats = torch.stack([pair.subject_features, pair.object_features,
                             pair.context_features], dim=1)
        full = feats.new_tensor(_FULL_IMAGE_BOX).expand(pair.length, 4)
        boxes = torch.stack(
            [pair.subject_boxes, pair.object_boxes, full], dim=1)
        motion = torch.zeros_like(boxes)
        if pair.length > 1:
            gaps = pair.frame_indices.diff().clamp(min=1).to(feats.dtype)
            rate = (boxes[1:] - boxes[:-1]) / gaps[:, None, None]
            motion = torch.cat([rate[:1], rate]) * _MOTION_SCALE
        return (self.in_proj(feats) + self.roles.positional(boxes, motion)
                + self.roles.role_tokens)

    def _spatial_forward(self, x: torch.Tensor) -> torch.Tensor:
        lead = x.shape[:-2]
        h = x.reshape(-1, 3, x.shape[-1])
        for block in self.spatial_blocks:
            h = block(h)
        return h.reshape(*lead, 3, x.shape[-1])

    def spatial_encode(self, pair: PairFeatures) -> torch.Tensor:
        """Cross-role attention per frame; shape [span, 3, width]."""
        return self._spatial_forward(self._role_inputs(pair))

    def temporal_encode(self, v_dot: torch.Tensor,
                        frame_positions: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Cross-frame attention per role over [.., span, 3, width] inputs.

        frame_positions picks rows of theta; by default positions are the
        0-based offsets within the span, so a subsampled pair reuses the
        leading rows rather than absolute video frame numbers.
        """
        batched = v_dot.dim() == 4
        x = v_dot if batched else v_dot.unsqueeze(0)
        b, t = x.shape[0], x.shape[1]
        if frame_positions is None:
            if t > self.max_span:
                raise ValueError(
                    f"span of {t} exceeds the temporal capacity {self.max_span}; "
                    "subsample the pair first")
            positions = torch.arange(t, device=x.device)
        else:
            positions = frame_positions.long()
            if positions.shape[0] != t:
                raise ValueError("one position per frame required")
            if int(positions.min()) < 0 or int(positions.max()) >= self.max_span:
                raise ValueError(
                    f"positions must lie in [0, {self.max_span})")
        x = x + self.roles.theta[positions][None, :, None, :]
        x = x.permute(0, 2, 1, 3).reshape(b * 3, t, x.shape[-1])
        for block in self.temporal_blocks:
            x = block(x)
        x = x.reshape(b, 3, t, -1).permute(0, 2, 1, 3)
        return x if batched else x.squeeze(0)

    def pool_span(self, v_ddot: torch.Tensor) -> torch.Tensor:
        if self.pool == "mean":
            return v_ddot.mean(dim=-3)
        if self.pool == "max":
            return v_ddot.amax(dim=-3)
        return v_ddot[..., -1, :, :]

    def encode_pair(self, pair: PairFeatures) -> Tuple[torch.Tensor, torch.Tensor]:
        """Spatially then temporally encoded features for one prepared pair."""
        v_dot = self.spatial_encode(pair)
        return v_dot, self.temporal_encode(v_dot)

    # ------------------------------------------------------------ prompting

    def role_evidence(self, pair: PairFeatures) -> Dict[str, torch.Tensor]:
        """Span-mean raw features per role, used to condition the prompts."""
        return {"subject": pair.subject_features.mean(dim=0),
                "object": pair.object_features.mean(dim=0),
                "context": pair.context_features.mean(dim=0)}

    def relation_prompt(self, role: str, evidence: torch.Tensor,
                        name: str) -> List:
        zeta = conditional_tokens(self.prompt_nets[role], evidence)
        return build_prompt(self.templates[role], zeta, name)

    def relation_text_features(self, pair: PairFeatures,
                               names: Sequence[str]) -> torch.Tensor:
        """Concatenated per-role prompted text features, [len(names), 3 D]."""
        evidence = self.role_evidence(pair)
        rows = []
        for name in names:
            parts = [self.encoder.encode_text(
                self.relation_prompt(role, evidence[role], name))
                for role in ROLES]
            rows.append(torch.cat(parts))
        return torch.stack(rows)

    def handcrafted_text_features(self, names: Sequence[str]) -> torch.Tensor:
        """Plain-template text features used by the consistency check."""
        words = OBJECT_PROMPT_TEMPLATE.split()
        rows = []
        for name in names:
            tokens = [name if w == "[OBJ]" else w for w in words]
            rows.append(self.encoder.encode_text(tokens))
        return torch.stack(rows)

    # ------------------------------------------------------------ heads

    @staticmethod
    def cosine_scores(v: torch.Tensor, text_features: torch.Tensor) -> torch.Tensor:
        return F.cosine_similarity(v.unsqueeze(-2), text_features, dim=-1)

    @staticmethod
    def relation_scores_from(v_tilde: torch.Tensor,
                             text_features: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(
            RelationClassifier.cosine_scores(v_tilde, text_features))

    def pair_embedding(self, v_ddot: torch.Tensor) -> torch.Tensor:
        pooled = self.pool_span(v_ddot)
        return self.rel_map(pooled.reshape(*pooled.shape[:-2], -1))

    def score_relations(self, pair: PairFeatures,
                        names: Sequence[str]) -> torch.Tensor:
        pair = pair.subsample(self.max_span)
        _, v_ddot = self.encode_pair(pair)
        v_tilde = self.pair_embedding(v_ddot)
        text = self.relation_text_features(pair, names)
        return self.relation_scores_from(v_tilde, text.to(v_tilde.dtype))

    def score_relations_many(self, pairs: Sequence[PairFeatures],
                             names: Sequence[str]) -> torch.Tensor:
        """Batched scoring; pairs are independent so equal spans share a pass."""
        feature_dim = self.encoder.spec.feature_dim
        out: List[Optional[torch.Tensor]] = [None] * len(pairs)
        groups: Dict[int, List[Tuple[int, PairFeatures]]] = {}
        for i, pair in enumerate(pairs):
            prepared = pair.subsample(self.max_span)
            groups.setdefault(prepared.length, []).append((i, prepared))
        for members in groups.values():
            x = torch.stack([self._role_inputs(p) for _, p in members])
            v_ddot = self.temporal_encode(self._spatial_forward(x))
            v_tilde = self.pair_embedding(v_ddot)
            for (i, pair), row in zip(members, v_tilde):
                text = self.relation_text_features(pair, names)
                out[i] = self.relation_scores_from(row, text.to(row.dtype))
        if not out:
            return torch.zeros((0, len(names)))
        return torch.stack(out)

    def predict_interaction(self, v_ddot: torch.Tensor) -> torch.Tensor:
        """Per-frame probability that the pair interacts at all."""
        flat = v_ddot.reshape(*v_ddot.shape[:-2], -1)
        return torch.sigmoid(self.interaction_head(flat).squeeze(-1))

    def object_consistency_features(self, v_dot: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Span-mean mapped subject and object features after spatial encoding."""
        mapped = self.object_map(v_dot)
        return mapped[..., 0, :].mean(dim=-2), mapped[..., 1, :].mean(dim=-2)

    def forward(self, pair: PairFeatures,
                names: Sequence[str]) -> RelationPrediction:
        pair = pair.subsample(self.max_span)
        _, v_ddot = self.encode_pair(pair)
        v_tilde = self.pair_embedding(v_ddot)
        text = self.relation_text_features(pair, names)
        scores = self.relation_scores_from(v_tilde, text.to(v_tilde.dtype))
        interaction = self.predict_interaction(v_ddot)
        return RelationPrediction(
            subject_tid=pair.subject_tid, object_tid=pair.object_tid,
            categories=tuple(names), relation_scores=scores,
            interaction_scores=interaction, frame_indices=pair.frame_indices)


def build_relation_classifier(cfg, encoder) -> RelationClassifier:
    return RelationClassifier(
        encoder,
        width=cfg["rel.width"],
        heads=cfg["rel.heads"],
        ffn_dim=cfg["rel.ffn_dim"],
        n_spatial_blocks=cfg["rel.n_spatial_blocks"],
        n_temporal_blocks=cfg["rel.n_temporal_blocks"],
        pool=cfg["rel.pool"],
        max_span=cfg["rel.max_span"],
        n_continuous=cfg["prompt.n_continuous"],
        n_conditional=cfg["prompt.n_conditional"],
        class_token_fraction=cfg["prompt.rel_class_pos"])
