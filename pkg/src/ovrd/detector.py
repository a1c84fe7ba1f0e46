"""Frame-level open-vocabulary detection.

A transformer decoder reads the frozen encoder's patch grid through cross
attention and decodes a fixed set of learned object queries plus one extra
relationship query. Object queries regress normalized center-size boxes and
project into boxes the encoder's joint embedding space, where categories
are scored by cosine similarity against encoded category names, so the
recognizable vocabulary is whatever text gets supplied at call time. The
relationship query aggregates scene-wide interaction context; an auxiliary
head trains it to predict which relation categories the frame exhibits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class QueryBundle:
    """Decoded queries for one frame (or a batch of frames)."""

    object_states: torch.Tensor
    boxes: torch.Tensor
    object_embeddings: torch.Tensor
    relation_state: Optional[torch.Tensor]
    relation_logits: Optional[torch.Tensor]


@dataclass
class FrameDetections:
    """Detections surviving the confidence filter, still tensor-valued."""

    query_indices: torch.Tensor
    boxes: torch.Tensor
    scores: torch.Tensor
    embeddings: torch.Tensor
    frame_index: int = 0


def classify_embeddings(embeddings: torch.Tensor, anchors: torch.Tensor,
                        tau: float) -> torch.Tensor:
    """Temperature-scaled cosine classification against text anchors.

    embeddings: [..., D]; anchors: [C, D]. Returns probabilities [..., C].
    """
    emb = F.normalize(embeddings, dim=-1, eps=1e-12)
    anc = F.normalize(anchors, dim=-1, eps=1e-12)
    logits = emb @ anc.transpose(-1, -2) / tau
    return logits.softmax(dim=-1)


def _sincos_grid(rows: int, cols: int, width: int,
                 dtype: torch.dtype) -> torch.Tensor:
    """Fixed 2D sin-cos position codes for a patch grid, one row per cell."""
    if width % 4 != 0:
        raise ValueError("position encoding needs width divisible by 4")
    half = width // 2

    def axis(n: int) -> torch.Tensor:
        pos = torch.arange(n, dtype=dtype)[:, None]
        freq = torch.arange(half // 2, dtype=dtype)[None, :]
        angle = pos / torch.pow(torch.tensor(100.0, dtype=dtype), 2 * freq / half)
        return torch.cat([angle.sin(), angle.cos()], dim=1)

    ys = axis(rows)
    xs = axis(cols)
    out = torch.zeros(rows, cols, width, dtype=dtype)
    out[:, :, :half] = ys[:, None, :]
    out[:, :, half:] = xs[None, :, :]
    return out.reshape(rows * cols, width)


class _DecoderLayer(nn.Module):
    """Pre-norm block: self attention, cross attention to patches, feed forward."""

    def __init__(self, width: int, heads: int, ffn_dim: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(width)
        self.self_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm_cross = nn.LayerNorm(width)
        self.cross_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm_ffn = nn.LayerNorm(width)
        self.ffn = nn.Sequential(
            nn.Linear(width, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, width))

    def forward(self, queries: torch.Tensor, memory: Optional[torch.Tensor]) -> torch.Tensor:
        q = self.norm_self(queries)
        queries = queries + self.self_attn(q, q, q, need_weights=False)[0]
        if memory is not None:
            q = self.norm_cross(queries)
            queries = queries + self.cross_attn(q, memory, memory, need_weights=False)[0]
        return queries + self.ffn(self.norm_ffn(queries))


class RelationAwareQueryDecoder(nn.Module):
    def __init__(self, feature_dim: int, width: int = 256, n_layers: int = 6,
                 heads: int = 8, ffn_dim: int = 1024, n_queries: int = 300,
                 use_relation_query: bool = True):
        super().__init__()
        self.width = width
        self.n_queries = n_queries
        self.use_relation_query = use_relation_query
        self.object_queries = nn.Parameter(torch.randn(n_queries, width) * 0.02)
        self.relation_query = nn.Parameter(torch.randn(1, width) * 0.02)
        self.in_proj = nn.Linear(feature_dim, width)
        self.layers = nn.ModuleList(
            _DecoderLayer(width, heads, ffn_dim) for _ in range(n_layers))
        self.final_norm = nn.LayerNorm(width)
        self._pos_cache: Dict[Tuple[int, int, torch.dtype], torch.Tensor] = {}

    def _positions(self, rows: int, cols: int, dtype: torch.dtype,
                   device: torch.device) -> torch.Tensor:
        key = (rows, cols, dtype)
        if key not in self._pos_cache:
            self._pos_cache[key] = _sincos_grid(rows, cols, self.width, dtype)
        return self._pos_cache[key].to(device)

    def forward(self, patches: torch.Tensor, cross_attention: bool = True
                ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Decode queries against a [G, G, D] patch grid (or a batch of them).

        Returns (object_states, relation_state); the relation state is None
        when the relationship query is disabled. With cross_attention=False
        the patch content is never read, which isolates how much of any
        downstream behavior actually comes from the image.
        """
        squeeze = patches.ndim == 3
        if squeeze:
            patches = patches[None]
        b, rows, cols, d = patches.shape
        memory = None
        if cross_attention:
            flat = patches.reshape(b, rows * cols, d)
            memory = self.in_proj(flat) + self._positions(
                rows, cols, patches.dtype, patches.device)[None]
        queries = self.object_queries
        if self.use_relation_query:
            queries = torch.cat([queries, self.relation_query], dim=0)
        states = queries[None].expand(b, -1, -1)
        for layer in self.layers:
            states = layer(states, memory)
        states = self.final_norm(states)
        rel = states[:, self.n_queries] if self.use_relation_query else None
        obj = states[:, :self.n_queries]
        if squeeze:
            obj = obj[0]
            rel = rel[0] if rel is not None else None
        return obj, rel


class OpenVocabularyDetector(nn.Module):
    def __init__(self, feature_dim: int, width: int = 256, n_layers: int = 6,
                 heads: int = 8, ffn_dim: int = 1024, n_queries: int = 300,
                 n_aux_relations: int = 5, use_relation_query: bool = True):
        super().__init__()
        self.decoder = RelationAwareQueryDecoder(
            feature_dim, width, n_layers, heads, ffn_dim, n_queries,
            use_relation_query)
        self.box_head = nn.Sequential(
            nn.Linear(width, width), nn.ReLU(), nn.Linear(width, 4))
        self.embed_head = nn.Sequential(
            nn.Linear(width, width), nn.ReLU(), nn.Linear(width, feature_dim))
        self.relation_head = nn.Sequential(
            nn.Linear(width, width), nn.ReLU(), nn.Linear(width, n_aux_relations))

    def forward(self, patches: torch.Tensor, cross_attention: bool = True) -> QueryBundle:
        obj, rel = self.decoder(patches, cross_attention=cross_attention)
        return QueryBundle(
            object_states=obj,
            boxes=self.box_head(obj).sigmoid(),
            object_embeddings=self.embed_head(obj),
            relation_state=rel,
            relation_logits=self.relation_head(rel) if rel is not None else None,
        )

    def filter_detections(self, bundle: QueryBundle, anchors: torch.Tensor,
                          epsilon: float, tau: float) -> FrameDetections:
        """Keep queries whose best category probability reaches epsilon.

        Operates on an unbatched bundle. A query spread evenly over the
        vocabulary peaks near 1/C and is dropped; a query aligned with one
        name peaks near one and survives. The threshold is inclusive.
        """
        if bundle.object_embeddings.ndim != 2:
            raise ValueError("filter_detections expects an unbatched bundle")
        scores = classify_embeddings(bundle.object_embeddings, anchors, tau)
        keep = scores.max(dim=-1).values >= epsilon
        idx = keep.nonzero(as_tuple=True)[0]
        return FrameDetections(
            query_indices=idx,
            boxes=bundle.boxes[idx],
            scores=scores[idx],
            embeddings=bundle.object_embeddings[idx],
        )


def build_detector(cfg, feature_dim: int, n_aux_relations: int) -> OpenVocabularyDetector:
    return OpenVocabularyDetector(
        feature_dim=feature_dim,
        width=cfg["detector.width"],
        n_layers=cfg["detector.n_layers"],
        heads=cfg["detector.heads"],
        ffn_dim=cfg["detector.ffn_dim"],
        n_queries=cfg["detector.n_queries"],
        n_aux_relations=n_aux_relations,
        use_relation_query=cfg["detector.use_relation_query"],
    )
