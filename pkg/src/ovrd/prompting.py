"""Vision-guided language prompts and score ensembling.

A prompt is a token sequence fed to the frozen text encoder: learned
continuous tokens interleaved with tokens generated from a visual
embedding, plus the category name as a discrete token. Object prompts put
the name last; relation prompts insert it at a fractional position of the
interleaved sequence. Scores from prompted text features are blended with
the detector's own scores using separate weights for base and novel
categories, since prompts are tuned on base data only and transfer with a
different reliability to held-out names.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Union

import torch
from torch import nn

from .detector import classify_embeddings

Token = Union[str, torch.Tensor]


@dataclass(frozen=True)
class EnsembleWeights:
    alpha: float
    beta: float

    def __post_init__(self):
        for name, v in (("alpha", self.alpha), ("beta", self.beta)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


class PromptTemplate(nn.Module):
    """A bank of learned prompt tokens plus the class-token placement rule.

    One template is shared across all categories of its target set (and
    role, for relations); only the class name varies per category, which is
    what lets tuned prompts apply to names never seen in training.
    """

    def __init__(self, token_dim: int, n_continuous: int = 8,
                 n_conditional: int = 8, target_set: str = "object",
                 role: str = "none",
                 class_token_position: Union[str, float] = "end"):
        super().__init__()
        if n_continuous != n_conditional:
            raise ValueError(
                "interleaving requires equally many continuous and conditional "
                f"tokens, got {n_continuous} and {n_conditional}")
        if target_set not in ("object", "relation"):
            raise ValueError(f"unknown target set {target_set!r}")
        self.token_dim = token_dim
        self.n_continuous = n_continuous
        self.n_conditional = n_conditional
        self.target_set = target_set
        self.role = role
        self.class_token_position = class_token_position
        self.continuous_tokens = nn.Parameter(torch.randn(n_continuous, token_dim) * 0.02)


class VisionPromptNet(nn.Module):
    """Two-layer net mapping a visual embedding to conditional prompt tokens."""

    def __init__(self, feature_dim: int, token_dim: int, n_tokens: int = 8):
        super().__init__()
        self.n_tokens = n_tokens
        self.token_dim = token_dim
        self.net = nn.Sequential(
            nn.Linear(feature_dim, feature_dim),
            nn.ReLU(),
            nn.Linear(feature_dim, n_tokens * token_dim),
        )

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        out = self.net(embedding)
        return out.reshape(*embedding.shape[:-1], self.n_tokens, self.token_dim)


def conditional_tokens(net: VisionPromptNet, embedding: torch.Tensor) -> torch.Tensor:
    return net(embedding)


def build_prompt(template: PromptTemplate, zeta: torch.Tensor,
                 class_name: str) -> List[Token]:
    """Interleave learned and conditional tokens and place the class token.

    Returns a list mixing tensors (continuous tokens) and one string (the
    category name), ready for the text encoder. Objects get the name
    appended; relations get it inserted at round(fraction * length) of the
    interleaved sequence, clamped to the end when the fraction overshoots.
    """
    if not class_name:
        raise ValueError("class name must be non-empty")
    if zeta.shape != (template.n_conditional, template.token_dim):
        raise ValueError(
            f"conditional tokens must have shape "
            f"({template.n_conditional}, {template.token_dim}), got {tuple(zeta.shape)}")
    seq: List[Token] = []
    for k in range(template.n_continuous):
        seq.append(template.continuous_tokens[k])
        seq.append(zeta[k])
    pos = template.class_token_position
    if pos == "end":
        seq.append(class_name)
    else:
        idx = int(round(float(pos) * len(seq)))
        idx = max(0, min(idx, len(seq)))
        seq.insert(idx, class_name)
    return seq


def aux_classify(embedding: torch.Tensor, text_features: torch.Tensor,
                 tau: float) -> torch.Tensor:
    """Softmax over cosine similarities to prompted per-category features."""
    if text_features.shape[0] == 0:
        raise ValueError("need at least one category to classify against")
    return classify_embeddings(embedding, text_features, tau)


def ensemble(p: torch.Tensor, p_tilde: torch.Tensor, weights: EnsembleWeights,
             base_mask: torch.Tensor) -> torch.Tensor:
    """Blend detector scores with prompted rescores, per category split.

    Base categories mix with weight alpha, novel ones with beta. The result
    is intentionally not renormalized; downstream consumers take argmax or
    compare entries directly.
    """
    if p.shape[-1] != p_tilde.shape[-1] or p.shape[-1] != base_mask.shape[-1]:
        raise ValueError(
            f"score vectors and mask disagree: {p.shape} vs {p_tilde.shape} "
            f"vs {base_mask.shape}")
    weight = torch.where(base_mask, torch.as_tensor(weights.alpha, dtype=p.dtype),
                         torch.as_tensor(weights.beta, dtype=p.dtype))
    return (1 - weight) * p + weight * p_tilde


class AuxObjectClassifier(nn.Module):
    """Rescores object embeddings against vision-guided prompted names."""

    def __init__(self, encoder, n_continuous: int = 8, n_conditional: int = 8):
        super().__init__()
        self.encoder = encoder
        self.template = PromptTemplate(
            token_dim=encoder.spec.token_dim,
            n_continuous=n_continuous,
            n_conditional=n_conditional,
            target_set="object",
            class_token_position="end",
        )
        self.prompt_net = VisionPromptNet(
            feature_dim=encoder.spec.feature_dim,
            token_dim=encoder.spec.token_dim,
            n_tokens=n_conditional,
        )

    def prompted_text_features(self, embedding: torch.Tensor,
                               class_names: Sequence[str]) -> torch.Tensor:
        """Per-category text features conditioned on one visual embedding."""
        zeta = self.prompt_net(embedding)
        feats = [self.encoder.encode_text(build_prompt(self.template, zeta, name))
                 for name in class_names]
        return torch.stack(feats, dim=0)

    def rescore(self, embedding: torch.Tensor, class_names: Sequence[str],
                tau: float) -> torch.Tensor:
        if len(class_names) == 0:
            raise ValueError("need at least one category name")
        text = self.prompted_text_features(embedding, class_names)
        return aux_classify(embedding, text, tau)
