"""Entity representations, cross-modal attention, and prototype scoring.

The two latent streams are stacked row-wise into one fused sequence; an
entity-conditioned attention pools it into a single vector, which is
concatenated with the raw entity embedding into the sample feature. Category
prototypes are scored against sample features through a pair of affine
projections, and seen-category training uses a margin ranking loss.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import NumericsError, ValidationError


class Task(enum.Enum):
    """Which extraction task a bundle carries: entity typing or relation extraction."""

    MET = "MET"
    MRE = "MRE"

    @property
    def entity_width_multiplier(self) -> int:
        return 2 if self is Task.MET else 3

    @property
    def needs_second_entity(self) -> bool:
        return self is Task.MRE


@dataclass
class PrototypeSet:
    """Category names with their pooled prototype embeddings (one row each)."""

    names: list[str]
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.names):
            raise ValidationError("prototype matrix needs one row per category name")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("duplicate category names in prototype set")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def subset(self, indices) -> "PrototypeSet":
        indices = list(indices)
        return PrototypeSet([self.names[i] for i in indices], self.vectors[indices])

    def matrix64(self) -> np.ndarray:
        return np.asarray(self.vectors, dtype=np.float64)


def entity_representation(sample, task: Task) -> np.ndarray:
    """Concatenated marker-token rows: [CLS|E1] for typing, [CLS|E1|E2] for relations."""
    tokens = np.asarray(sample.token_matrix, dtype=np.float64)
    n_tokens = tokens.shape[0]
    markers = [sample.marker_cls, sample.marker_e1]
    if task.needs_second_entity:
        if sample.marker_e2 is None:
            raise ValidationError(f"sample {sample.sample_id!r} lacks an E2 marker for MRE")
        markers.append(sample.marker_e2)
    for m in markers:
        if not 0 <= m < n_tokens:
            raise ValidationError(
                f"marker index {m} out of range for {n_tokens} tokens in {sample.sample_id!r}"
            )
    return np.concatenate([tokens[m] for m in markers])


def cross_modal_attention(U, entity, attn_w, attn_b):
    """Entity-conditioned softmax pooling over the fused latent rows.

    Row scores are W_A . [u_i (+) e] + b_A. The entity block and bias shift
    every score equally, so the softmax is evaluated on the row-dependent
    part alone; the returned weights are identical (softmax shift invariance,
    applied exactly) and those constant-shift directions carry exactly zero
    gradient.
    """
    U_v = nm.value_of(U)
    e_v = nm.value_of(entity)
    w_v = nm.value_of(attn_w)
    h = U_v.shape[1]
    if w_v.shape != (h + e_v.shape[0],):
        raise ValidationError(
            f"attention weight width {w_v.shape} does not match latent+entity width {h + e_v.shape[0]}"
        )
    base = nm.matmul(U, attn_w[:h])
    if not np.all(np.isfinite(nm.value_of(base))):
        raise NumericsError("non-finite attention scores")
    weights = nm.softmax(base, axis=0)
    pooled = nm.matmul(weights, U)
    return pooled, weights


def sample_feature(pooled, entity):
    """Whole-sample feature: pooled fused representation concatenated with the entity."""
    return nm.concat([pooled, entity], axis=-1)


def similarity_scores(features, prototypes, head_feat: nm.Affine, head_proto: nm.Affine):
    """Dot products between projected sample features and projected prototypes."""
    proto_matrix = prototypes.matrix64() if isinstance(prototypes, PrototypeSet) else prototypes
    pf = nm.affine(features, head_feat)
    pp = nm.affine(proto_matrix, head_proto)
    if nm.value_of(pf).shape[-1] != nm.value_of(pp).shape[-1]:
        raise ValidationError("feature and prototype projections have different widths")
    return nm.matmul(pf, nm.transpose(pp))


def ranking_loss(scores, true_index: int, exclude_true: bool = False):
    """Margin ranking loss sum_i max(1 - o_true + o_i, 0).

    The sum runs over every category including the true one, whose term is
    exactly 1; `exclude_true` switches to the conventional variant that skips
    the true label.
    """
    n = nm.value_of(scores).shape[0]
    if n == 0:
        raise ValidationError("ranking_loss requires a non-empty score vector")
    if not 0 <= true_index < n:
        raise ValidationError(f"true_index {true_index} out of range for {n} scores")
    s_true = scores[true_index]
    if exclude_true:
        others = [i for i in range(n) if i != true_index]
        if not others:
            return nm.as_var(0.0) if isinstance(scores, nm.Var) else 0.0
        scores = scores[others]
    # scores - s_true keeps the true term's margin at exactly 1.0
    margins = nm.clip_min(nm.add(nm.add(scores, nm.mul(s_true, -1.0)), 1.0), 0.0)
    return nm.sum_(margins)
