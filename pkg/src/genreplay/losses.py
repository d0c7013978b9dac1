"""Objectives for generator training and anti-forgetting training.

The generator is supervised by three signals: a pooled-feature distance that
pins down class content, a gram-matrix distance that transfers channel
statistics (texture) from the unlabeled source, and a cycle pass that reuses
the generated map as the content input to disentangle the two roles.  The
classifier is trained with cross-entropy over new data, stored exemplars and
generated maps, plus a cosine feature-distillation term against the previous
backbone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateInputError, ShapeError
from .tensor import Tensor


@dataclass
class GramMatrix:
    """Channel-correlation matrix of a feature map plus the divisor applied."""

    matrix: Tensor
    normalization: float

    @property
    def shape(self):
        return self.matrix.shape


@dataclass
class GeneratorLossWeights:
    """Trade-offs for the generator objective: lam scales the gram terms,
    lam_cyc scales the whole cycle branch."""

    lam: float = 1.0
    lam_cyc: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.lam_cyc < 0:
            raise ValueError("generator loss weights must be >= 0")


@dataclass
class TaskLossWeights:
    """Trade-offs for classifier training: alpha1 scales replay cross-entropy
    (stored + generated), alpha2 scales feature distillation."""

    alpha1: float = 1.0
    alpha2: float = 1.0

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("task loss weights must be >= 0")


def gram_matrix(h: Tensor, normalize: bool = True) -> GramMatrix:
    """Pairwise inner products of flattened channels of one (C, H, W) map.

    ``normalize`` divides by H*W so the scale is independent of spatial size.
    """
    if h.data.ndim != 3:
        raise ShapeError(f"gram_matrix expects (C, H, W), got shape {h.data.shape}")
    c, hh, ww = h.data.shape
    rows = T.reshape(h, (c, hh * ww))
    m = T.matmul(rows, T.transpose(rows, (1, 0)))
    divisor = float(hh * ww) if normalize else 1.0
    if normalize:
        m = m * (1.0 / divisor)
    return GramMatrix(matrix=m, normalization=divisor)


def batched_gram(h: Tensor, normalize: bool = True) -> Tensor:
    """(N, C, H, W) -> (N, C, C) gram matrices, one per sample."""
    if h.data.ndim != 4:
        raise ShapeError(f"batched_gram expects NCHW, got shape {h.data.shape}")
    n, c, hh, ww = h.data.shape
    rows = T.reshape(h, (n, c, hh * ww))
    m = T.matmul(rows, T.transpose(rows, (0, 2, 1)))
    if normalize:
        m = m * (1.0 / (hh * ww))
    return m


def semantic_loss(v_ref: Tensor, v_gen: Tensor) -> Tensor:
    """Euclidean distance between pooled feature vectors (not squared)."""
    if v_ref.data.shape != v_gen.data.shape:
        raise ShapeError(f"length mismatch: {v_ref.data.shape} vs {v_gen.data.shape}")
    return T.frobenius_norm(v_ref - v_gen)


def style_loss(a: GramMatrix, b: GramMatrix) -> Tensor:
    """Frobenius distance between two gram matrices."""
    if a.matrix.data.shape != b.matrix.data.shape:
        raise ShapeError(f"gram dim mismatch: {a.shape} vs {b.shape}")
    if a.normalization != b.normalization:
        raise ShapeError(
            f"gram normalization mismatch: {a.normalization} vs {b.normalization}"
        )
    return T.frobenius_norm(a.matrix - b.matrix)


def cycle_loss(v_cycle: Tensor, v_first: Tensor, g_cycle: GramMatrix,
               g_exemplar: GramMatrix, style_weight: float) -> Tensor:
    """Combined cycle objective: pooled distance to the first-pass generated
    map plus ``style_weight`` times the gram distance to the exemplar map."""
    return semantic_loss(v_cycle, v_first) + style_weight * style_loss(g_cycle, g_exemplar)


def generator_objective(ce: Tensor, semantic: Tensor, style: Tensor,
                        semantic_cyc: Tensor, style_cyc: Tensor,
                        w: GeneratorLossWeights) -> Tensor:
    """Per-triplet generator loss:
    ce + semantic + lam*style + lam_cyc*(semantic_cyc + lam*style_cyc)."""
    return ce + semantic + w.lam * style + w.lam_cyc * (semantic_cyc + w.lam * style_cyc)


def distillation_loss(feats_old: Tensor, feats_new: Tensor,
                      reduction: str = "mean") -> Tensor:
    """Sum or mean over rows of (1 - cosine(old feature, new feature))."""
    if feats_old.data.shape != feats_new.data.shape or feats_old.data.ndim != 2:
        raise ShapeError(
            f"expected matching (N, F) features, got {feats_old.data.shape} "
            f"and {feats_new.data.shape}"
        )
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    norms_old = np.sqrt((feats_old.data ** 2).sum(axis=1))
    norms_new = np.sqrt((feats_new.data ** 2).sum(axis=1))
    if np.any(norms_old == 0) or np.any(norms_new == 0):
        raise DegenerateInputError("distillation_loss on a zero-norm feature row")
    dots = T.tsum(feats_old * feats_new, axis=1)
    denom = T.frobenius_norm(feats_old, axis=1) * T.frobenius_norm(feats_new, axis=1)
    cos = dots / denom
    per_row = 1.0 - cos
    return T.tmean(per_row) if reduction == "mean" else T.tsum(per_row)


def task_objective(new_ce: Tensor, memory_ce: Tensor, generated_ce: Tensor,
                   distill: Tensor, w: TaskLossWeights) -> Tensor:
    """Classifier loss: new_ce + alpha1*(memory_ce + generated_ce) + alpha2*distill."""
    return new_ce + w.alpha1 * (memory_ce + generated_ce) + w.alpha2 * distill
