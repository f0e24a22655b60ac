"""Training objectives: pairwise BCE on difference scores, identity
cross-entropy on pooled features, and their weighted sum.

Pair labels follow the difference-score convention: 0 means the two
images show the same person (score should fall), 1 means different
persons (score should rise).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .autodiff import (ShapeError, Tensor, add, affine_rows, emit, log, mul,
                       scale, stack, sub, tensor, tsum)

DEFAULT_LAMBDA = 0.1
DEFAULT_CLAMP = 1e-12
# Pooled desk-scale features come out of the backbone with rms around a
# few hundredths, which leaves the identity classifier's logits (and so
# its gradients) too small to move in a short schedule.  The classifier
# therefore reads the features through a fixed input gain; cosine
# retrieval on the raw features is unaffected.
ID_FEATURE_GAIN = 8.0


@dataclass
class IdClassifier:
    weight: Tensor  # (num_classes, c_f)
    bias: Tensor    # (num_classes,)


@dataclass
class LossReport:
    pbce: Tensor
    id: Tensor
    total: Tensor
    lam: float


def _as_score_vector(scores: Union[Tensor, Sequence[Tensor]]) -> Tensor:
    if isinstance(scores, Tensor):
        if len(scores.shape) != 1:
            raise ShapeError(f"scores must be rank-1, got {scores.shape}")
        return scores
    if len(scores) == 0:
        raise ValueError("pbce_loss: empty score list")
    return stack(list(scores))


def pbce_loss(scores: Union[Tensor, Sequence[Tensor]], labels,
              clamp: float = DEFAULT_CLAMP) -> Tensor:
    """-(1/M) sum[l*log(D) + (1-l)*log(1-D)] over M pairs.

    Log arguments are floored at `clamp`, so saturated scores yield a
    large finite loss rather than an infinity.
    """
    vec = _as_score_vector(scores)
    m = vec.shape[0]
    if m == 0:
        raise ValueError("pbce_loss: empty score list")
    lab = np.asarray(labels, dtype=vec.dtype)
    if lab.shape != (m,):
        raise ShapeError(f"pbce_loss: {m} scores but labels shaped {lab.shape}")
    if not np.all((lab == 0) | (lab == 1)):
        raise ValueError("pbce_loss: labels must be 0 (same) or 1 (different)")
    l_t = tensor(lab, dtype=vec.dtype)
    one_minus_l = tensor(1.0 - lab, dtype=vec.dtype)
    ones = tensor(np.ones(m), dtype=vec.dtype)
    pos = mul(l_t, log(vec, floor=clamp))
    neg = mul(one_minus_l, log(sub(ones, vec), floor=clamp))
    return scale(tsum(add(pos, neg)), -1.0 / m)


def softmax_xent_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the true class, (S,C) logits."""
    if len(logits.shape) != 2:
        raise ShapeError(f"softmax_xent_mean: expected (S, C) logits, got {logits.shape}")
    s, c = logits.shape
    ld = logits.data
    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + ld.max(axis=1, keepdims=True)
    nll = lse[:, 0] - ld[np.arange(s), labels]
    out = np.asarray(nll.mean(), dtype=ld.dtype)
    probs = np.exp(ld - lse)

    def bwd(g):
        d = probs.copy()
        d[np.arange(s), labels] -= 1.0
        return (d * (g / s),)

    return emit(out, (logits,), bwd)


def id_loss(global_feats: Union[Tensor, Sequence[Tensor]], id_labels,
            classifier: IdClassifier, num_classes: int,
            modalities: Optional[Sequence[str]] = None) -> Tensor:
    """Identity cross-entropy over pooled features with one shared classifier.

    With equal per-modality halves (enforced when `modalities` is given)
    the plain mean over all samples equals the average of the two
    per-modality means.
    """
    feats = stack(list(global_feats)) if not isinstance(global_feats, Tensor) else global_feats
    if len(feats.shape) != 2:
        raise ShapeError(f"id_loss: expected (S, c_f) features, got {feats.shape}")
    s = feats.shape[0]
    if s == 0:
        raise ValueError("id_loss: empty feature list")
    labels = np.asarray(id_labels, dtype=np.int64)
    if labels.shape != (s,):
        raise ShapeError(f"id_loss: {s} features but labels shaped {labels.shape}")
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        k = int(np.argmax(bad))
        raise ValueError(
            f"id_loss: label {labels[k]} at position {k} outside [0, {num_classes})")
    if classifier.weight.shape[0] != num_classes:
        raise ShapeError(
            f"id_loss: classifier has {classifier.weight.shape[0]} rows, "
            f"expected {num_classes}")
    if modalities is not None:
        counts = {}
        for tag in modalities:
            counts[tag] = counts.get(tag, 0) + 1
        if len(counts) != 2 or len(set(counts.values())) != 1:
            raise ValueError(f"id_loss: expected equal halves per modality, got {counts}")
    logits = affine_rows(scale(feats, ID_FEATURE_GAIN),
                         classifier.weight, classifier.bias)
    return softmax_xent_mean(logits, labels)


def total_loss(pbce: Tensor, id_term: Tensor, lam: float = DEFAULT_LAMBDA) -> LossReport:
    """total = pbce + lam * id."""
    if lam < 0:
        raise ValueError(f"loss weight must be >= 0, got {lam}")
    total = add(pbce, scale(id_term, lam))
    return LossReport(pbce=pbce, id=id_term, total=total, lam=lam)
