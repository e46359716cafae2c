"""Training losses: batch-hard triplet, smoothed cross-entropy, rotation
cross-entropy, and their weighted combination with a per-component breakdown.

The triplet loss uses negative Euclidean distance as the similarity, which
makes it the standard batch-hard form: per anchor, take the farthest positive
and the closest negative, then hinge at margin tau. Mining decisions are made
on raw values (outside the gradient graph); gradients flow through the
selected distances only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from geomattn.autodiff import Tensor, record_pattern
from geomattn.model import BranchOutput

__all__ = [
    "NonFiniteLossError",
    "TripletBatch",
    "LossWeights",
    "hard_triplet_loss",
    "smoothed_ce",
    "rotation_loss",
    "overall_loss",
    "pairwise_distances",
    "log_softmax",
]

_DIST_FLOOR = 1e-12


class NonFiniteLossError(RuntimeError):
    """A loss input or output stopped being finite."""


@dataclass
class TripletBatch:
    """Features with identity labels, ready for in-batch mining."""

    features: Tensor  # [n, d]
    identities: np.ndarray  # [n] int

    def __post_init__(self):
        self.identities = np.asarray(self.identities)
        if self.features.ndim != 2:
            raise ValueError(f"features must be [n, d], got {self.features.shape}")
        if self.identities.shape != (self.features.shape[0],):
            raise ValueError("one identity label per feature row required")


@dataclass(frozen=True)
class LossWeights:
    lambda_tri_gb: float = 0.5
    lambda_sce_gb: float = 0.5
    lambda_tri_ab: float = 0.5
    lambda_sce_ab: float = 0.5
    lambda_rot: float = 1.0

    def __post_init__(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{name} must be nonnegative, got {v}")


def pairwise_distances(features: Tensor) -> Tensor:
    """Euclidean distance matrix via the expanded square, floored for the
    sqrt gradient (the floor also kills the gradient on the zero diagonal)."""
    sq = (features * features).sum(axis=1, keepdims=True)  # [n, 1]
    d2 = sq + sq.T - (features @ features.T) * 2.0
    return d2.clamp_min(_DIST_FLOOR).sqrt()


def hard_triplet_loss(batch: TripletBatch, tau: float) -> Tensor:
    """Mean over anchors of the batch-hard hinge [tau + max_pos d - min_neg d]_+;
    raises if any anchor lacks a positive or a negative."""
    feats, ids = batch.features, batch.identities
    if not np.all(np.isfinite(feats.data)):
        raise NonFiniteLossError("non-finite features entering the triplet loss")
    n = feats.shape[0]
    same = ids[:, None] == ids[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    if not pos_mask.any(axis=1).all():
        bad = int(np.flatnonzero(~pos_mask.any(axis=1))[0])
        raise ValueError(f"anchor {bad} (identity {ids[bad]}) has no positive in the batch")
    if not neg_mask.any(axis=1).all():
        bad = int(np.flatnonzero(~neg_mask.any(axis=1))[0])
        raise ValueError(f"anchor {bad} (identity {ids[bad]}) has no negative in the batch")

    dist = pairwise_distances(feats)
    # mining happens on values; ties break to the lowest index
    pos_idx = np.where(pos_mask, dist.data, -np.inf).argmax(axis=1)
    neg_idx = np.where(neg_mask, dist.data, np.inf).argmin(axis=1)
    record_pattern(pos_idx)
    record_pattern(neg_idx)
    anchors = np.arange(n)
    d_ap = dist[anchors, pos_idx]
    d_an = dist[anchors, neg_idx]
    return (d_ap - d_an + tau).relu().mean()


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log softmax; the max shift is a constant, so values and
    gradients are identical to the unshifted form."""
    shift = logits - np.max(logits.data, axis=1, keepdims=True)
    lse = shift.exp().sum(axis=1, keepdims=True).log()
    return shift - lse


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-D integer array")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label out of range for {n_classes} classes: {labels}")
    return labels


def smoothed_ce(logits: Tensor, labels, eps: float = 0.1) -> Tensor:
    """Cross-entropy against smoothed targets: 1-eps+eps/C on the true class,
    eps/C elsewhere."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"logits must be [n, C>=2], got {logits.shape}")
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"eps must lie in [0, 1), got {eps}")
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteLossError("non-finite logits entering smoothed_ce")
    n, c = logits.shape
    labels = _check_labels(labels, c)
    targets = np.full((n, c), eps / c)
    targets[np.arange(n), labels] = 1.0 - eps + eps / c
    return -(log_softmax(logits) * targets).sum() * (1.0 / n)


def rotation_loss(ssl_logits: Tensor, rot_labels) -> Tensor:
    """Plain cross-entropy over the four rotation classes."""
    if ssl_logits.ndim != 2 or ssl_logits.shape[1] != 4:
        raise ValueError(f"rotation logits must be [n, 4], got {ssl_logits.shape}")
    if not np.all(np.isfinite(ssl_logits.data)):
        raise NonFiniteLossError("non-finite logits entering rotation_loss")
    n = ssl_logits.shape[0]
    labels = _check_labels(rot_labels, 4)
    logp = log_softmax(ssl_logits)
    return -logp[np.arange(n), labels].mean()


def overall_loss(
    gb: BranchOutput,
    ab: BranchOutput,
    ssl_logits: Tensor,
    labels,
    rot_labels,
    weights: LossWeights,
    tau: float,
    smoothing_eps: float = 0.1,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the five components; triplet terms read each branch's
    pre-BN features, classification terms read post-BN logits. Returns the
    total (a graph node) and a float breakdown for logging."""
    ids = np.asarray(labels)
    tri_gb = hard_triplet_loss(TripletBatch(gb.feat_triplet, ids), tau)
    sce_gb = smoothed_ce(gb.logits, ids, eps=smoothing_eps)
    tri_ab = hard_triplet_loss(TripletBatch(ab.feat_triplet, ids), tau)
    sce_ab = smoothed_ce(ab.logits, ids, eps=smoothing_eps)
    rot = rotation_loss(ssl_logits, rot_labels)
    total = (
        tri_gb * weights.lambda_tri_gb
        + sce_gb * weights.lambda_sce_gb
        + tri_ab * weights.lambda_tri_ab
        + sce_ab * weights.lambda_sce_ab
        + rot * weights.lambda_rot
    )
    if not np.isfinite(total.data):
        raise NonFiniteLossError("overall loss is not finite")
    breakdown = {
        "tri_gb": tri_gb.item(),
        "sce_gb": sce_gb.item(),
        "tri_ab": tri_ab.item(),
        "sce_ab": sce_ab.item(),
        "rot": rot.item(),
        "total": total.item(),
    }
    return total, breakdown
