"""Attention computing: neighborhood softmax, channel NMS, normalized mask.

Input is a strictly positive local feature map ``L`` of shape [c, h, w] (or a
batch [n, c, h, w]). Three stages:

* ``neighborhood_softmax``: softmax of each activation against its K x K
  spatial neighborhood, truncated at map borders (out-of-bounds positions
  simply do not contribute),
* ``channel_nms``: divide each location's channel vector by its maximum, so
  the strongest channel scores exactly 1 and the rest fall below it,
* ``attention_mask``: take the best combined score across channels and
  normalize it into a spatial probability mask Q.

All stages are differentiable; max nodes route their gradient to the single
lowest-index winner so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from geomattn.autodiff import Tensor, amax, box_sum2d

__all__ = ["AcmConfig", "AttentionMask", "neighborhood_softmax", "channel_nms", "attention_mask"]

_CHANNEL_AXIS = -3  # [.., c, h, w]


@dataclass(frozen=True)
class AcmConfig:
    """Neighborhood side length and (fixed) boundary policy."""

    K: int = 7
    boundary: str = "truncate"

    def __post_init__(self):
        if self.K < 1 or self.K % 2 == 0:
            raise ValueError(f"K must be an odd positive integer, got {self.K}")
        if self.boundary != "truncate":
            raise ValueError(f"only the 'truncate' boundary policy exists, got {self.boundary!r}")


@dataclass
class AttentionMask:
    """Normalized mask Q plus the intermediates, kept when requested."""

    Q: Tensor
    M: Tensor | None = None
    G: Tensor | None = None
    Qtilde: Tensor | None = None


def _check_shape(L: Tensor) -> None:
    if L.ndim not in (3, 4):
        raise ValueError(f"expected [c,h,w] or [n,c,h,w], got shape {L.shape}")


def _check_positive(L: Tensor) -> None:
    if np.any(L.data <= 0.0):
        raise ValueError("local feature map must be strictly positive")


def neighborhood_softmax(L: Tensor, cfg: AcmConfig) -> Tensor:
    """Softmax of each activation over its truncated K x K neighborhood.

    A per-channel constant is subtracted before exponentiation purely as an
    overflow guard; it cancels in the ratio, so values are identical to the
    unshifted form. Softmax itself is well defined for any real input, so
    positivity is not required here (only the channel stage needs it).
    """
    _check_shape(L)
    shift_axes = (-2, -1)
    c_max = np.max(L.data, axis=shift_axes, keepdims=True)
    e = (L - c_max).exp()
    denom = box_sum2d(e, cfg.K)
    return e / denom


def channel_nms(L: Tensor) -> Tensor:
    """Divide each location by its per-location channel maximum."""
    _check_shape(L)
    _check_positive(L)
    return L / amax(L, axis=_CHANNEL_AXIS, keepdims=True)


def attention_mask(L: Tensor, cfg: AcmConfig, keep_intermediates: bool = False) -> AttentionMask:
    """Combine the two scores and normalize into a spatial mask summing to 1."""
    _check_shape(L)
    _check_positive(L)
    M = neighborhood_softmax(L, cfg)
    G = channel_nms(L)
    qtilde = amax(M * G, axis=_CHANNEL_AXIS)
    if qtilde.ndim == 2:
        Q = qtilde / qtilde.sum()
    else:  # batched: normalize each image's map independently
        Q = qtilde / qtilde.sum(axis=(-2, -1), keepdims=True)
    if keep_intermediates:
        return AttentionMask(Q=Q, M=M, G=G, Qtilde=qtilde)
    return AttentionMask(Q=Q)
