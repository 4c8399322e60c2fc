"""Attention-based weighted pooling of per-step recurrent outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DimensionError


@dataclass
class PoolingParams:
    W: Tensor

    @classmethod
    def zeros(cls, dim: int) -> "PoolingParams":
        return cls(Tensor(np.zeros(dim), requires_grad=True))


@dataclass
class PooledRepresentation:
    vector: Tensor
    attention: Tensor


def attention_weights(hs: Tensor, W: PoolingParams, valid=None) -> Tensor:
    """Softmax over steps of the energies ``W . h_t``; invalid steps get weight 0.

    ``hs`` has shape (..., steps, dim) and ``valid`` broadcasts to (..., steps).
    """
    if hs.shape[-1] != W.W.shape[0]:
        raise DimensionError(f"pooling weight length {W.W.shape[0]} != feature dim {hs.shape[-1]}")
    return dc.softmax_stable(dc.dot(hs, W.W), mask=valid, axis=-1)


def weighted_pool(hs: Tensor, weights: Tensor) -> PooledRepresentation:
    """``sum_t weights[t] * hs[t]`` over the step axis."""
    if weights.shape != hs.shape[:-1]:
        raise DimensionError(f"weights {weights.shape} do not match steps of {hs.shape}")
    pooled = (hs * dc.reshape(weights, weights.shape + (1,))).sum(axis=-2)
    return PooledRepresentation(pooled, weights)


def attend(hs: Tensor, W: PoolingParams, valid=None) -> PooledRepresentation:
    return weighted_pool(hs, attention_weights(hs, W, valid))
