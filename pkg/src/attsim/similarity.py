"""Similarity functions between feature maps.

A feature map is an ``M×T`` tensor (channels by time segments); leading batch
axes are allowed everywhere. All distance kinds follow the convention that a
larger value means more similar.

The attentional similarity weights every segment pair of the ``T_q×T_j``
similarity matrix by a rank-1 weight ``A_j A_q^T``. Because of that rank-1
structure the score collapses to a distance between two attended vectors
``X_q A_q`` and ``X_j A_j``, which is what :func:`sim_attentional` computes.
:func:`sim_attentional_trace` keeps the explicit matrix and serves as the
reference path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, as_tensor

DISTANCE_KINDS = ("inner_product", "cosine", "neg_euclidean")
SIMILARITY_KINDS = ("pooled", "second_order", "attentional")

_ALIASES = {
    "inner": "inner_product",
    "dot": "inner_product",
    "inner_product": "inner_product",
    "cosine": "cosine",
    "euclidean": "neg_euclidean",
    "neg_euclidean": "neg_euclidean",
}


def distance_kind(name: str) -> str:
    try:
        return _ALIASES[name]
    except KeyError:
        raise ValueError(f"unknown distance kind {name!r}; expected one of {sorted(_ALIASES)}") from None


@dataclass(frozen=True)
class SimilarityHead:
    kind: str = "pooled"
    pooling: str = "avg"
    distance: str = "inner_product"
    # scalar reduction of the second-order matrix; "sum" is the SEN-surrogate option
    reduction: str = "mean"

    def __post_init__(self):
        if self.kind not in SIMILARITY_KINDS:
            raise ValueError(f"unknown similarity kind {self.kind!r}")
        if self.pooling not in ("avg", "max"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown second-order reduction {self.reduction!r}")
        object.__setattr__(self, "distance", distance_kind(self.distance))


def _check_maps(xq: Tensor, xj: Tensor) -> None:
    if xq.ndim < 2 or xj.ndim < 2:
        raise ShapeError(f"feature maps must be M×T, got {xq.shape} and {xj.shape}")
    if xq.shape[-2] != xj.shape[-2]:
        raise ShapeError(f"channel mismatch between feature maps {xq.shape} and {xj.shape}")


def distance(a, b, kind: str = "inner_product") -> Tensor:
    """Similarity of vectors along the last axis; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"vector length mismatch: {a.shape} vs {b.shape}")
    kind = distance_kind(kind)
    if kind == "inner_product":
        return (a * b).sum(axis=-1)
    if kind == "neg_euclidean":
        d = a - b
        return -(d * d).sum(axis=-1)
    na = (a * a).sum(axis=-1)
    nb = (b * b).sum(axis=-1)
    if not (np.all(na.data > 0) and np.all(nb.data > 0)):
        raise ValueError("cosine similarity is undefined for a zero vector")
    return (a * b).sum(axis=-1) / T.sqrt(na * nb)


def pool(x, mode: str = "avg") -> Tensor:
    """Aggregate an ``M×T`` map over time into an ``M`` vector."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-1] < 1:
        raise ShapeError(f"pool expects an M×T map with T >= 1, got {x.shape}")
    if mode == "avg":
        return x.mean(axis=-1)
    if mode == "max":
        return x.max(axis=-1)
    raise ValueError(f"unknown pooling mode {mode!r}")


def sim_pooled(xq, xj, pooling: str = "avg", dist: str = "inner_product") -> Tensor:
    xq, xj = as_tensor(xq), as_tensor(xj)
    _check_maps(xq, xj)
    return distance(pool(xq, pooling), pool(xj, pooling), dist)


def second_order(xq, xj) -> Tensor:
    """Segment-by-segment inner products ``X_q^T X_j`` (``T_q×T_j``)."""
    xq, xj = as_tensor(xq), as_tensor(xj)
    _check_maps(xq, xj)
    return T.matmul(xq.transpose(), xj)


def reduce_second_order(mat, mode: str = "mean") -> Tensor:
    mat = as_tensor(mat)
    if mode == "mean":
        return mat.mean(axis=(-2, -1))
    if mode == "sum":
        return mat.sum(axis=(-2, -1))
    raise ValueError(f"unknown second-order reduction {mode!r}")


def sim_second_order(xq, xj, reduction: str = "mean") -> Tensor:
    return reduce_second_order(second_order(xq, xj), reduction)


def _check_attention(x: Tensor, a: Tensor, which: str) -> None:
    if a.shape[-1] != x.shape[-1]:
        raise ShapeError(f"attention {which} has length {a.shape[-1]} but the feature map has T={x.shape[-1]}")


def attended(x, a) -> Tensor:
    """The attended vector ``X A`` for an ``M×T`` map and a length-``T`` attention."""
    x, a = as_tensor(x), as_tensor(a)
    _check_attention(x, a, "vector")
    return T.matmul(x, a.reshape(a.shape + (1,))).reshape(x.shape[:-1])


def sim_attentional(xq, xj, aq, aj, dist: str = "inner_product") -> Tensor:
    """``dist(X_q A_q, X_j A_j)``: the factorized attentional similarity."""
    xq, xj, aq, aj = map(as_tensor, (xq, xj, aq, aj))
    _check_maps(xq, xj)
    _check_attention(xq, aq, "A_q")
    _check_attention(xj, aj, "A_j")
    return distance(attended(xq, aq), attended(xj, aj), dist)


def sim_attentional_trace(xq, xj, aq, aj) -> Tensor:
    """``A_q^T (X_q^T X_j) A_j`` through the explicit ``T_q×T_j`` matrix."""
    xq, xj, aq, aj = map(as_tensor, (xq, xj, aq, aj))
    _check_maps(xq, xj)
    _check_attention(xq, aq, "A_q")
    _check_attention(xj, aj, "A_j")
    mat = second_order(xq, xj)
    left = T.matmul(aq.reshape(aq.shape[:-1] + (1, aq.shape[-1])), mat)
    return T.matmul(left, aj.reshape(aj.shape + (1,))).reshape(mat.shape[:-2])


def rank_one_weight(aq, aj) -> Tensor:
    """``W = A_j A_q^T`` (``T_j×T_q``)."""
    aq, aj = as_tensor(aq), as_tensor(aj)
    return T.matmul(aj.reshape(aj.shape + (1,)), aq.reshape(aq.shape[:-1] + (1, aq.shape[-1])))


def sim_weighted_second_order(xq, xj, weight) -> Tensor:
    """``Tr(X_q^T X_j W)`` for a full ``T_j×T_q`` weight matrix."""
    mat = second_order(xq, xj)
    weight = as_tensor(weight)
    if weight.shape[-2:] != (mat.shape[-1], mat.shape[-2]):
        raise ShapeError(f"weight must be {mat.shape[-1]}×{mat.shape[-2]}, got {weight.shape}")
    # Tr(M W) == sum(M * W^T)
    return (mat * weight.transpose()).sum(axis=(-2, -1))


def similarity(head: SimilarityHead, xq, xj, aq=None, aj=None) -> Tensor:
    """Score one pair of feature maps with the configured head."""
    if head.kind == "pooled":
        return sim_pooled(xq, xj, head.pooling, head.distance)
    if head.kind == "second_order":
        return sim_second_order(xq, xj, head.reduction)
    if aq is None or aj is None:
        raise ValueError("attentional similarity needs attention vectors for both inputs")
    return sim_attentional(xq, xj, aq, aj, head.distance)
