"""Preference decoding: combine the deterministic mixture, the latent sample,
and the query's own features into a dense query state, then score every
catalog item as an independent probability."""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np

from .engine import (
    DimensionError,
    Tensor,
    add,
    concat,
    logistic,
    matmul,
    relu,
)

__all__ = [
    "PreferenceVector",
    "reconstruct",
    "predict_preferences",
    "top_k",
]


@dataclasses.dataclass
class PreferenceVector:
    """Per-item probabilities in (0, 1), aligned so position j scores dense
    item j+1 (the padding index has no slot)."""
    y: np.ndarray
    user_index: int | None = None
    query_start: int | None = None


def reconstruct(r_d: Tensor, z: Tensor, f_q: Tensor, w_d: Tensor,
                b_d: Tensor) -> Tensor:
    """Query state d_q = relu([r_d || z || f_q] @ w_d + b_d).

    Accepts single vectors or aligned batches ([m, .] each).
    """
    parts = (r_d, z, f_q)
    dims = {p.ndim for p in parts}
    if len(dims) != 1 or dims.pop() not in (1, 2):
        raise DimensionError("r_d, z and f_q must all be 1-D or all 2-D")
    axis = 0 if r_d.ndim == 1 else 1
    joined = concat(parts, axis=axis)
    if joined.shape[-1] != w_d.shape[0]:
        raise DimensionError(
            f"decoder input width {joined.shape[-1]} != weight rows {w_d.shape[0]}")
    return relu(add(matmul(joined, w_d), b_d))


def predict_preferences(d_q: Tensor, e_u: Tensor, w_p: Tensor,
                        b_p: Tensor) -> Tensor:
    """Catalog-wide probabilities logistic([d_q || e_u] @ w_p + b_p)."""
    if d_q.ndim != e_u.ndim:
        raise DimensionError("query state and user embedding ranks differ")
    axis = 0 if d_q.ndim == 1 else 1
    return logistic(add(matmul(concat((d_q, e_u), axis=axis), w_p), b_p))


def top_k(y, k: int, exclude=()) -> np.ndarray:
    """Top-k dense item indices by probability, descending.

    Ties break toward the smaller item index. ``exclude`` removes items
    (typically the query window) before ranking. Asking for more items than
    remain clamps with a warning.
    """
    if isinstance(y, PreferenceVector):
        y = y.y
    elif isinstance(y, Tensor):
        y = y.data
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise DimensionError("top_k expects a single preference vector")
    if k < 1:
        raise ValueError("k must be >= 1")
    items = np.arange(1, y.shape[0] + 1, dtype=np.int64)
    drop = {int(e) for e in exclude}
    drop.discard(0)
    if drop:
        keep = np.array([i not in drop for i in items])
        items = items[keep]
        y = y[keep]
    if k > items.shape[0]:
        warnings.warn(
            f"requested top {k} of {items.shape[0]} rankable items; clamping")
        k = items.shape[0]
    order = np.lexsort((items, -y))
    return items[order[:k]]
