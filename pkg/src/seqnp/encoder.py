"""Short-term interest encoding: item/user embeddings, a bank of dilated
temporal convolutions at three gap sizes, and self-attention across a user's
windows.

For a window of length L and gap s, the bank holds floor((L+s)/(s+1))
kernels with heights 1..floor((L+s)/(s+1)); the tallest height h satisfies
(h-1)(s+1)+1 <= L, so every kernel fits. Each kernel's feature map is
max-pooled over time, the pooled vectors are averaged within a gap group,
and the group summaries are concatenated.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .engine import (
    DimensionError,
    Tensor,
    add,
    concat,
    matmul,
    mul,
    reshape,
    slice_cols,
    take_rows,
    tmax,
)
from .numerics import conv_out_len, dilated_conv, sdpa

__all__ = [
    "EmbeddingTables",
    "KernelBank",
    "kernel_plan",
    "init_embedding_arrays",
    "kernel_shapes",
    "stack_embeddings",
    "multiscale_features",
    "multiscale_features_batch",
    "self_attend",
]

DEFAULT_DILATIONS = (0, 1, 2)


@dataclasses.dataclass
class EmbeddingTables:
    """Item rows are 1..|I| with row 0 the frozen zero padding row."""
    item_table: Tensor     # [item_count + 1, dim]
    user_table: Tensor     # [user_count, dim]
    dim: int


def init_embedding_arrays(item_count: int, user_count: int, dim: int,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform init on [-1/sqrt(dim), 1/sqrt(dim)]; padding row zeroed."""
    if dim < 1 or item_count < 1 or user_count < 1:
        raise ValueError("embedding dimensions and counts must be >= 1")
    bound = 1.0 / np.sqrt(dim)
    items = rng.uniform(-bound, bound, size=(item_count + 1, dim))
    items[0] = 0.0
    users = rng.uniform(-bound, bound, size=(user_count, dim))
    return items, users


def kernel_plan(length: int, s: int) -> int:
    """Number of kernels at gap ``s`` for window length ``length``."""
    if length < 1 or s < 0:
        raise ValueError("need length >= 1 and gap >= 0")
    return (length + s) // (s + 1)


def kernel_shapes(length: int, dim: int, channels: int,
                  dilations=DEFAULT_DILATIONS) -> list[tuple[int, int, tuple[int, int, int]]]:
    """(gap, height, kernel shape) triples for the whole bank."""
    shapes = []
    for s in dilations:
        for h in range(1, kernel_plan(length, s) + 1):
            if conv_out_len(length, h, s) < 1:
                raise DimensionError(
                    f"kernel height {h} at gap {s} exceeds window {length}")
            shapes.append((s, h, (h, dim, channels)))
    return shapes


@dataclasses.dataclass
class KernelBank:
    length: int
    channels: int
    dilations: tuple[int, ...]
    kernels: dict[int, list[Tensor]]   # gap -> kernels ordered by height 1..n_s

    @property
    def feature_width(self) -> int:
        return len(self.dilations) * self.channels


def stack_embeddings(items: np.ndarray, tables: EmbeddingTables) -> Tensor:
    """Rows of the item table for one window; gradients reach exactly the
    referenced rows (scatter-add through the gather)."""
    items = np.asarray(items, dtype=np.int64)
    if items.min(initial=0) < 0 or items.max(initial=0) >= tables.item_table.shape[0]:
        raise IndexError("item index outside the embedding table")
    return take_rows(tables.item_table, items)


def multiscale_features(p: Tensor, bank: KernelBank) -> Tensor:
    """Feature vector for a single stacked window [L, dim]."""
    if p.ndim != 2 or p.shape[0] != bank.length:
        raise DimensionError(f"expected a [{bank.length}, d] window, got {p.shape}")
    groups = []
    for s in bank.dilations:
        pooled = None
        for kern in bank.kernels[s]:
            fmap = dilated_conv(p, kern, s)          # [T, channels]
            peak = tmax(fmap, axis=0)                # [channels]
            pooled = peak if pooled is None else add(pooled, peak)
        groups.append(mul(pooled, 1.0 / len(bank.kernels[s])))
    return concat(groups, axis=0)


def multiscale_features_batch(window_items: np.ndarray, item_table: Tensor,
                              bank: KernelBank) -> Tensor:
    """Features for m windows at once, [m, feature_width].

    Equivalent to stacking ``multiscale_features`` over rows (the batched
    gather reads item rows straight off the table), but with one
    gather/matmul/pool chain per kernel instead of per window and kernel.
    """
    window_items = np.asarray(window_items, dtype=np.int64)
    if window_items.ndim != 2 or window_items.shape[1] != bank.length:
        raise DimensionError("window batch must be [m, length]")
    m = window_items.shape[0]
    groups = []
    for s in bank.dilations:
        pooled = None
        for kern in bank.kernels[s]:
            h = kern.shape[0]
            t_out = conv_out_len(bank.length, h, s)
            taps = np.arange(t_out)[:, None] + np.arange(h)[None, :] * (s + 1)
            gathered = take_rows(item_table, window_items[:, taps].ravel())
            patches = reshape(gathered, (m * t_out, h * item_table.shape[1]))
            fmap = matmul(patches, reshape(kern, (h * item_table.shape[1],
                                                  bank.channels)))
            peak = tmax(reshape(fmap, (m, t_out, bank.channels)), axis=1)
            pooled = peak if pooled is None else add(pooled, peak)
        groups.append(mul(pooled, 1.0 / len(bank.kernels[s])))
    return concat(groups, axis=1)


def self_attend(f_set: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor,
                heads: int = 1) -> Tensor:
    """Attention across a user's windows: rows attend to rows.

    Permutation-equivariant (no positional terms); a single row passes
    through as its value projection.
    """
    if f_set.ndim != 2:
        raise DimensionError("self_attend expects [m, feature_width]")
    q = matmul(f_set, w_q)
    k = matmul(f_set, w_k)
    v = matmul(f_set, w_v)
    width = q.shape[1]
    if heads < 1 or width % heads:
        raise DimensionError(f"{heads} heads do not divide width {width}")
    if heads == 1:
        return sdpa(q, k, v)
    step = width // heads
    outs = []
    for i in range(heads):
        lo, hi = i * step, (i + 1) * step
        outs.append(sdpa(slice_cols(q, lo, hi), slice_cols(k, lo, hi),
                         slice_cols(v, lo, hi)))
    return concat(outs, axis=1)
