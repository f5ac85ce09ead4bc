"""Differentiable numeric kernels: attention, dilated convolution, small MLPs,
and entropy-regularized transport.

Weight matrices follow the row convention (inputs on the left, ``x @ W``),
so a map from d_in to d_out is stored as [d_in, d_out].
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .engine import (
    DimensionError,
    NumericError,
    Tensor,
    add,
    as_tensor,
    concat,
    exp,
    log,
    logsumexp,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    sqrt,
    take_rows,
    tmax,
    transpose,
    tsum,
)

__all__ = [
    "sdpa",
    "dilated_conv",
    "conv_out_len",
    "mlp2",
    "SinkhornResult",
    "sinkhorn",
    "sinkhorn_value",
    "pairwise_sq_dists",
]


def sdpa(q, k, v, return_weights: bool = False):
    """Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.

    q is [m, d] (or a single 1-D query), k is [n, d], v is [n, d_v]. The
    scale comes from q's feature width. Attention weights form a row-
    stochastic matrix; pass ``return_weights`` to get them back alongside
    the mixed values.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    single = q.ndim == 1
    if single:
        q = reshape(q, (1, q.shape[0]))
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("sdpa expects 2-D q, k, v")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"{k.shape[0]} keys but {v.shape[0]} values")
    scale = 1.0 / np.sqrt(q.shape[1])
    weights = softmax(mul(matmul(q, transpose(k)), scale), axis=-1)
    out = matmul(weights, v)
    if single:
        out = reshape(out, (out.shape[1],))
        weights = reshape(weights, (weights.shape[1],))
    if return_weights:
        return out, weights
    return out


def conv_out_len(length: int, h: int, s: int) -> int:
    return length - (h - 1) * (s + 1)


def dilated_conv(p, kernel, s: int) -> Tensor:
    """Temporal convolution with gap ``s`` between kernel taps.

    p is [L, d]; kernel is [h, d, c]. Tap ``a`` of the kernel reads position
    t + a*(s+1), so the receptive field spans (h-1)*(s+1)+1 steps and the
    output has length L - (h-1)*(s+1), channels c.
    """
    p, kernel = as_tensor(p), as_tensor(kernel)
    if p.ndim != 2 or kernel.ndim != 3:
        raise DimensionError("dilated_conv expects p [L, d] and kernel [h, d, c]")
    length, d = p.shape
    h, kd, channels = kernel.shape
    if kd != d:
        raise DimensionError(f"kernel feature width {kd} != input width {d}")
    if s < 0:
        raise ValueError("dilation gap must be >= 0")
    t_out = conv_out_len(length, h, s)
    if t_out < 1:
        raise DimensionError(
            f"kernel of size {h} at gap {s} does not fit a length-{length} input"
        )
    taps = np.arange(t_out)[:, None] + np.arange(h)[None, :] * (s + 1)
    patches = take_rows(p, taps.ravel())          # [t_out*h, d]
    patches = reshape(patches, (t_out, h * d))
    flat_kernel = reshape(kernel, (h * d, channels))
    return matmul(patches, flat_kernel)


def mlp2(x, w_h, b_h, w_o, b_o) -> Tensor:
    """Two-layer perceptron: relu(x @ w_h + b_h) @ w_o + b_o."""
    hidden = relu(add(matmul(x, w_h), b_h))
    return add(matmul(hidden, w_o), b_o)


@dataclasses.dataclass
class SinkhornResult:
    value: float
    marginal_error: float
    converged: bool
    warning: str | None = None


def _check_weights(w, name: str) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise DimensionError(f"{name} must be 1-D")
    if (w < 0.0).any():
        raise ValueError(f"{name} has negative mass")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} must sum to 1 (got {w.sum():.12f})")
    return w


def sinkhorn(a, b, cost, lam: float, iters: int, absorb_every: int = 20) -> SinkhornResult:
    """Entropy-regularized transport cost between two weighted point sets.

    Runs ``iters`` alternating Sinkhorn scalings and returns <plan, cost>
    together with the worst marginal residual; a residual above 1e-2 flags
    non-convergence on the result. The scalings run as plain matrix-vector
    products against a kernel recentered by log-domain potentials, with the
    accumulated factors absorbed back into the potentials every
    ``absorb_every`` sweeps (and whenever they threaten over/underflow), so
    the sequence of effective scalings is the textbook log-domain iteration
    while the per-sweep cost stays at two BLAS matvecs.
    """
    a = _check_weights(a, "a")
    b = _check_weights(b, "b")
    cost_arr = np.asarray(cost, dtype=np.float64)
    if cost_arr.shape != (a.shape[0], b.shape[0]):
        raise DimensionError(
            f"cost shape {cost_arr.shape} does not match weights ({a.shape[0]}, {b.shape[0]})"
        )
    if not np.isfinite(cost_arr).all():
        raise NumericError("cost matrix has non-finite entries")
    if lam <= 0.0:
        raise ValueError("regularization strength must be positive")
    if iters < 1:
        raise ValueError("iteration count must be >= 1")

    m, n = cost_arr.shape
    a_pos = a > 0.0
    b_pos = b > 0.0
    # seeding the row potential with the row minimum keeps every kernel row
    # representable at small lam; it only re-splits potential between f and
    # the scaling vector, leaving the iterate sequence unchanged
    f = np.where(a_pos, cost_arr.min(axis=1), -np.inf)
    with np.errstate(divide="ignore"):
        g = np.where(b_pos, 0.0, -np.inf)
    u = np.ones(m)
    v = np.ones(n)
    floor = 1e-280  # denominators below this would push scalings near overflow

    def kernel():
        z = f[:, None] + g[None, :]
        z -= cost_arr
        z /= lam
        np.minimum(z, 60.0, out=z)
        return np.exp(z, out=z)

    def absorb():
        nonlocal f, g, u, v, k_mat
        with np.errstate(divide="ignore"):
            f = f + lam * np.log(u)
            g = g + lam * np.log(v)
        u = np.ones(m)
        v = np.ones(n)
        k_mat = kernel()

    def scale(mass, pos, denom):
        # absorb() already ran if denom had underflowed rows; the floor only
        # guards rows that stay degenerate, and the marginal residual reports
        # the damage instead of the iteration poisoning itself with inf
        return np.where(pos, mass / np.maximum(denom, floor), 0.0)

    k_mat = kernel()
    for it in range(iters):
        kv = k_mat @ v
        if (a_pos & (kv < floor)).any():
            absorb()
            kv = k_mat @ v
        u = scale(a, a_pos, kv)
        ku = k_mat.T @ u
        if (b_pos & (ku < floor)).any():
            absorb()
            ku = k_mat.T @ u
        v = scale(b, b_pos, ku)
        drifted = max(u.max(initial=0.0), v.max(initial=0.0)) > 1e30
        if drifted or (it + 1) % absorb_every == 0 or it == iters - 1:
            absorb()

    plan = k_mat  # u = v = 1 right after the final absorb
    value = float((plan * cost_arr).sum())
    residual = max(
        float(np.abs(plan.sum(axis=1) - a).max()),
        float(np.abs(plan.sum(axis=0) - b).max()),
    )
    converged = residual <= 1e-2
    warning = None if converged else (
        f"marginal residual {residual:.3e} after {iters} iterations"
    )
    return SinkhornResult(value=value, marginal_error=residual, converged=converged,
                          warning=warning)


def sinkhorn_value(a, b, cost: Tensor, lam: float, iters: int) -> Tensor:
    """Differentiable transport cost: same iteration as ``sinkhorn`` but the
    cost matrix is a Tensor and the loop is unrolled onto the tape.

    Weights a and b are plain probability vectors (usually uniform); the
    gradient flows through the cost matrix only.
    """
    a = _check_weights(a, "a")
    b = _check_weights(b, "b")
    cost = as_tensor(cost)
    if cost.shape != (a.shape[0], b.shape[0]):
        raise DimensionError("cost shape does not match weights")
    if lam <= 0.0:
        raise ValueError("regularization strength must be positive")
    log_a = Tensor(np.log(a))
    log_b = Tensor(np.log(b))
    log_k = mul(cost, -1.0 / lam)
    log_u = Tensor(np.zeros_like(a))
    log_v = Tensor(np.zeros_like(b))
    for _ in range(iters):
        log_u = sub_t(log_a, logsumexp(add(log_k, reshape(log_v, (1, b.shape[0]))), axis=1))
        log_v = sub_t(log_b, logsumexp(add(log_k, reshape(log_u, (a.shape[0], 1))), axis=0))
    log_plan = add(add(reshape(log_u, (a.shape[0], 1)), log_k),
                   reshape(log_v, (1, b.shape[0])))
    plan = exp(log_plan)
    return tsum(mul(plan, cost))


def sub_t(a, b):
    return add(a, mul(b, -1.0))


def pairwise_sq_dists(x: Tensor, y: Tensor) -> Tensor:
    """Squared Euclidean distance matrix between row sets x [m,d] and y [n,d]."""
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise DimensionError("pairwise_sq_dists expects row sets of equal width")
    xx = tsum(mul(x, x), axis=1, keepdims=True)            # [m, 1]
    yy = reshape(tsum(mul(y, y), axis=1), (1, y.shape[0]))  # [1, n]
    xy = matmul(x, transpose(y))                            # [m, n]
    d2 = add(add(xx, yy), mul(xy, -2.0))
    # tiny negatives from cancellation would poison sqrt downstream
    return relu(d2)
