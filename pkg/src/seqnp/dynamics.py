"""Dual inference over a user's context windows.

The deterministic path cross-attends the query's features against the
context set (its own projection matrices, distinct from the encoder's) and
mixes the context representations by those weights. The latent path mean-
aggregates the context representations, maps them through a shared hidden
layer to a diagonal Gaussian, and samples with the reparameterization trick.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .engine import (
    DimensionError,
    Tensor,
    add,
    clip,
    logistic,
    matmul,
    mul,
    relu,
    tmean,
)
from .numerics import sdpa

__all__ = [
    "DeterministicContext",
    "LatentParams",
    "LatentState",
    "SIGMA_FLOOR",
    "SIGMA_SPAN",
    "deterministic_path",
    "latent_summary",
    "parameterize",
    "sample_z",
]

SIGMA_FLOOR = 0.1
SIGMA_SPAN = 0.9
_LOGISTIC_EPS = 1e-12  # keeps sigma strictly inside (0.1, 1.0) at saturation


@dataclasses.dataclass
class DeterministicContext:
    r_d: Tensor          # mixed context representation(s)
    weights: Tensor      # row-stochastic attention over the context set


@dataclasses.dataclass
class LatentParams:
    w_h: Tensor
    b_h: Tensor
    w_mu: Tensor
    b_mu: Tensor
    w_sigma: Tensor
    b_sigma: Tensor


@dataclasses.dataclass
class LatentState:
    mu: Tensor
    sigma: Tensor
    z: Tensor | None = None
    source: str = ""     # e.g. "target-sample", "context-mean"


def deterministic_path(f_ctx: Tensor, r_ctx: Tensor, f_q: Tensor,
                       w_q: Tensor, w_k: Tensor) -> DeterministicContext:
    """Query-conditioned mixture of context representations.

    ``f_q`` may be a single feature vector or a batch [m, feature_width];
    the result follows suit. Weights are softmax-normalized scaled dot
    products between projected query and projected context features.
    """
    if f_ctx.ndim != 2 or r_ctx.ndim != 2:
        raise DimensionError("context features and representations must be 2-D")
    if f_ctx.shape[0] != r_ctx.shape[0]:
        raise DimensionError(
            f"{f_ctx.shape[0]} context features vs {r_ctx.shape[0]} representations")
    out, weights = sdpa(matmul(f_q, w_q), matmul(f_ctx, w_k), r_ctx,
                        return_weights=True)
    return DeterministicContext(r_d=out, weights=weights)


def latent_summary(r_set: Tensor) -> Tensor:
    """Order-invariant aggregate: the mean over set rows."""
    if r_set.ndim != 2:
        raise DimensionError("latent_summary expects [m, width]")
    return tmean(r_set, axis=0)


def parameterize(r_l: Tensor, params: LatentParams) -> tuple[Tensor, Tensor]:
    """Map an aggregated representation to a diagonal Gaussian.

    One shared ReLU hidden layer feeds both heads. The scale head is squashed
    through a bounded map so every entry stays strictly inside
    (SIGMA_FLOOR, SIGMA_FLOOR + SIGMA_SPAN), i.e. (0.1, 1.0); zero input
    gives sigma = 0.55 everywhere.
    """
    hidden = relu(add(matmul(r_l, params.w_h), params.b_h))
    mu = add(matmul(hidden, params.w_mu), params.b_mu)
    squashed = clip(logistic(add(matmul(hidden, params.w_sigma), params.b_sigma)),
                    _LOGISTIC_EPS, 1.0 - _LOGISTIC_EPS)
    sigma = add(mul(squashed, SIGMA_SPAN), SIGMA_FLOOR)
    return mu, sigma


def sample_z(mu: Tensor, sigma: Tensor, eps: np.ndarray) -> Tensor:
    """Reparameterized draw z = mu + sigma * eps; gradients reach mu and
    sigma, never the noise."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mu.shape:
        raise DimensionError(f"noise shape {eps.shape} != mu shape {mu.shape}")
    return add(mu, mul(sigma, Tensor(eps)))
