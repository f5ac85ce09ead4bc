"""Training losses: per-query reconstruction terms plus a divergence that
pulls the context-conditioned latent toward the target-conditioned one.

The divergence defaults to the exact 2-Wasserstein distance between diagonal
Gaussians, sqrt(|mu_a - mu_b|^2 + |sigma_a - sigma_b|^2); a sampled
entropy-regularized transport estimate and the analytic Gaussian KL are
available as alternatives.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .engine import (
    DimensionError,
    NumericError,
    Tensor,
    absolute,
    add,
    clip,
    div,
    log,
    mul,
    repeat_rows,
    sqrt,
    tmean,
    tsum,
)
from .numerics import pairwise_sq_dists, sinkhorn_value
from .dynamics import LatentState, sample_z

__all__ = [
    "PROB_CLIP",
    "LossReport",
    "nll_bce",
    "nll_mae",
    "gaussian_w2",
    "gaussian_kl",
    "sampled_transport_w",
    "divergence_term",
    "total_loss",
]

PROB_CLIP = 1e-7


@dataclasses.dataclass
class LossReport:
    nll: float
    wass: float
    total: float
    per_query: np.ndarray


def _target_matrix(shape, targets, values) -> np.ndarray:
    out = np.zeros(shape)
    rows = np.arange(shape[0])
    cols = np.asarray(targets, dtype=np.int64) - 1   # dense item -> column
    if (cols < 0).any() or (cols >= shape[1]).any():
        raise DimensionError("target item index outside the catalog")
    out[rows, cols] = values
    return out


def nll_bce(y: Tensor, target_items) -> Tensor:
    """Binary cross-entropy against one positive item per query, averaged
    over the catalog. Probabilities are clipped to [1e-7, 1 - 1e-7].

    ``y`` is [m, |I|] (or a single vector with a scalar target); returns the
    per-query loss vector.
    """
    single = y.ndim == 1
    if single:
        y = _as_row(y)
        target_items = [int(target_items)]
    labels = Tensor(_target_matrix(y.shape, target_items, 1.0))
    p = clip(y, PROB_CLIP, 1.0 - PROB_CLIP)
    one_m = add(mul(p, -1.0), 1.0)
    ll = add(mul(labels, log(p)), mul(add(mul(labels, -1.0), 1.0), log(one_m)))
    per_query = mul(tmean(ll, axis=1), -1.0)
    return per_query


def nll_mae(y: Tensor, target_items, target_ratings) -> Tensor:
    """Mean absolute error against a catalog-wide target that is zero except
    for the observed rating at the next item."""
    single = y.ndim == 1
    if single:
        y = _as_row(y)
        target_items = [int(target_items)]
        target_ratings = [float(target_ratings)]
    targets = Tensor(_target_matrix(y.shape, target_items,
                                    np.asarray(target_ratings, dtype=np.float64)))
    return tmean(absolute(add(y, mul(targets, -1.0))), axis=1)


def _as_row(y: Tensor) -> Tensor:
    from .engine import reshape
    return reshape(y, (1, y.shape[0]))


_SQRT_FLOOR = 1e-24


def _safe_sqrt(s: Tensor) -> Tensor:
    """sqrt with a bounded slope at the origin.

    sqrt's derivative blows up as the argument approaches 0, and identical
    distributions do reach exactly 0 here (duplicate context windows), so
    the plain op would feed inf into the backward pass. Writing the value
    as s/sqrt(max(s, floor)) keeps sqrt(0) = 0 exact while capping the
    slope at 1/sqrt(floor).
    """
    return div(s, sqrt(clip(s, _SQRT_FLOOR, np.inf)))


def gaussian_w2(mu_a: Tensor, sigma_a: Tensor, mu_b: Tensor,
                sigma_b: Tensor) -> Tensor:
    """Exact 2-Wasserstein distance between diagonal Gaussians."""
    dmu = add(mu_a, mul(mu_b, -1.0))
    dsg = add(sigma_a, mul(sigma_b, -1.0))
    return _safe_sqrt(add(tsum(mul(dmu, dmu)), tsum(mul(dsg, dsg))))


def gaussian_kl(mu_t: Tensor, sigma_t: Tensor, mu_c: Tensor,
                sigma_c: Tensor) -> Tensor:
    """KL(target || context) for diagonal Gaussians."""
    dmu = add(mu_t, mul(mu_c, -1.0))
    var_c = mul(sigma_c, sigma_c)
    quad = mul(add(mul(sigma_t, sigma_t), mul(dmu, dmu)), 0.5)
    terms = add(add(log(sigma_c), mul(log(sigma_t), -1.0)),
                add(mul(quad, _recip(var_c)), -0.5))
    return tsum(terms)


def _recip(t: Tensor) -> Tensor:
    from .engine import div
    return div(Tensor(np.ones(())), t)


def sampled_transport_w(state_t: LatentState, state_c: LatentState,
                        n_samples: int, lam: float, iters: int,
                        rng: np.random.Generator) -> Tensor:
    """Monte-Carlo transport distance: draw reparameterized samples from both
    Gaussians, build the squared-distance cost, run the regularized transport
    iteration on the tape, and take the square root of the cost."""
    d = state_t.mu.shape[0]
    # sample_z insists on eps matching its parameters exactly, so tile the
    # Gaussians to one row per draw; the tile sums gradients back over rows
    x = sample_z(repeat_rows(state_t.mu, n_samples),
                 repeat_rows(state_t.sigma, n_samples),
                 rng.standard_normal((n_samples, d)))
    y = sample_z(repeat_rows(state_c.mu, n_samples),
                 repeat_rows(state_c.sigma, n_samples),
                 rng.standard_normal((n_samples, d)))
    weights = np.full(n_samples, 1.0 / n_samples)
    value = sinkhorn_value(weights, weights, pairwise_sq_dists(x, y), lam, iters)
    return _safe_sqrt(value)


def divergence_term(state_t: LatentState, state_c: LatentState, kind: str,
                    sinkhorn_cfg: dict | None = None,
                    rng: np.random.Generator | None = None) -> Tensor:
    if kind == "w2":
        return gaussian_w2(state_t.mu, state_t.sigma, state_c.mu, state_c.sigma)
    if kind == "kl":
        return gaussian_kl(state_t.mu, state_t.sigma, state_c.mu, state_c.sigma)
    if kind == "sinkhorn":
        cfg = sinkhorn_cfg or {}
        return sampled_transport_w(
            state_t, state_c,
            n_samples=int(cfg.get("samples", 64)),
            lam=float(cfg.get("lam", 0.05)),
            iters=int(cfg.get("iters", 100)),
            rng=rng if rng is not None else np.random.default_rng(0))
    raise ValueError(f"unknown divergence kind {kind!r}")


def total_loss(per_query_nll: Tensor, divergence: Tensor | None) -> tuple[LossReport, Tensor]:
    """Combine reconstruction and divergence; returns the report (floats) and
    the scalar tensor to differentiate."""
    nll = tmean(per_query_nll)
    total = nll if divergence is None else add(nll, divergence)
    values = (float(nll.item()),
              0.0 if divergence is None else float(divergence.item()))
    if not np.isfinite(values).all():
        raise NumericError(f"non-finite loss components nll={values[0]} div={values[1]}")
    report = LossReport(nll=values[0], wass=values[1],
                        total=values[0] + values[1],
                        per_query=per_query_nll.data.copy())
    return report, total
