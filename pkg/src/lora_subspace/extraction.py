"""Robust shared-subspace extraction by iteratively reweighted least squares.

The robust objective ``sum_i ||A B^T - A_i B_i^T||_F^alpha`` is minimised by
alternating two closed-form steps:

* fixed weights: the weighted problem is a best rank-d' approximation of the
  weighted mean ``C = sum_i w_i A_i B_i^T / sum_i w_i``, solved by truncated
  SVD with ``A = U S^1/2`` and ``B = V S^1/2``;
* fixed factors: ``w_i = (eps^2 + ||A B^T - A_i B_i^T||_F^2)^((alpha - 2) / 2)``.

``C`` is never materialised; it stays a factored matrix of inner dimension
``sum_i r_i``.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from lora_subspace.errors import DimensionError, InvalidInput
from lora_subspace.linalg import (
    FactoredMatrix,
    factored_svd,
    frob_dist_factored,
    frob_norm_factored,
    numerical_rank,
    zero_small,
)
from lora_subspace.model import ExtractionConfig, LayerKey, LoraAdapter, SharedSubspace

log = logging.getLogger(__name__)

EPSILON_SCALE = 1e-8


def _common_shape(adapters: Sequence[LoraAdapter]) -> tuple[int, int]:
    if len(adapters) == 0:
        raise InvalidInput("need at least one adapter")
    shape = adapters[0].shape
    for i, ad in enumerate(adapters):
        if ad.shape != shape:
            raise DimensionError(f"adapter {i} has shape {ad.shape}, expected {shape}")
    return shape


def weighted_mixture(adapters: Sequence[LoraAdapter], w) -> FactoredMatrix:
    """Weighted mean of the adapter updates as one factored matrix."""
    _common_shape(adapters)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.size != len(adapters):
        raise DimensionError(f"{w.size} weights for {len(adapters)} adapters")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise InvalidInput("weights must be finite and non-negative")
    total = float(w.sum())
    if total <= 0.0:
        raise InvalidInput("weights sum to zero")
    left = np.hstack([ad.a * (wi / total) for ad, wi in zip(adapters, w)])
    right = np.hstack([ad.b for ad in adapters])
    return FactoredMatrix(left, right)


def truncated_factorization(c: FactoredMatrix, d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Best rank-``d`` factors ``(U_d S_d^1/2, V_d S_d^1/2, sigma_d)`` of ``c``."""
    n, m = c.shape
    if not 1 <= d <= min(n, m):
        raise DimensionError(f"target dim {d} outside [1, {min(n, m)}]")
    u, sigma, v = factored_svd(c, d)
    sigma = zero_small(sigma)
    root = np.sqrt(sigma)
    return u * root, v * root, sigma


def residuals_sq(a, b, adapters: Sequence[LoraAdapter]) -> np.ndarray:
    approx = FactoredMatrix(a, b)
    return np.array([frob_dist_factored(approx, ad.factored()) ** 2 for ad in adapters])


def update_weights(residuals_sq, alpha: float, epsilon: float) -> np.ndarray:
    """IRLS weights ``1 / (eps^2 + res)^((2 - alpha) / 2)``."""
    res = np.asarray(residuals_sq, dtype=np.float64).reshape(-1)
    if np.any(res < 0) or not np.all(np.isfinite(res)):
        raise InvalidInput("squared residuals must be finite and non-negative")
    if not 0.0 < alpha <= 2.0:
        raise InvalidInput(f"alpha must lie in (0, 2], got {alpha}")
    if epsilon < 0:
        raise InvalidInput(f"epsilon must be non-negative, got {epsilon}")
    with np.errstate(divide="ignore"):
        w = 1.0 / (epsilon**2 + res) ** ((2.0 - alpha) / 2.0)
    if not np.all(np.isfinite(w)):
        raise InvalidInput("zero residual with epsilon = 0 gives an infinite weight")
    return w


def objective(a, b, adapters: Sequence[LoraAdapter], alpha: float) -> float:
    """Robust objective ``sum_i ||a b^T - A_i B_i^T||_F^alpha`` in factored form."""
    shape = _common_shape(adapters)
    approx = FactoredMatrix(a, b)
    if approx.shape != shape:
        raise DimensionError(f"factors describe {approx.shape}, adapters are {shape}")
    return float(sum(frob_dist_factored(approx, ad.factored()) ** alpha for ad in adapters))


def default_epsilon(adapters: Sequence[LoraAdapter]) -> float:
    mean_norm = float(np.mean([frob_norm_factored(ad.factored()) for ad in adapters]))
    return EPSILON_SCALE * mean_norm if mean_norm > 0 else EPSILON_SCALE


def irls_extract(
    adapters: Sequence[LoraAdapter],
    config: ExtractionConfig,
    layer: LayerKey | None = None,
) -> SharedSubspace:
    """Extract the shared rank-d' subspace of ``adapters``.

    Starts from unit weights. With ``alpha == 2`` the weights never change,
    so exactly one SVD step is taken. Otherwise the loop stops after
    ``max_iters`` steps or once the objective changes by less than
    ``rel_tol`` relative to its previous value.
    """
    adapters = list(adapters)
    n, m = _common_shape(adapters)
    d = config.target_dim
    if d > min(n, m):
        raise DimensionError(f"target dim {d} exceeds min(n, m) = {min(n, m)}")
    k = len(adapters)
    eps = config.epsilon if config.epsilon is not None else default_epsilon(adapters)
    alpha = config.alpha

    w = np.ones(k)
    trace: list[float] = []
    for _ in range(config.max_iters):
        used = w
        a, b, sigma = truncated_factorization(weighted_mixture(adapters, used), d)
        res = residuals_sq(a, b, adapters)
        trace.append(float(np.sum(res ** (alpha / 2.0))))
        if alpha == 2.0 or trace[-1] == 0.0:
            break
        if len(trace) > 1 and abs(trace[-2] - trace[-1]) <= config.rel_tol * trace[-2]:
            break
        w = update_weights(res, alpha, eps)
        # rescaling leaves C unchanged and keeps the weights away from overflow
        w = w * (k / w.sum())

    deficient = numerical_rank(sigma) < d
    if deficient:
        log.warning("layer %s: target dim %d exceeds numerical rank of C", layer, d)
    return SharedSubspace(
        a=a,
        b=b,
        sigma=sigma,
        weights=used,
        objective_trace=tuple(trace),
        config=config,
        layer=layer,
        rank_deficient=deficient,
    )
