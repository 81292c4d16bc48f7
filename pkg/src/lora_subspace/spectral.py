"""Spectra of weighted mixtures, gap detection and rank allocation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from lora_subspace.errors import InvalidInput
from lora_subspace.linalg import ZERO_CUTOFF, FactoredMatrix, as_matrix, factored_svd, zero_small
from lora_subspace.model import LayerKey, SharedSubspace

DEFAULT_MIN_RATIO = 0.1
# floor(ratio) must not drop a layer whose ratio is 1 up to rounding
_FLOOR_SLACK = 1e-12


class Pattern(str, enum.Enum):
    DROP_AT_R = "drop_at_r"
    DROP_BEYOND_R = "drop_beyond_r"
    TWO_DROPS = "two_drops"
    NO_DROP = "no_drop"


@dataclass(frozen=True, eq=False)
class SpectrumReport:
    layer: LayerKey | None
    sigma: np.ndarray
    gap_index: int | None
    pattern: Pattern
    low_rank_ratio: float
    r: int
    d: int

    @property
    def sigma_max(self) -> float:
        return float(self.sigma[0]) if self.sigma.size else 0.0

    @property
    def log10_sigma(self) -> list[float | None]:
        return [math.log10(v) if v > 0 else None for v in self.sigma]

    def to_json(self) -> dict:
        return {
            "layer": None if self.layer is None else str(self.layer),
            "r": self.r,
            "d": self.d,
            "sigma": [float(v) for v in self.sigma],
            "log10_sigma": self.log10_sigma,
            "gap_index": self.gap_index,
            "pattern": self.pattern.value,
            "sigma_max": self.sigma_max,
            "low_rank_ratio": self.low_rank_ratio,
        }


def _checked(sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(sigma)) or np.any(sigma < 0):
        raise InvalidInput("singular values must be finite and non-negative")
    if np.any(np.diff(sigma) > 0):
        raise InvalidInput("singular values must be non-increasing")
    return sigma


def detect_gaps(sigma, min_ratio: float = DEFAULT_MIN_RATIO) -> list[int]:
    """Every 1-based ``i`` with ``sigma[i+1] / sigma[i] < min_ratio``.

    Only positions whose ``sigma[i]`` is above the zero cutoff count; a drop
    from a nonzero value to an exact zero is a gap.
    """
    sigma = _checked(sigma)
    if sigma.size < 2 or sigma[0] == 0.0:
        return []
    live = sigma > ZERO_CUTOFF * sigma[0]
    gaps = []
    for i in range(sigma.size - 1):
        if not live[i]:
            break
        nxt = sigma[i + 1] if live[i + 1] else 0.0
        if nxt < min_ratio * sigma[i]:
            gaps.append(i + 1)
    return gaps


def detect_gap(sigma, min_ratio: float = DEFAULT_MIN_RATIO) -> int | None:
    gaps = detect_gaps(sigma, min_ratio)
    return gaps[0] if gaps else None


def classify_pattern(sigma, r: int, min_ratio: float = DEFAULT_MIN_RATIO) -> Pattern:
    gaps = detect_gaps(sigma, min_ratio)
    if len(gaps) >= 2:
        return Pattern.TWO_DROPS
    if len(gaps) == 1:
        if abs(gaps[0] - r) <= 1:
            return Pattern.DROP_AT_R
        if gaps[0] > r + 1:
            return Pattern.DROP_BEYOND_R
    return Pattern.NO_DROP


def low_rank_ratio(sigma, d: int) -> float:
    """``sigma_{2d} / sigma_max``; 0 when the spectrum is shorter than 2d."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if 2 * d > sigma.size or sigma.size == 0 or sigma[0] == 0.0:
        return 0.0
    return float(sigma[2 * d - 1] / sigma[0])


def spectrum(
    c: FactoredMatrix,
    layer: LayerKey | None,
    r: int,
    d: int,
    min_ratio: float = DEFAULT_MIN_RATIO,
) -> SpectrumReport:
    # the factored core only yields inner_dim values; the rest of C's spectrum is zero
    sigma = zero_small(factored_svd(c).sigma)
    sigma = np.concatenate([sigma, np.zeros(max(min(c.shape) - sigma.size, 0))])
    return SpectrumReport(
        layer=layer,
        sigma=sigma,
        gap_index=detect_gap(sigma, min_ratio),
        pattern=classify_pattern(sigma, r, min_ratio),
        low_rank_ratio=low_rank_ratio(sigma, d),
        r=r,
        d=d,
    )


def effective_rank(w) -> float:
    """``(||W||_F / ||W||_2)^2``."""
    w = as_matrix(w)
    sigma = np.linalg.svd(w, compute_uv=False)
    if sigma[0] == 0.0:
        raise InvalidInput("effective rank of a zero matrix is undefined")
    value = float(np.sum((sigma / sigma[0]) ** 2))
    return max(value, 1.0)


def allocate_ranks(
    eff_ranks: Sequence[float] | Mapping[str, float],
    d: int,
    clamp_min: int | None = None,
    strategy: str = "importance",
):
    """Per-layer subspace sizes ``d * floor(eff_rank / mean_eff_rank)``.

    The literal floor gives 0 to below-average layers; ``clamp_min`` lifts
    every allocation to at least that value. ``strategy="uniform"`` gives
    every layer ``d``. A mapping input yields a mapping with the same keys.
    """
    keys = list(eff_ranks) if isinstance(eff_ranks, Mapping) else None
    values = np.asarray(list(eff_ranks.values()) if keys is not None else eff_ranks, dtype=np.float64)
    if values.size == 0:
        raise InvalidInput("no layers to allocate")
    if d < 1:
        raise InvalidInput(f"budget must be positive, got {d}")
    if strategy == "uniform":
        out = [int(d)] * values.size
    elif strategy == "importance":
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise InvalidInput("effective ranks must be positive")
        ratios = values / values.mean()
        out = [int(d) * math.floor(x * (1.0 + _FLOOR_SLACK)) for x in ratios]
    else:
        raise InvalidInput(f"unknown strategy {strategy!r}")
    if clamp_min is not None:
        out = [max(v, int(clamp_min)) for v in out]
    return dict(zip(keys, out)) if keys is not None else out


def magnitude_curve(subspaces: Mapping[LayerKey, SharedSubspace]) -> dict[tuple[str, str, str], list[tuple[int, float]]]:
    """Largest singular value per layer index, grouped by (kind, scope, attribute)."""
    series: dict[tuple[str, str, str], list[tuple[int, float]]] = {}
    for key, sub in subspaces.items():
        sigma_max = float(np.max(sub.sigma)) if sub.sigma.size else 0.0
        series.setdefault((key.kind, key.scope, key.attribute), []).append((key.index, sigma_max))
    return {group: sorted(points) for group, points in sorted(series.items())}
