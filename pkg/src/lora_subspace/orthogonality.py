"""Overlap between low-rank updates ``S = a b^T`` of equal shape.

The distance between two updates is

    d(S, S') = min_{x, x'} ||S x - S' x'||^2 / (||S x||^2 + ||S' x'||^2)

which is 0 when the column spaces share a direction and 1 when they are
orthogonal. With ``S x = a (b^T x)`` and ``b`` of full column rank, ``y = b^T x``
ranges over all of R^d, so the minimisation reduces to the 2d x 2d pencil

    [ a'a   -a'a2 ] [y ]          [ a'a    0   ] [y ]
    [ -a2'a  a2'a2] [y2] = lambda [  0   a2'a2 ] [y2]

whose smallest eigenvalue is d(S, S'). Only Gram matrices of the factors
are formed, so the cost is O(d^2 (n + m)).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from lora_subspace.errors import DimensionError, InvalidInput
from lora_subspace.linalg import FactoredMatrix, factored_svd, gen_eig_smallest, zero_small
from lora_subspace.model import LayerKey, SharedSubspace

DEFAULT_THRESHOLD = 0.5
CANONICAL_TOL = 1e-8
RANGE_SLACK = 1e-8


@dataclass(frozen=True, eq=False)
class OverlapReport:
    pair: tuple[str, str]
    lambdas: np.ndarray
    raw_lambdas: np.ndarray
    threshold: float = DEFAULT_THRESHOLD
    shift: float = 0.0
    layer: str | None = None

    @property
    def min_lambda(self) -> float:
        return float(self.lambdas[0])

    @property
    def disentangled(self) -> bool:
        return self.min_lambda >= self.threshold

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "pair": list(self.pair),
            "lambdas": [float(v) for v in self.lambdas],
            "min_lambda": self.min_lambda,
            "disentangled": self.disentangled,
            "threshold": self.threshold,
            "shift": self.shift,
        }


def canonicalize(a, b) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gauge-fixed factors ``U S^1/2, V S^1/2`` of the product ``a b^T``."""
    f = FactoredMatrix(a, b)
    n, m = f.shape
    d = f.inner_dim
    if d > min(n, m):
        raise DimensionError(f"factor width {d} exceeds min(n, m) = {min(n, m)}")
    u, sigma, v = factored_svd(f, d)
    sigma = zero_small(sigma)
    root = np.sqrt(sigma)
    return u * root, v * root, sigma


def is_canonical(a: np.ndarray, b: np.ndarray, tol: float = CANONICAL_TOL) -> bool:
    ga = a.T @ a
    gb = b.T @ b
    scale = max(float(np.max(np.abs(ga))), np.finfo(float).tiny)
    off = ga - np.diag(np.diag(ga))
    return (
        np.max(np.abs(off)) <= tol * scale
        and np.max(np.abs(ga - gb)) <= tol * scale
        and bool(np.all(np.diff(np.diag(ga)) <= tol * scale))
    )


def _factors(s) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(s, SharedSubspace):
        return s.a, s.b
    a, b = s
    return np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)


def _active_columns(s) -> np.ndarray:
    a, b = _factors(s)
    if not is_canonical(a, b):
        a, b, _ = canonicalize(a, b)
    sigma = zero_small(np.sum(a * a, axis=0))
    return a[:, sigma > 0]


def subspace_overlap(s, s_prime, threshold: float = DEFAULT_THRESHOLD, labels=("S", "S'"), layer=None) -> OverlapReport:
    """Generalized-eigenvalue overlap of two updates given as factor pairs.

    ``lambdas`` holds the ``max(d, d')`` smallest eigenvalues of the pencil,
    which are the ones inside [0, 1]; the remaining eigenvalues mirror them
    around 1 and carry no extra information.
    """
    a1, b1 = _factors(s)
    a2, b2 = _factors(s_prime)
    if a1.shape[0] != a2.shape[0] or b1.shape[0] != b2.shape[0]:
        raise DimensionError(
            f"updates have different shapes: {(a1.shape[0], b1.shape[0])} vs {(a2.shape[0], b2.shape[0])}"
        )
    x1 = _active_columns((a1, b1))
    x2 = _active_columns((a2, b2))
    d1, d2 = x1.shape[1], x2.shape[1]
    if d1 == 0 and d2 == 0:
        raise InvalidInput("both updates are zero")
    if d1 == 0 or d2 == 0:
        # S x - S' x' collapses to the nonzero side: the ratio is identically 1
        ones = np.ones(max(d1, d2))
        return OverlapReport(tuple(labels), ones, ones.copy(), threshold, 0.0, layer)

    g11 = x1.T @ x1
    g12 = x1.T @ x2
    g22 = x2.T @ x2
    p = np.block([[g11, -g12], [-g12.T, g22]])
    q = np.block([[g11, np.zeros((d1, d2))], [np.zeros((d2, d1)), g22]])
    raw, _, shift = gen_eig_smallest(p, q, max(d1, d2))
    clipped = np.clip(raw, 0.0, 1.0)
    return OverlapReport(tuple(labels), clipped, raw, threshold, shift, layer)


def pairwise_overlap(subspaces: Mapping, threshold: float = DEFAULT_THRESHOLD) -> list[OverlapReport]:
    """One report per unordered pair of distinct attributes within each layer.

    Keys are either LayerKeys (grouped by physical slot) or plain attribute
    labels for a single layer. Output is ordered by slot, then attribute pair.
    """
    groups: dict[str | None, dict[str, object]] = {}
    for key, sub in subspaces.items():
        if isinstance(key, LayerKey):
            groups.setdefault(key.slot, {})[key.attribute] = sub
        else:
            groups.setdefault(None, {})[str(key)] = sub
    reports = []
    for slot in sorted(groups, key=lambda s: (s is not None, s or "")):
        members = groups[slot]
        for x, y in itertools.combinations(sorted(members), 2):
            reports.append(subspace_overlap(members[x], members[y], threshold, (x, y), slot))
    return reports
