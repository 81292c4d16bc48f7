"""Reduced basis from several shared subspaces and the core-only update.

Within a basis ``(A_bar, B_bar)`` with orthonormal columns the weight update
is ``dW = A_bar @ M @ B_bar.T`` and only the D x D core ``M`` is trained.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from lora_subspace.errors import DimensionError, DivergenceError, InvalidInput
from lora_subspace.linalg import FactoredMatrix, as_matrix
from lora_subspace.model import SharedSubspace

log = logging.getLogger(__name__)

DROP_TOL = 1e-10
DIVERGENCE_LOSS = 1e12


@dataclass(frozen=True)
class BasisBlock:
    label: str
    dim: int
    a_cols: tuple[int, int]
    b_cols: tuple[int, int]

    def to_json(self) -> dict:
        return {"label": self.label, "dim": self.dim, "a_cols": list(self.a_cols), "b_cols": list(self.b_cols)}

    @classmethod
    def from_json(cls, data) -> BasisBlock:
        return cls(str(data["label"]), int(data["dim"]), tuple(data["a_cols"]), tuple(data["b_cols"]))


@dataclass(frozen=True, eq=False)
class SubspaceBasis:
    a_bar: np.ndarray
    b_bar: np.ndarray
    blocks: tuple[BasisBlock, ...] = ()
    slot: str | None = None
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        a_bar = as_matrix(self.a_bar, "a_bar")
        b_bar = as_matrix(self.b_bar, "b_bar")
        if a_bar.shape[1] != b_bar.shape[1]:
            raise DimensionError(f"a_bar has {a_bar.shape[1]} columns, b_bar has {b_bar.shape[1]}")
        object.__setattr__(self, "a_bar", a_bar)
        object.__setattr__(self, "b_bar", b_bar)
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "warnings", tuple(self.warnings))

    @property
    def dim(self) -> int:
        return self.a_bar.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.a_bar.shape[0], self.b_bar.shape[0])


def _extend_orthonormal(blocks: Sequence[np.ndarray], tol: float) -> tuple[np.ndarray, list[tuple[int, int]]]:
    # block Gram-Schmidt (two passes) followed by pivoted QR of each residual
    rows = blocks[0].shape[0]
    q = np.zeros((rows, 0))
    ranges = []
    for x in blocks:
        y = x - q @ (q.T @ x)
        y = y - q @ (q.T @ y)
        qy, ry, _ = scipy.linalg.qr(y, mode="economic", pivoting=True)
        keep = int(np.count_nonzero(np.abs(np.diag(ry)) > tol))
        start = q.shape[1]
        q = np.hstack([q, qy[:, :keep]])
        ranges.append((start, start + keep))
    return q, ranges


def assemble_basis(subspaces: Sequence[SharedSubspace], labels: Sequence[str] | None = None) -> SubspaceBasis:
    """Concatenate the subspaces' factors and orthonormalize each side.

    Columns whose pivoted-QR diagonal falls below 1e-10 x the Frobenius norm
    of the concatenation are dropped, so ``span(A_bar)`` equals the span of
    all source ``a`` factors. When the two sides keep different numbers of
    columns both are cut to the smaller count and a warning is recorded.
    """
    subspaces = list(subspaces)
    if not subspaces:
        raise InvalidInput("no subspaces to assemble")
    shape = subspaces[0].shape
    for i, sub in enumerate(subspaces):
        if sub.shape != shape:
            raise DimensionError(f"subspace {i} has shape {sub.shape}, expected {shape}")
    if labels is None:
        labels = [
            sub.layer.attribute if sub.layer is not None else f"block{i}" for i, sub in enumerate(subspaces)
        ]

    a_all = [sub.a for sub in subspaces]
    b_all = [sub.b for sub in subspaces]
    a_bar, a_ranges = _extend_orthonormal(a_all, DROP_TOL * np.linalg.norm(np.hstack(a_all)))
    b_bar, b_ranges = _extend_orthonormal(b_all, DROP_TOL * np.linalg.norm(np.hstack(b_all)))

    warnings = []
    dim = min(a_bar.shape[1], b_bar.shape[1])
    if dim == 0:
        raise InvalidInput("every column of the inputs is degenerate")
    if a_bar.shape[1] != b_bar.shape[1]:
        msg = f"A side kept {a_bar.shape[1]} columns, B side {b_bar.shape[1]}; truncated to {dim}"
        log.warning(msg)
        warnings.append(msg)
        a_bar, b_bar = a_bar[:, :dim], b_bar[:, :dim]

    def clip(r):
        return (min(r[0], dim), min(r[1], dim))

    blocks = [
        BasisBlock(str(label), sub.dim, clip(ra), clip(rb))
        for label, sub, ra, rb in zip(labels, subspaces, a_ranges, b_ranges)
    ]
    slot = subspaces[0].layer.slot if subspaces[0].layer is not None else None
    return SubspaceBasis(a_bar, b_bar, blocks, slot, warnings)


@dataclass(frozen=True, eq=False)
class SubspaceDelta:
    basis: SubspaceBasis
    m: np.ndarray = field(default=None)

    def __post_init__(self):
        dim = self.basis.dim
        m = np.zeros((dim, dim)) if self.m is None else as_matrix(self.m, "core M")
        if m.shape != (dim, dim):
            raise DimensionError(f"core M must be {dim} x {dim}, got {m.shape}")
        object.__setattr__(self, "m", m)

    @property
    def num_params(self) -> int:
        return self.m.size

    def dense(self) -> np.ndarray:
        return self.basis.a_bar @ self.m @ self.basis.b_bar.T


def apply_delta(delta: SubspaceDelta, x) -> np.ndarray:
    """``A_bar @ (M @ (B_bar.T @ x))`` without forming the n x m update."""
    x = as_matrix(x, "x")
    if x.shape[0] != delta.basis.b_bar.shape[0]:
        raise DimensionError(f"x has {x.shape[0]} rows, basis expects {delta.basis.b_bar.shape[0]}")
    return delta.basis.a_bar @ (delta.m @ (delta.basis.b_bar.T @ x))


def grad_m(delta: SubspaceDelta, upstream) -> np.ndarray:
    """Gradient with respect to ``M`` given ``dL/d(dW)``: ``A_bar.T G B_bar``."""
    a_bar, b_bar = delta.basis.a_bar, delta.basis.b_bar
    if isinstance(upstream, FactoredMatrix):
        if upstream.shape != delta.basis.shape:
            raise DimensionError(f"upstream is {upstream.shape}, basis is {delta.basis.shape}")
        return (a_bar.T @ upstream.left) @ (b_bar.T @ upstream.right).T
    g = as_matrix(upstream, "upstream gradient")
    if g.shape != delta.basis.shape:
        raise DimensionError(f"upstream is {g.shape}, basis is {delta.basis.shape}")
    return a_bar.T @ g @ b_bar


def fit_m(basis: SubspaceBasis, x, y, lr: float, steps: int) -> tuple[np.ndarray, list[float]]:
    """Fixed-step gradient descent on ``0.5 ||A_bar M B_bar^T X - Y||_F^2 / N`` from M = 0.

    Returns the final core and the loss before every step plus the final loss.
    """
    x = as_matrix(x, "X")
    y = as_matrix(y, "Y")
    n, m = basis.shape
    if x.shape[0] != m or y.shape[0] != n or x.shape[1] != y.shape[1]:
        raise DimensionError(f"X {x.shape} and Y {y.shape} do not fit a basis of shape {(n, m)}")
    if not lr > 0:
        raise InvalidInput(f"learning rate must be positive, got {lr}")
    if steps < 0:
        raise InvalidInput(f"steps must be non-negative, got {steps}")
    count = x.shape[1]
    delta = SubspaceDelta(basis)
    trace = []
    for step in range(steps + 1):
        resid = apply_delta(delta, x) - y
        loss = 0.5 * float(np.sum(resid * resid)) / count
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise DivergenceError(step, loss)
        trace.append(loss)
        if step == steps:
            break
        grad = grad_m(delta, FactoredMatrix(resid / count, x))
        delta = SubspaceDelta(basis, delta.m - lr * grad)
    return delta.m, trace
