"""Dense real-matrix primitives.

Everything here works on float64 numpy arrays. Matrices are validated on
entry (2-D, finite, non-empty) and never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg

from lora_subspace.errors import DimensionError, InvalidInput, SingularError

# Singular values below ZERO_CUTOFF * sigma_max count as zero for rank decisions.
ZERO_CUTOFF = 1e-14
GEN_EIG_SHIFT = 1e-10
SYMMETRY_TOL = 1e-10


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Return ``x`` as a finite float64 2-D array or raise InvalidInput."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must have at least one row and column, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} has non-finite entries")
    return arr


def numerical_rank(sigma: np.ndarray) -> int:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.size == 0 or sigma[0] <= 0.0:
        return 0
    return int(np.count_nonzero(sigma > ZERO_CUTOFF * sigma.max()))


def zero_small(sigma: np.ndarray) -> np.ndarray:
    """Copy of ``sigma`` with entries under the zero cutoff set to exactly 0."""
    sigma = np.array(sigma, dtype=np.float64)
    if sigma.size:
        top = sigma.max()
        sigma[sigma <= ZERO_CUTOFF * top] = 0.0
    return sigma


class SvdResult(NamedTuple):
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


@dataclass(frozen=True, eq=False)
class FactoredMatrix:
    """The n x m matrix ``left @ right.T``, kept in factored form."""

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        left = as_matrix(self.left, "left factor")
        right = as_matrix(self.right, "right factor")
        if left.shape[1] != right.shape[1]:
            raise DimensionError(
                f"factor column counts differ: {left.shape[1]} vs {right.shape[1]}"
            )
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.left.shape[0], self.right.shape[0])

    @property
    def inner_dim(self) -> int:
        return self.left.shape[1]

    def dense(self) -> np.ndarray:
        return self.left @ self.right.T


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    # make the first non-negligible entry of every left vector positive
    for j in range(u.shape[1]):
        col = u[:, j]
        scale = np.max(np.abs(col))
        if scale == 0.0:
            continue
        first = np.flatnonzero(np.abs(col) > 1e-12 * scale)[0]
        if col[first] < 0:
            u[:, j] *= -1.0
            v[:, j] *= -1.0


def svd(m, p: int) -> SvdResult:
    """Top-``p`` singular triplets of ``m`` in descending order.

    Signs are fixed so the first significant entry of each left singular
    vector is positive, which makes the result reproducible.
    """
    m = as_matrix(m)
    if not 1 <= p <= min(m.shape):
        raise DimensionError(f"p={p} outside [1, {min(m.shape)}]")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    order = np.argsort(-s, kind="stable")[:p]
    u = np.array(u[:, order])
    v = np.array(vt.T[:, order])
    s = np.array(s[order])
    _fix_signs(u, v)
    return SvdResult(u, s, v)


def thin_qr(m) -> tuple[np.ndarray, np.ndarray]:
    """Reduced QR with a non-negative diagonal in ``r``."""
    m = as_matrix(m)
    if m.shape[0] < m.shape[1]:
        raise DimensionError(f"thin_qr needs rows >= cols, got {m.shape}")
    q, r = np.linalg.qr(m, mode="reduced")
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs, r * signs[:, None]


def _compress(x: np.ndarray) -> tuple[np.ndarray | None, np.ndarray]:
    # x = basis @ coef with orthonormal basis; None stands for the identity
    if x.shape[0] > x.shape[1]:
        return thin_qr(x)
    return None, x


def factored_svd(f: FactoredMatrix, p: int | None = None) -> SvdResult:
    """SVD of ``f.left @ f.right.T`` without forming the n x m product.

    Both factors are compressed by thin QR, then the small core
    ``R_left @ R_right.T`` is decomposed densely. ``p`` defaults to the
    full length ``min(n, m, inner_dim)``.
    """
    n, m = f.shape
    full = min(n, m, f.inner_dim)
    if p is None:
        p = full
    if not 1 <= p <= min(n, m):
        raise DimensionError(f"p={p} outside [1, {min(n, m)}]")
    q_left, core_left = _compress(f.left)
    q_right, core_right = _compress(f.right)
    core = core_left @ core_right.T
    k = min(core.shape)
    u_c, s, v_c = svd(core, k)
    if q_left is not None:
        u_c = q_left @ u_c
    if q_right is not None:
        v_c = q_right @ v_c
    if p > k:
        # trailing singular values are exactly zero; pad with zero vectors
        u_c = np.hstack([u_c, np.zeros((n, p - k))])
        v_c = np.hstack([v_c, np.zeros((m, p - k))])
        s = np.concatenate([s, np.zeros(p - k)])
    return SvdResult(u_c[:, :p], s[:p], v_c[:, :p])


class GenEigResult(NamedTuple):
    lambdas: np.ndarray
    vectors: np.ndarray
    shift: float


def _check_symmetric(x: np.ndarray, name: str) -> np.ndarray:
    if x.shape[0] != x.shape[1]:
        raise DimensionError(f"{name} must be square, got {x.shape}")
    scale = max(1.0, float(np.max(np.abs(x))))
    if np.max(np.abs(x - x.T)) > SYMMETRY_TOL * scale:
        raise InvalidInput(f"{name} is not symmetric")
    return 0.5 * (x + x.T)


def gen_eig_smallest(p, q, count: int) -> GenEigResult:
    """Smallest ``count`` eigenpairs of the pencil ``p x = lambda q x``.

    ``q`` is shifted by ``GEN_EIG_SHIFT * trace(q) / dim`` before solving;
    the applied shift is returned alongside the eigenpairs.
    """
    p = _check_symmetric(as_matrix(p, "p"), "p")
    q = _check_symmetric(as_matrix(q, "q"), "q")
    if p.shape != q.shape:
        raise DimensionError(f"pencil shapes differ: {p.shape} vs {q.shape}")
    dim = p.shape[0]
    if not 1 <= count <= dim:
        raise DimensionError(f"count={count} outside [1, {dim}]")
    shift = GEN_EIG_SHIFT * float(np.trace(q)) / dim
    if not shift > 0.0:
        raise SingularError("q has non-positive trace")
    q_reg = q + shift * np.eye(dim)
    try:
        scipy.linalg.cholesky(q_reg)
    except np.linalg.LinAlgError as exc:
        raise SingularError("q is not positive definite after regularization") from exc
    lambdas, vectors = scipy.linalg.eigh(p, q_reg, subset_by_index=[0, count - 1])
    return GenEigResult(lambdas, vectors, shift)


def _trace_product(x: np.ndarray, y: np.ndarray) -> float:
    # tr(x @ y) for square x, y
    return float(np.sum(x * y.T))


def frob_dist_factored(f1: FactoredMatrix, f2: FactoredMatrix) -> float:
    """``||L1 R1^T - L2 R2^T||_F`` from small Gram matrices only.

    Uses ||X - Y||^2 = tr(L1'L1 R1'R1) - 2 tr(L1'L2 R2'R1) + tr(L2'L2 R2'R2).
    """
    if f1.shape != f2.shape:
        raise DimensionError(f"shapes differ: {f1.shape} vs {f2.shape}")
    aa = _trace_product(f1.left.T @ f1.left, f1.right.T @ f1.right)
    bb = _trace_product(f2.left.T @ f2.left, f2.right.T @ f2.right)
    ab = _trace_product(f1.left.T @ f2.left, f2.right.T @ f1.right)
    return float(np.sqrt(max(aa - 2.0 * ab + bb, 0.0)))


def frob_norm_factored(f: FactoredMatrix) -> float:
    return float(np.sqrt(max(_trace_product(f.left.T @ f.left, f.right.T @ f.right), 0.0)))
