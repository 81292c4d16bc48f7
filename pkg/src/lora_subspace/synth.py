"""Planted ensembles with a known shared subspace, for recovery tests.

Each inlier adapter is ``A_i = [A* diag(sigma)^1/2 | gamma c_i N_i^A]`` and
``B_i = [B* diag(sigma)^1/2 | N_i^B]`` where ``A*``, ``B*`` are orthonormal
and ``c_i`` rescales ``N_i^A N_i^B^T`` to unit Frobenius norm, so
``A_i B_i^T = S* + gamma E_i`` with ``||E_i||_F = 1``. The last ``outliers``
adapters are replaced by random rank-r pairs of norm
``outlier_scale * ||S*||_F``.

Random streams: ``SeedSequence(seed).spawn(1 + k)``; child 0 feeds the
shared factors, child ``i + 1`` feeds adapter ``i``. Every child is split
once more into an A-side and a B-side stream. All draws use PCG64.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from lora_subspace.errors import InvalidInput
from lora_subspace.linalg import FactoredMatrix, frob_norm_factored, thin_qr
from lora_subspace.model import LayerKey, LoraAdapter, LoraEnsemble, SharedSubspace

DEFAULT_LAYER = LayerKey("other:planted", "global", "atten_qkv", 1)


@dataclass(frozen=True)
class PlantedSpec:
    n: int
    m: int
    k: int
    r: int
    s: int
    shared_sigma: tuple[float, ...] | None = None
    noise_gamma: float = 0.0
    outliers: int = 0
    outlier_scale: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n", "m", "k", "r", "s"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidInput(f"{name} must be a positive integer, got {value!r}")
        if not self.s <= self.r <= min(self.n, self.m):
            raise InvalidInput(f"need s <= r <= min(n, m), got s={self.s} r={self.r} n={self.n} m={self.m}")
        if not 0 <= self.outliers <= self.k:
            raise InvalidInput(f"outliers must lie in [0, k], got {self.outliers}")
        if not self.noise_gamma >= 0:
            raise InvalidInput(f"noise_gamma must be non-negative, got {self.noise_gamma}")
        if self.noise_gamma > 0 and self.r == self.s:
            raise InvalidInput("noise needs r > s free adapter columns")
        if not self.outlier_scale > 0:
            raise InvalidInput(f"outlier_scale must be positive, got {self.outlier_scale}")
        if not 0 <= self.seed < 2**64:
            raise InvalidInput(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.shared_sigma is not None:
            sig = tuple(float(v) for v in self.shared_sigma)
            if len(sig) != self.s or any(v <= 0 for v in sig) or any(x < y for x, y in zip(sig, sig[1:])):
                raise InvalidInput("shared_sigma must hold s positive non-increasing values")
            object.__setattr__(self, "shared_sigma", sig)

    @property
    def sigma(self) -> np.ndarray:
        if self.shared_sigma is None:
            return np.linspace(1.0, 0.5, self.s)
        return np.array(self.shared_sigma)

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["shared_sigma"] = [float(v) for v in self.sigma]
        return out

    @classmethod
    def from_json(cls, data: Mapping) -> PlantedSpec:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidInput(f"unknown spec fields: {sorted(unknown)}")
        kwargs = dict(data)
        if kwargs.get("shared_sigma") is not None:
            kwargs["shared_sigma"] = tuple(kwargs["shared_sigma"])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise InvalidInput(str(exc)) from exc


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, _ = thin_qr(rng.standard_normal((rows, cols)))
    return q


def attribute_bases(n: int, m: int, s: int, count: int, overlap: int = 0, seed: int = 0):
    """Orthonormal ``(A*, B*)`` pairs for ``count`` attributes.

    All attributes share the first ``overlap`` directions on each side; the
    remaining ``s - overlap`` columns are mutually orthogonal across attributes.
    """
    if not 0 <= overlap <= s:
        raise InvalidInput(f"overlap must lie in [0, s], got {overlap}")
    width = overlap + count * (s - overlap)
    if width > min(n, m):
        raise InvalidInput(f"{count} attributes of dim {s} do not fit in min(n, m) = {min(n, m)}")
    ss_a, ss_b = np.random.SeedSequence(seed).spawn(2)
    qa = _orthonormal(np.random.default_rng(ss_a), n, width)
    qb = _orthonormal(np.random.default_rng(ss_b), m, width)
    out = []
    for j in range(count):
        cols = list(range(overlap)) + list(range(overlap + j * (s - overlap), overlap + (j + 1) * (s - overlap)))
        out.append((qa[:, cols], qb[:, cols]))
    return out


def generate_planted(
    spec: PlantedSpec,
    layer: LayerKey = DEFAULT_LAYER,
    basis: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[LoraEnsemble, SharedSubspace]:
    """Single-layer ensemble plus the planted truth ``(A* S^1/2, B* S^1/2)``.

    ``basis`` replaces the randomly drawn orthonormal ``(A*, B*)``.
    """
    sigma = spec.sigma
    root = np.sqrt(sigma)
    streams = np.random.SeedSequence(spec.seed).spawn(1 + spec.k)
    shared_a, shared_b = streams[0].spawn(2)
    if basis is None:
        a_star = _orthonormal(np.random.default_rng(shared_a), spec.n, spec.s)
        b_star = _orthonormal(np.random.default_rng(shared_b), spec.m, spec.s)
    else:
        a_star, b_star = (np.asarray(x, dtype=np.float64) for x in basis)
        if a_star.shape != (spec.n, spec.s) or b_star.shape != (spec.m, spec.s):
            raise InvalidInput("basis shapes do not match the spec")
    a_sig = a_star * root
    b_sig = b_star * root
    signal_norm = float(np.linalg.norm(sigma))
    free = spec.r - spec.s

    adapters = []
    first_outlier = spec.k - spec.outliers
    for i in range(spec.k):
        ss_a, ss_b = streams[i + 1].spawn(2)
        rng_a, rng_b = np.random.default_rng(ss_a), np.random.default_rng(ss_b)
        if i >= first_outlier:
            a = rng_a.standard_normal((spec.n, spec.r))
            b = rng_b.standard_normal((spec.m, spec.r))
            a *= spec.outlier_scale * signal_norm / frob_norm_factored(FactoredMatrix(a, b))
        elif free:
            na = rng_a.standard_normal((spec.n, free))
            nb = rng_b.standard_normal((spec.m, free))
            na *= spec.noise_gamma / frob_norm_factored(FactoredMatrix(na, nb))
            a = np.hstack([a_sig, na])
            b = np.hstack([b_sig, nb])
        else:
            a, b = a_sig.copy(), b_sig.copy()
        adapters.append(LoraAdapter(a, b))

    ensemble = LoraEnsemble({layer: adapters}, {layer: (spec.n, spec.m)})
    truth = SharedSubspace(a=a_sig, b=b_sig, sigma=sigma, weights=np.ones(0), layer=layer)
    return ensemble, truth


def recovery_error(extracted, truth) -> float:
    """Overlap distance between an extracted subspace and the planted one."""
    from lora_subspace.orthogonality import subspace_overlap

    return subspace_overlap(extracted, truth).min_lambda


def planted_adapters(spec: PlantedSpec, **kwargs) -> tuple[Sequence[LoraAdapter], SharedSubspace]:
    ensemble, truth = generate_planted(spec, **kwargs)
    (adapters,) = ensemble.layers.values()
    return adapters, truth
