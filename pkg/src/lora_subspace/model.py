"""Domain types: layer identity, adapters, ensembles, extracted subspaces."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from lora_subspace.errors import DimensionError, InvalidInput
from lora_subspace.linalg import FactoredMatrix, as_matrix

ATTRIBUTES = {"texture": "tex", "geometry": "geo", "camera": "cam", "lighting": "lig"}
_ATTR_FROM_SHORT = {v: k for k, v in ATTRIBUTES.items()}
SCOPES = {"global": "g", "frame": "l"}
_SCOPE_FROM_SHORT = {v: k for k, v in SCOPES.items()}
KINDS = {
    "atten_qkv": "atten-qkv",
    "atten_proj": "atten-proj",
    "mlp_fc1": "mlp-fc1",
    "mlp_fc2": "mlp-fc2",
}
_KIND_FROM_SHORT = {v: k for k, v in KINDS.items()}
DEFAULT_MAX_INDEX = 48


@dataclass(frozen=True, order=True)
class LayerKey:
    """One weight matrix of one transformer block, tagged with an attribute.

    ``attribute`` is one of texture/geometry/camera/lighting or
    ``"other:<tag>"``. The string form follows ``tex-g-atten-qkv-1``.
    """

    attribute: str
    scope: str
    kind: str
    index: int
    max_index: int = field(default=DEFAULT_MAX_INDEX, compare=False, repr=False)

    def __post_init__(self):
        if self.attribute not in ATTRIBUTES:
            tag = self.attribute.partition("other:")[2]
            if not self.attribute.startswith("other:") or not tag or "-" in tag:
                raise InvalidInput(f"bad attribute {self.attribute!r}")
        if self.scope not in SCOPES:
            raise InvalidInput(f"bad scope {self.scope!r}")
        if self.kind not in KINDS:
            raise InvalidInput(f"bad kind {self.kind!r}")
        if isinstance(self.index, bool) or not isinstance(self.index, (int, np.integer)):
            raise InvalidInput(f"index must be an integer, got {self.index!r}")
        if not 1 <= self.index <= self.max_index:
            raise InvalidInput(f"index {self.index} outside 1..{self.max_index}")

    @property
    def slot(self) -> str:
        """The physical weight matrix, without the attribute tag."""
        return f"{SCOPES[self.scope]}-{KINDS[self.kind]}-{self.index}"

    def with_attribute(self, attribute: str) -> LayerKey:
        return dataclasses.replace(self, attribute=attribute)

    def __str__(self) -> str:
        attr = ATTRIBUTES.get(self.attribute, self.attribute)
        return f"{attr}-{self.slot}"

    @classmethod
    def parse(cls, text: str, max_index: int = DEFAULT_MAX_INDEX) -> LayerKey:
        parts = text.split("-")
        if len(parts) != 5:
            raise InvalidInput(f"cannot parse layer key {text!r}")
        attr, scope, kind_a, kind_b, index = parts
        if attr in _ATTR_FROM_SHORT:
            attr = _ATTR_FROM_SHORT[attr]
        elif not attr.startswith("other:"):
            raise InvalidInput(f"bad attribute in {text!r}")
        if scope not in _SCOPE_FROM_SHORT:
            raise InvalidInput(f"bad scope in {text!r}")
        kind = _KIND_FROM_SHORT.get(f"{kind_a}-{kind_b}")
        if kind is None:
            raise InvalidInput(f"bad kind in {text!r}")
        if not index.isdigit():
            raise InvalidInput(f"bad index in {text!r}")
        return cls(attr, _SCOPE_FROM_SHORT[scope], kind, int(index), max_index)


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    """Factor pair of one LoRA update ``a @ b.T`` (a: n x r, b: m x r)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", as_matrix(self.a, "adapter a"))
        object.__setattr__(self, "b", as_matrix(self.b, "adapter b"))
        if self.a.shape[1] != self.b.shape[1]:
            raise DimensionError(
                f"adapter factors have different ranks: {self.a.shape[1]} vs {self.b.shape[1]}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.a.shape[0], self.b.shape[0])

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def factored(self) -> FactoredMatrix:
        return FactoredMatrix(self.a, self.b)

    def scaled(self, c: float) -> LoraAdapter:
        return LoraAdapter(self.a * c, self.b)


def adapter_delta_dense(ad: LoraAdapter) -> np.ndarray:
    return ad.a @ ad.b.T


@dataclass(frozen=True, eq=False)
class LoraEnsemble:
    """Per-layer collections of adapters; ``dims`` maps each layer to (n, m)."""

    layers: Mapping[LayerKey, Sequence[LoraAdapter]]
    dims: Mapping[LayerKey, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        layers = {key: list(ads) for key, ads in sorted(self.layers.items())}
        dims = dict(self.dims)
        for key, ads in layers.items():
            if key not in dims and ads:
                dims[key] = ads[0].shape
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "dims", dict(sorted(dims.items())))


@dataclass(frozen=True)
class Violation:
    layer: str
    rule: str
    detail: str


def validate_ensemble(e: LoraEnsemble) -> list[Violation]:
    """Every broken ensemble invariant, one entry per offence."""
    out = []
    for key, ads in e.layers.items():
        name = str(key)
        if not ads:
            out.append(Violation(name, "EmptyLayer", "layer has no adapters"))
            continue
        n, m = e.dims.get(key, ads[0].shape)
        for i, ad in enumerate(ads):
            if ad.shape != (n, m):
                out.append(
                    Violation(name, "DimensionMismatch", f"adapter {i} is {ad.shape}, layer is {(n, m)}")
                )
            elif ad.rank > min(n, m):
                out.append(
                    Violation(name, "RankBound", f"adapter {i} rank {ad.rank} exceeds min(n, m)={min(n, m)}")
                )
    return out


@dataclass(frozen=True)
class ExtractionConfig:
    """IRLS settings. ``epsilon=None`` means 1e-8 x mean adapter Frobenius norm."""

    target_dim: int
    alpha: float = 1.0
    epsilon: float | None = None
    max_iters: int = 50
    rel_tol: float = 1e-8

    def __post_init__(self):
        if isinstance(self.target_dim, bool) or int(self.target_dim) != self.target_dim or self.target_dim < 1:
            raise InvalidInput(f"target_dim must be a positive integer, got {self.target_dim!r}")
        if not 0.0 < self.alpha <= 2.0:
            raise InvalidInput(f"alpha must lie in (0, 2], got {self.alpha}")
        if self.epsilon is not None and not self.epsilon > 0.0:
            raise InvalidInput(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 1:
            raise InvalidInput(f"max_iters must be positive, got {self.max_iters}")
        if not self.rel_tol > 0.0:
            raise InvalidInput(f"rel_tol must be positive, got {self.rel_tol}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: Mapping) -> ExtractionConfig:
        return cls(**data)


@dataclass(frozen=True, eq=False)
class SharedSubspace:
    """Canonical factors ``a = U S^1/2``, ``b = V S^1/2`` of an extracted subspace."""

    a: np.ndarray
    b: np.ndarray
    sigma: np.ndarray
    weights: np.ndarray = field(default_factory=lambda: np.ones(0))
    objective_trace: tuple[float, ...] = ()
    config: ExtractionConfig | None = None
    layer: LayerKey | None = None
    rank_deficient: bool = False

    def __post_init__(self):
        a = as_matrix(self.a, "subspace a")
        b = as_matrix(self.b, "subspace b")
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if a.shape[1] != b.shape[1] or sigma.size != a.shape[1]:
            raise DimensionError(
                f"subspace dims disagree: a {a.shape}, b {b.shape}, sigma {sigma.size}"
            )
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "objective_trace", tuple(float(v) for v in self.objective_trace))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.a.shape[0], self.b.shape[0])

    @property
    def dim(self) -> int:
        return self.a.shape[1]

    @property
    def iterations(self) -> int:
        return len(self.objective_trace)

    def factored(self) -> FactoredMatrix:
        return FactoredMatrix(self.a, self.b)

    def dense(self) -> np.ndarray:
        return self.a @ self.b.T
