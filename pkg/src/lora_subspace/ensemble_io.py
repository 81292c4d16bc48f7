"""Directory format for ensembles, extracted subspaces, bases and plain matrices.

A payload directory holds ``manifest.json`` (UTF-8, sorted keys) and one
headerless blob per matrix: row-major, little-endian IEEE-754, ``f64`` or
``f32`` as declared by the manifest. Matrix dimensions live only in the
manifest. See ``docs/format.md`` for the full schema.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from lora_subspace.basis import BasisBlock, SubspaceBasis
from lora_subspace.errors import (
    CorruptBlob,
    DimensionError,
    InvalidInput,
    IoError,
    LoraSubspaceError,
    UnsupportedFormat,
)
from lora_subspace.model import (
    ExtractionConfig,
    LayerKey,
    LoraAdapter,
    LoraEnsemble,
    SharedSubspace,
    validate_ensemble,
)

FORMAT = "lora-subspace/v1"
MANIFEST = "manifest.json"
DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}
KINDS = ("ensemble", "subspace", "basis", "matrices")


def _kind_of(payload) -> str:
    if isinstance(payload, LoraEnsemble):
        return "ensemble"
    if isinstance(payload, (SharedSubspace, SubspaceBasis)):
        return "subspace" if isinstance(payload, SharedSubspace) else "basis"
    if isinstance(payload, Mapping):
        values = list(payload.values())
        if all(isinstance(v, SharedSubspace) for v in values) and values:
            return "subspace"
        if all(isinstance(v, SubspaceBasis) for v in values) and values:
            return "basis"
        if all(isinstance(v, np.ndarray) for v in values) and values:
            return "matrices"
    raise InvalidInput(f"cannot save payload of type {type(payload).__name__}")


class _BlobWriter:
    def __init__(self, root: Path, dtype: str):
        self.root = root
        self.dtype = DTYPES[dtype]

    def __call__(self, name: str, matrix: np.ndarray) -> str:
        data = np.ascontiguousarray(matrix, dtype=self.dtype).tobytes(order="C")
        (self.root / name).write_bytes(data)
        return name


def _subspace_entry(key: LayerKey, sub: SharedSubspace, prefix: str, blob: _BlobWriter) -> dict:
    n, m = sub.shape
    return {
        "key": str(key),
        "status": "ok",
        "n": n,
        "m": m,
        "dim": sub.dim,
        "a": blob(f"{prefix}_a.bin", sub.a),
        "b": blob(f"{prefix}_b.bin", sub.b),
        "sigma": [float(v) for v in sub.sigma],
        "weights": [float(v) for v in sub.weights],
        "objective_trace": list(sub.objective_trace),
        "iterations": sub.iterations,
        "residual": sub.objective_trace[-1] if sub.objective_trace else None,
        "config": None if sub.config is None else sub.config.to_json(),
        "rank_deficient": bool(sub.rank_deficient),
    }


def _build_manifest(payload, kind: str, blob: _BlobWriter, failures: Mapping[LayerKey, Any]) -> dict:
    if kind == "ensemble":
        problems = validate_ensemble(payload)
        if problems:
            raise InvalidInput("; ".join(f"{p.layer}: {p.rule} ({p.detail})" for p in problems))
        layers = []
        for li, (key, adapters) in enumerate(payload.layers.items()):
            n, m = payload.dims[key]
            entries = []
            for ai, ad in enumerate(adapters):
                entries.append(
                    {
                        "rank": ad.rank,
                        "a": blob(f"L{li:03d}_A{ai:03d}_a.bin", ad.a),
                        "b": blob(f"L{li:03d}_A{ai:03d}_b.bin", ad.b),
                    }
                )
            layers.append({"key": str(key), "n": n, "m": m, "adapters": entries})
        return {"layers": layers}

    if kind == "subspace":
        if isinstance(payload, SharedSubspace):
            if payload.layer is None:
                raise InvalidInput("a single subspace needs a layer key to be saved")
            payload = {payload.layer: payload}
        entries = {key: ("ok", sub) for key, sub in payload.items()}
        for key, info in failures.items():
            entries[key] = ("failed", info)
        layers = []
        for li, key in enumerate(sorted(entries)):
            status, item = entries[key]
            if status == "ok":
                layers.append(_subspace_entry(key, item, f"L{li:03d}", blob))
            else:
                n, m = item.get("shape", (None, None)) if isinstance(item, Mapping) else (None, None)
                error = item.get("error") if isinstance(item, Mapping) else str(item)
                layers.append({"key": str(key), "status": "failed", "n": n, "m": m, "error": error})
        return {"layers": layers}

    if kind == "basis":
        if isinstance(payload, SubspaceBasis):
            payload = {payload.slot or "basis": payload}
        layers = []
        for li, (slot, basis) in enumerate(sorted(payload.items())):
            n, m = basis.shape
            layers.append(
                {
                    "key": slot,
                    "n": n,
                    "m": m,
                    "dim": basis.dim,
                    "a_bar": blob(f"B{li:03d}_a.bin", basis.a_bar),
                    "b_bar": blob(f"B{li:03d}_b.bin", basis.b_bar),
                    "blocks": [blk.to_json() for blk in basis.blocks],
                    "warnings": list(basis.warnings),
                }
            )
        return {"layers": layers}

    matrices = []
    for i, (name, mat) in enumerate(sorted(payload.items())):
        mat = np.asarray(mat, dtype=np.float64)
        if mat.ndim != 2 or not np.all(np.isfinite(mat)):
            raise InvalidInput(f"matrix {name!r} must be finite and 2-D")
        matrices.append({"name": str(name), "rows": mat.shape[0], "cols": mat.shape[1], "path": blob(f"M{i:03d}.bin", mat)})
    return {"matrices": matrices}


def dumps_manifest(manifest: Mapping) -> str:
    return json.dumps(manifest, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def save(
    path,
    payload,
    dtype: str = "f64",
    metadata: Mapping | None = None,
    failures: Mapping | None = None,
    kind: str | None = None,
) -> Path:
    """Write ``payload`` to the directory ``path`` atomically.

    The directory is assembled under a temporary name next to ``path`` and
    renamed into place. An existing target is replaced only if it is empty
    or already holds a manifest.
    """
    if dtype not in DTYPES:
        raise InvalidInput(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    if kind is None:
        kind = "subspace" if failures else _kind_of(payload)
    if kind not in KINDS:
        raise InvalidInput(f"unknown kind {kind!r}")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.exists() and (not path.is_dir() or (any(path.iterdir()) and not (path / MANIFEST).exists())):
            raise IoError(f"refusing to overwrite {path}: not a payload directory")
        tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    except IoError:
        raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    try:
        body = _build_manifest(payload, kind, _BlobWriter(tmp, dtype), failures or {})
        manifest = {"format": FORMAT, "dtype": dtype, "kind": kind, "metadata": dict(metadata or {}), **body}
        (tmp / MANIFEST).write_text(dumps_manifest(manifest), encoding="utf-8")
        os.chmod(tmp, 0o755)
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except LoraSubspaceError:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    except (OSError, ValueError) as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def load_manifest(path) -> dict:
    path = Path(path)
    try:
        text = (path / MANIFEST).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read manifest in {path}: {exc}") from exc
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UnsupportedFormat(f"{path / MANIFEST}: invalid JSON ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        found = manifest.get("format") if isinstance(manifest, dict) else None
        raise UnsupportedFormat(f"{path}: format {found!r}, expected {FORMAT!r}")
    if manifest.get("dtype") not in DTYPES:
        raise UnsupportedFormat(f"{path}: unknown dtype {manifest.get('dtype')!r}")
    if manifest.get("kind") not in KINDS:
        raise UnsupportedFormat(f"{path}: unknown kind {manifest.get('kind')!r}")
    return manifest


class _BlobReader:
    def __init__(self, root: Path, dtype: str):
        self.root = root
        self.dtype = DTYPES[dtype]

    def __call__(self, name: str, rows, cols) -> np.ndarray:
        if not isinstance(name, str) or os.path.isabs(name) or ".." in Path(name).parts:
            raise UnsupportedFormat(f"bad blob path {name!r}")
        for value in (rows, cols):
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise DimensionError(f"{name}: bad dimensions {rows} x {cols}")
        expected = rows * cols * self.dtype.itemsize
        file = self.root / name
        try:
            data = file.read_bytes()
        except FileNotFoundError:
            raise CorruptBlob(str(file), expected, 0) from None
        except OSError as exc:
            raise IoError(f"cannot read {file}: {exc}") from exc
        if len(data) != expected:
            raise CorruptBlob(str(file), expected, len(data))
        return np.frombuffer(data, dtype=self.dtype).reshape(rows, cols).astype(np.float64)


def _dims(entry: Mapping, *names: str) -> list:
    try:
        return [entry[name] for name in names]
    except KeyError as exc:
        raise UnsupportedFormat(f"manifest entry lacks {exc}") from None


def load(path):
    """Read a payload directory written by :func:`save`.

    Returns a LoraEnsemble, a ``{LayerKey: SharedSubspace}`` dict (failed
    layers are skipped), a ``{slot: SubspaceBasis}`` dict or a
    ``{name: ndarray}`` dict depending on the manifest kind.
    """
    path = Path(path)
    manifest = load_manifest(path)
    read = _BlobReader(path, manifest["dtype"])
    kind = manifest["kind"]
    try:
        if kind == "ensemble":
            return _load_ensemble(manifest, read)
        if kind == "subspace":
            return _load_subspaces(manifest, read)
        if kind == "basis":
            return _load_bases(manifest, read)
        return {
            entry["name"]: read(*_dims(entry, "path", "rows", "cols")) for entry in manifest.get("matrices", [])
        }
    except (TypeError, AttributeError) as exc:
        raise UnsupportedFormat(f"{path}: malformed manifest ({exc})") from exc


def _load_ensemble(manifest, read) -> LoraEnsemble:
    layers, dims = {}, {}
    for entry in manifest.get("layers", []):
        key = LayerKey.parse(entry["key"])
        n, m = _dims(entry, "n", "m")
        adapters = []
        for ad in entry["adapters"]:
            (rank,) = _dims(ad, "rank")
            adapters.append(LoraAdapter(read(ad["a"], n, rank), read(ad["b"], m, rank)))
        layers[key] = adapters
        dims[key] = (n, m)
    ensemble = LoraEnsemble(layers, dims)
    problems = validate_ensemble(ensemble)
    if problems:
        raise DimensionError("; ".join(f"{p.layer}: {p.rule} ({p.detail})" for p in problems))
    return ensemble


def _load_subspaces(manifest, read) -> dict[LayerKey, SharedSubspace]:
    out = {}
    for entry in manifest.get("layers", []):
        if entry.get("status", "ok") != "ok":
            continue
        key = LayerKey.parse(entry["key"])
        n, m, dim = _dims(entry, "n", "m", "dim")
        if len(entry["sigma"]) != dim:
            raise DimensionError(f"{key}: sigma has {len(entry['sigma'])} values for dim {dim}")
        config = entry.get("config")
        out[key] = SharedSubspace(
            a=read(entry["a"], n, dim),
            b=read(entry["b"], m, dim),
            sigma=np.array(entry["sigma"], dtype=np.float64),
            weights=np.array(entry.get("weights", []), dtype=np.float64),
            objective_trace=tuple(entry.get("objective_trace", [])),
            config=None if config is None else ExtractionConfig.from_json(config),
            layer=key,
            rank_deficient=bool(entry.get("rank_deficient", False)),
        )
    return out


def _load_bases(manifest, read) -> dict[str, SubspaceBasis]:
    out = {}
    for entry in manifest.get("layers", []):
        n, m, dim = _dims(entry, "n", "m", "dim")
        slot = entry["key"]
        out[slot] = SubspaceBasis(
            a_bar=read(entry["a_bar"], n, dim),
            b_bar=read(entry["b_bar"], m, dim),
            blocks=[BasisBlock.from_json(b) for b in entry.get("blocks", [])],
            slot=None if slot == "basis" else slot,
            warnings=entry.get("warnings", []),
        )
    return out
