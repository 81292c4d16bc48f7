import json
import struct
from pathlib import Path

import numpy as np
import pytest

from lora_subspace.basis import assemble_basis
from lora_subspace.ensemble_io import FORMAT, load, load_manifest, save
from lora_subspace.errors import CorruptBlob, DimensionError, InvalidInput, IoError, UnsupportedFormat
from lora_subspace.extraction import irls_extract
from lora_subspace.model import ExtractionConfig, LayerKey, LoraAdapter, LoraEnsemble

from conftest import random_adapters

GOLDEN = Path(__file__).parent / "fixtures" / "golden_ensemble"
KEY = LayerKey("texture", "global", "atten_qkv", 1)


def small_ensemble(rng, k=2, n=6, m=4, r=2, key=KEY):
    return LoraEnsemble({key: random_adapters(rng, n, m, k, r)}, {key: (n, m)})


def assert_same_ensemble(x, y):
    assert list(x.layers) == list(y.layers) and x.dims == y.dims
    for key in x.layers:
        for p, q in zip(x.layers[key], y.layers[key]):
            assert np.array_equal(p.a, q.a) and np.array_equal(p.b, q.b)


def test_roundtrip_bit_exact(tmp_path, rng):
    ens = small_ensemble(rng)
    save(tmp_path / "ens", ens)
    assert_same_ensemble(load(tmp_path / "ens"), ens)


def test_f32_rounding(tmp_path, rng):
    ens = small_ensemble(rng)
    save(tmp_path / "ens", ens, dtype="f32")
    back = load(tmp_path / "ens")
    ad, again = ens.layers[KEY][0], back.layers[KEY][0]
    assert again.a.dtype == np.float64
    assert np.array_equal(again.a, ad.a.astype(np.float32).astype(np.float64))
    assert (tmp_path / "ens" / "L000_A000_a.bin").stat().st_size == 6 * 2 * 4


def test_empty_ensemble(tmp_path):
    save(tmp_path / "ens", LoraEnsemble({}, {}))
    manifest = load_manifest(tmp_path / "ens")
    assert manifest["layers"] == [] and manifest["kind"] == "ensemble"
    assert load(tmp_path / "ens").layers == {}


def test_multi_layer_order(tmp_path, rng):
    keys = [LayerKey("geometry", "frame", "mlp_fc2", 3), LayerKey("camera", "global", "atten_proj", 1)]
    layers = {key: random_adapters(rng, 5, 4, 2, 1) for key in keys}
    ens = LoraEnsemble(layers, {key: (5, 4) for key in keys})
    save(tmp_path / "ens", ens)
    assert_same_ensemble(load(tmp_path / "ens"), ens)


def test_manifest_is_canonical_json(tmp_path, rng):
    save(tmp_path / "ens", small_ensemble(rng), metadata={"b": 1, "a": 2})
    text = (tmp_path / "ens" / "manifest.json").read_text()
    assert text == json.dumps(json.loads(text), sort_keys=True, indent=2) + "\n"


def test_golden_fixture():
    ens = load(GOLDEN)
    (key,) = ens.layers
    assert str(key) == "tex-g-atten-qkv-1" and ens.dims[key] == (3, 2)
    first, second = ens.layers[key]
    np.testing.assert_array_equal(first.a, [[1.0, 0.5], [-2.0, 0.25], [0.0, 3.0]])
    np.testing.assert_array_equal(second.b, [[-1.0, 1.0], [-0.125, -2.0]])
    # row-major little-endian doubles, no header
    assert (GOLDEN / "L000_A000_b.bin").read_bytes() == struct.pack("<4d", 1.0, -1.0, 0.125, 2.0)


def test_golden_resave_is_byte_identical(tmp_path):
    save(tmp_path / "again", load(GOLDEN), metadata=load_manifest(GOLDEN)["metadata"])
    for file in sorted(GOLDEN.iterdir()):
        assert (tmp_path / "again" / file.name).read_bytes() == file.read_bytes()


def test_unknown_format(tmp_path, rng):
    save(tmp_path / "ens", small_ensemble(rng))
    manifest_path = tmp_path / "ens" / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["format"] = "lora-subspace/v2"
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(UnsupportedFormat):
        load(tmp_path / "ens")


@pytest.mark.parametrize("field, value", [("dtype", "f16"), ("kind", "tensor")])
def test_unknown_dtype_or_kind(field, value, tmp_path, rng):
    save(tmp_path / "ens", small_ensemble(rng))
    manifest_path = tmp_path / "ens" / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest[field] = value
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(UnsupportedFormat):
        load(tmp_path / "ens")


def test_truncated_blob(tmp_path, rng):
    save(tmp_path / "ens", small_ensemble(rng))
    blob = tmp_path / "ens" / "L000_A001_b.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(CorruptBlob) as info:
        load(tmp_path / "ens")
    assert info.value.file.endswith("L000_A001_b.bin")
    assert (info.value.expected, info.value.actual) == (64, 56)
    assert "L000_A001_b.bin" in str(info.value)


def test_missing_blob(tmp_path, rng):
    save(tmp_path / "ens", small_ensemble(rng))
    (tmp_path / "ens" / "L000_A000_a.bin").unlink()
    with pytest.raises(CorruptBlob) as info:
        load(tmp_path / "ens")
    assert info.value.actual == 0


def test_manifest_blob_dim_mismatch(tmp_path, rng):
    save(tmp_path / "ens", small_ensemble(rng))
    manifest_path = tmp_path / "ens" / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["layers"][0]["n"] = 0
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(DimensionError):
        load(tmp_path / "ens")


def test_missing_directory(tmp_path):
    with pytest.raises(IoError):
        load(tmp_path / "nothing")


def test_refuses_foreign_directory(tmp_path, rng):
    target = tmp_path / "busy"
    target.mkdir()
    (target / "notes.txt").write_text("keep me")
    with pytest.raises(IoError):
        save(target, small_ensemble(rng))
    assert (target / "notes.txt").read_text() == "keep me"


def test_overwrite_payload_directory(tmp_path, rng):
    save(tmp_path / "ens", small_ensemble(rng, k=3))
    ens = small_ensemble(rng, k=1)
    save(tmp_path / "ens", ens)
    assert_same_ensemble(load(tmp_path / "ens"), ens)
    assert not (tmp_path / "ens" / "L000_A002_a.bin").exists()


def test_invalid_ensemble_not_written(tmp_path, rng):
    bad = LoraEnsemble({KEY: [LoraAdapter(np.ones((6, 2)), np.ones((4, 2))), LoraAdapter(np.ones((5, 2)), np.ones((4, 2)))]}, {KEY: (6, 4)})
    with pytest.raises(InvalidInput):
        save(tmp_path / "ens", bad)
    assert not (tmp_path / "ens").exists()
    assert list(tmp_path.iterdir()) == []


def test_subspace_roundtrip(tmp_path, rng):
    sub = irls_extract(random_adapters(rng, 12, 9, 4, 3), ExtractionConfig(3, alpha=1.0), KEY)
    save(tmp_path / "sub", sub)
    (back,) = load(tmp_path / "sub").values()
    assert back.layer == KEY and back.config == sub.config
    for name in ("a", "b", "sigma", "weights"):
        assert np.array_equal(getattr(back, name), getattr(sub, name))
    assert back.objective_trace == sub.objective_trace
    entry = load_manifest(tmp_path / "sub")["layers"][0]
    assert entry["iterations"] == sub.iterations
    assert entry["residual"] == sub.objective_trace[-1]


def test_failed_layer_recorded(tmp_path, rng):
    sub = irls_extract(random_adapters(rng, 12, 9, 2, 3), ExtractionConfig(2), KEY)
    other = KEY.with_attribute("camera")
    save(tmp_path / "sub", {KEY: sub}, failures={other: {"shape": (12, 9), "error": "boom"}})
    layers = load_manifest(tmp_path / "sub")["layers"]
    assert {e["key"]: e.get("status", "ok") for e in layers} == {str(KEY): "ok", str(other): "failed"}
    assert list(load(tmp_path / "sub")) == [KEY]


def test_basis_roundtrip(tmp_path, rng):
    subs = [irls_extract(random_adapters(rng, 12, 9, 3, 2), ExtractionConfig(2), KEY.with_attribute(a)) for a in ("texture", "camera")]
    basis = assemble_basis(subs)
    save(tmp_path / "basis", basis)
    (slot, back), = load(tmp_path / "basis").items()
    assert slot == basis.slot == back.slot
    assert np.array_equal(back.a_bar, basis.a_bar) and back.blocks == basis.blocks


def test_matrices_roundtrip(tmp_path, rng):
    mats = {"X": rng.standard_normal((3, 5)), "Y": rng.standard_normal((4, 5))}
    save(tmp_path / "data", mats)
    back = load(tmp_path / "data")
    assert sorted(back) == ["X", "Y"]
    assert all(np.array_equal(back[k], mats[k]) for k in mats)
    with pytest.raises(InvalidInput):
        save(tmp_path / "bad", {"X": np.array([[np.nan]])})


def test_format_constant():
    assert FORMAT == "lora-subspace/v1"
