"""Command line entry point: ``lora-subspace <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 numerical failure in at least one layer.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from lora_subspace import ensemble_io
from lora_subspace.basis import assemble_basis, fit_m
from lora_subspace.errors import InvalidInput, IoError, LoraSubspaceError
from lora_subspace.extraction import irls_extract, weighted_mixture
from lora_subspace.model import ExtractionConfig, LayerKey, LoraEnsemble
from lora_subspace.orthogonality import pairwise_overlap, subspace_overlap
from lora_subspace.spectral import allocate_ranks, effective_rank, magnitude_curve, spectrum
from lora_subspace.synth import DEFAULT_LAYER, PlantedSpec, generate_planted

log = logging.getLogger("lora_subspace")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
JOBS_ENV = "LORA_SUBSPACE_JOBS"


class UsageError(Exception):
    pass


# Checked after --config is merged, so a config file may supply them.
REQUIRED = {
    "gen": ["spec", "out"],
    "extract": ["input", "out", "dim"],
    "spectrum": ["input", "out"],
    "overlap": ["a", "out"],
    "assemble": ["input", "out"],
    "allocate": ["weights", "budget"],
    "fit": ["basis", "data", "lr", "steps", "out"],
    "magnitudes": ["input"],
}

# Defaults applied after --config, so that config values can fill unset flags.
DEFAULTS = {
    "extract": {"alpha": 1.0, "epsilon": None, "max_iters": 50, "tol": 1e-8, "dtype": "f64"},
    "spectrum": {"min_ratio": 0.1},
    "overlap": {"threshold": 0.5},
    "allocate": {"strategy": "importance", "clamp_min": None, "out": "-"},
    "fit": {"layer": None},
    "gen": {"dtype": "f64"},
    "magnitudes": {"out": "-"},
}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_text(out: str, text: str) -> None:
    if out == "-":
        sys.stdout.write(text)
        return
    try:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {out}: {exc}") from exc


def _write_report(out: str, payload: dict, header: list[str], rows: list[list]) -> None:
    if out.endswith(".csv"):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([[_fmt(v) for v in row] for row in rows])
        _write_text(out, buf.getvalue())
    else:
        _write_text(out, json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n")


def _read_spec_text(spec: str) -> str:
    # inline JSON starts with a bracket; anything else names a file
    if spec.lstrip()[:1] in ("{", "["):
        return spec
    try:
        return Path(spec).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read spec {spec}: {exc}") from exc


def cmd_gen(args) -> int:
    try:
        raw = json.loads(_read_spec_text(args.spec))
    except json.JSONDecodeError as exc:
        raise UsageError(f"spec is not valid JSON: {exc}") from exc
    items = raw if isinstance(raw, list) else [raw]
    if not items or not all(isinstance(item, dict) for item in items):
        raise UsageError("spec must be a JSON object or a list of objects")
    layers, dims, truths, specs = {}, {}, {}, []
    for item in items:
        item = dict(item)
        try:
            layer = LayerKey.parse(item.pop("layer")) if "layer" in item else DEFAULT_LAYER
            spec = PlantedSpec.from_json(item)
        except InvalidInput as exc:
            raise UsageError(f"bad spec: {exc}") from exc
        if layer in layers:
            raise UsageError(f"layer {layer} appears twice in the spec")
        ensemble, truth = generate_planted(spec, layer)
        layers.update(ensemble.layers)
        dims.update(ensemble.dims)
        truths[layer] = truth
        specs.append({"layer": str(layer), **spec.to_json()})
    out = Path(args.out)
    meta = {"planted": specs}
    ensemble_io.save(out / "ensemble", LoraEnsemble(layers, dims), dtype=args.dtype, metadata=meta)
    ensemble_io.save(out / "truth", truths, dtype=args.dtype, metadata=meta)
    return EXIT_OK


def cmd_extract(args) -> int:
    ensemble = ensemble_io.load(args.input)
    if not isinstance(ensemble, LoraEnsemble):
        raise IoError(f"{args.input} does not hold an ensemble")
    try:
        config = ExtractionConfig(
            target_dim=args.dim, alpha=args.alpha, epsilon=args.epsilon, max_iters=args.max_iters, rel_tol=args.tol
        )
    except InvalidInput as exc:
        raise UsageError(str(exc)) from exc

    def run(item):
        key, adapters = item
        try:
            return key, irls_extract(adapters, config, key), None
        except (LoraSubspaceError, ArithmeticError, np.linalg.LinAlgError) as exc:
            return key, None, {"error": str(exc), "shape": ensemble.dims[key]}

    items = list(ensemble.layers.items())
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(run, items))
    done = {key: sub for key, sub, _ in results if sub is not None}
    failed = {key: err for key, _, err in results if err is not None}
    for key, err in failed.items():
        log.error("layer %s failed: %s", key, err["error"])
    ensemble_io.save(args.out, done, dtype=args.dtype, failures=failed, kind="subspace",
                     metadata={"config": config.to_json()})
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_spectrum(args) -> int:
    ensemble = ensemble_io.load(args.input)
    if not isinstance(ensemble, LoraEnsemble):
        raise IoError(f"{args.input} does not hold an ensemble")
    reports = []
    for key, adapters in ensemble.layers.items():
        r = args.r if args.r is not None else max(ad.rank for ad in adapters)
        d = args.d if args.d is not None else r
        c = weighted_mixture(adapters, np.ones(len(adapters)))
        reports.append(spectrum(c, key, r, d, args.min_ratio))
    rows = []
    for rep in reports:
        for i, (s, lg) in enumerate(zip(rep.sigma, rep.log10_sigma), start=1):
            rows.append([str(rep.layer), i, float(s), lg])
    payload = {"layers": [rep.to_json() for rep in reports], "min_ratio": args.min_ratio}
    _write_report(args.out, payload, ["layer", "index", "sigma", "log10_sigma"], rows)
    return EXIT_OK


def _load_subspaces(path) -> dict:
    subs = ensemble_io.load(path)
    if not isinstance(subs, dict) or not all(isinstance(k, LayerKey) for k in subs):
        raise IoError(f"{path} does not hold extracted subspaces")
    return subs


def cmd_overlap(args) -> int:
    first = _load_subspaces(args.a)
    if args.b is None:
        reports = pairwise_overlap(first, args.threshold)
    else:
        second = _load_subspaces(args.b)
        reports = []
        for ka in sorted(first):
            for kb in sorted(second):
                if ka.slot == kb.slot:
                    reports.append(
                        subspace_overlap(first[ka], second[kb], args.threshold, (str(ka), str(kb)), ka.slot)
                    )
    rows = [
        [rep.layer, rep.pair[0], rep.pair[1], rep.min_lambda, str(rep.disentangled).lower(),
         ";".join(repr(float(v)) for v in rep.lambdas)]
        for rep in reports
    ]
    payload = {"threshold": args.threshold, "reports": [rep.to_json() for rep in reports]}
    _write_report(args.out, payload, ["layer", "a", "b", "min_lambda", "disentangled", "lambdas"], rows)
    return EXIT_OK


def cmd_assemble(args) -> int:
    by_slot: dict[str, list] = {}
    for path in args.input:
        for key, sub in sorted(_load_subspaces(path).items()):
            by_slot.setdefault(key.slot, []).append(sub)
    if not by_slot:
        raise UsageError("no subspaces found in the inputs")
    bases = {}
    for slot, subs in sorted(by_slot.items()):
        bases[slot] = assemble_basis(subs)
    ensemble_io.save(args.out, bases, kind="basis")
    return EXIT_OK


def cmd_allocate(args) -> int:
    mats = ensemble_io.load(args.weights)
    if not isinstance(mats, dict) or not all(isinstance(v, np.ndarray) for v in mats.values()) or not mats:
        raise IoError(f"{args.weights} does not hold weight matrices")
    names = sorted(mats)
    eff = {name: effective_rank(mats[name]) for name in names}
    dims = allocate_ranks(eff, args.budget, args.clamp_min, args.strategy)
    payload = {
        "strategy": args.strategy,
        "budget": args.budget,
        "clamp_min": args.clamp_min,
        "layers": [{"name": name, "effective_rank": eff[name], "d": dims[name]} for name in names],
    }
    _write_text(args.out, json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_fit(args) -> int:
    if not Path(args.basis).is_dir():
        raise IoError(f"basis directory {args.basis} does not exist")
    bases = ensemble_io.load(args.basis)
    if not isinstance(bases, dict) or not all(hasattr(b, "a_bar") for b in bases.values()) or not bases:
        raise IoError(f"{args.basis} does not hold a basis")
    if args.layer is None:
        if len(bases) != 1:
            raise UsageError(f"basis holds {len(bases)} layers; pick one with --layer")
        (basis,) = bases.values()
    elif args.layer in bases:
        basis = bases[args.layer]
    else:
        raise UsageError(f"no layer {args.layer!r} in {args.basis}")
    data = ensemble_io.load(args.data)
    if not isinstance(data, dict) or "X" not in data or "Y" not in data:
        raise IoError(f"{args.data} must hold matrices named X and Y")
    _, trace = fit_m(basis, data["X"], data["Y"], args.lr, args.steps)
    rows = [[i, loss] for i, loss in enumerate(trace)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss"])
    writer.writerows([[i, repr(loss)] for i, loss in rows])
    _write_text(args.out, buf.getvalue())
    return EXIT_OK


def cmd_magnitudes(args) -> int:
    subs = {}
    for path in args.input:
        subs.update(_load_subspaces(path))
    curve = magnitude_curve(subs)
    rows = [[kind, scope, attr, idx, val] for (kind, scope, attr), pts in curve.items() for idx, val in pts]
    payload = {
        "series": [
            {"kind": kind, "scope": scope, "attribute": attr, "points": [[i, v] for i, v in pts]}
            for (kind, scope, attr), pts in curve.items()
        ]
    }
    _write_report(args.out, payload, ["kind", "scope", "attribute", "index", "sigma_max"], rows)
    return EXIT_OK


def _env_jobs() -> int:
    raw = os.environ.get(JOBS_ENV)
    if raw is None:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"{JOBS_ENV} must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lora-subspace", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file whose keys fill unset flags")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen", help="generate a planted ensemble and its truth subspace")
    p.add_argument("--spec", help="path to a JSON spec, or the JSON text itself")
    p.add_argument("--out")
    p.add_argument("--dtype", choices=["f64", "f32"])
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("extract", help="extract one shared subspace per layer")
    p.add_argument("--in", dest="input")
    p.add_argument("--out")
    p.add_argument("--dim", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--jobs", type=int)
    p.add_argument("--dtype", choices=["f64", "f32"])
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("spectrum", help="singular-value report of the unweighted mixture")
    p.add_argument("--in", dest="input")
    p.add_argument("--r", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--min-ratio", type=float)
    p.add_argument("--out", help="report path ending in .json or .csv, or - for stdout")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("overlap", help="generalized-eigenvalue overlap between subspaces")
    p.add_argument("--a")
    p.add_argument("--b")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_overlap)

    p = sub.add_parser("assemble", help="orthonormal basis from several subspace directories")
    p.add_argument("--in", dest="input", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("allocate", help="per-layer subspace sizes from weight matrices")
    p.add_argument("--weights")
    p.add_argument("--budget", type=int)
    p.add_argument("--strategy", choices=["uniform", "importance"])
    p.add_argument("--clamp-min", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("fit", help="gradient descent on the core matrix of a basis")
    p.add_argument("--basis")
    p.add_argument("--layer")
    p.add_argument("--data", help="matrices directory holding X and Y")
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("magnitudes", help="largest singular value per layer and attribute")
    p.add_argument("--in", dest="input", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_magnitudes)
    return parser


def _apply_config(args) -> None:
    config = {}
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise IoError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(config, dict):
            raise UsageError("config must be a JSON object")
    for key, value in config.items():
        dest = key.replace("-", "_")
        if dest == "in":
            dest = "input"
        if not hasattr(args, dest):
            raise UsageError(f"unknown config key {key!r} for command {args.command}")
        if getattr(args, dest) is None:
            setattr(args, dest, value)
    for dest, value in DEFAULTS.get(args.command, {}).items():
        if getattr(args, dest, None) is None:
            setattr(args, dest, value)
    if args.command == "extract" and args.jobs is None:
        args.jobs = _env_jobs()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        _apply_config(args)
        missing = [a for a in REQUIRED[args.command] if getattr(args, a, None) is None]
        if missing:
            raise UsageError(f"missing required options: {', '.join('--' + m.replace('_', '-') for m in missing)}")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LoraSubspaceError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
