"""Command line entry point.

Verbs: ``gen``, ``invert``, ``edit``, ``reconstruct``, ``bench-order`` and
``metrics``. Configuration resolves in layers: built-in defaults, then the
``VOXFLOW_SEED`` environment variable, then the ``--config`` file, then
``--steps`` and ``--set key=value`` overrides.

Exit codes: 0 ok, 2 usage, 3 io/format, 4 numeric, 5 cache miss/alignment.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .errors import AlignmentError, FormatError, NumericError, UsageError, VoxflowError
from .fields.analytic import make_analytic_field
from .formats import read_manifest, read_mask, sha256_file, write_keyvalue, write_manifest, write_mask
from .lattice import BinaryMask3D, dilate_mask
from .metrics import PointSet, chamfer, preservation_metrics
from .pipeline import Asset, AssetInversion, RunConfig, invert_asset, reconstruct_asset, run_two_stage_edit
from .solver import convergence_probe
from .synth import ShapeSpec, gen_asset, gen_edit_scenario

log = logging.getLogger("voxflow")

VERBS = ("gen", "invert", "edit", "reconstruct", "bench-order", "metrics")
SEED_ENV = "VOXFLOW_SEED"


# -- configuration ------------------------------------------------------------


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise FormatError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        values[key.strip()] = value.strip()
    return values


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config_text(text, str(path))


def parse_override(item: str) -> tuple[str, str]:
    key, sep, value = item.partition("=")
    if not sep or not key.strip():
        raise UsageError(f"--set expects key=value, got {item!r}")
    return key.strip(), value.strip()


def resolve_config(config_path=None, overrides=(), steps=None, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    values: dict = {}
    if environ.get(SEED_ENV):
        values["seed"] = environ[SEED_ENV]
    if config_path is not None:
        values.update(load_config_file(config_path))
    for item in overrides:
        key, value = parse_override(item)
        values[key] = value
    if steps is not None:
        values["steps"] = steps
    return RunConfig.from_dict(values)


# -- argument parsing ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxflow", description="Mask-guided editing of voxel latents with flow inversion.")
    parser.add_argument("--version", action="version", version=f"voxflow {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--steps", type=int, help="number of schedule steps")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("gen", help="write a synthetic asset and its edit mask"))
    p.add_argument("--out", type=Path, required=True)

    p = common(sub.add_parser("invert", help="invert an asset and spill trajectory and KV caches"))
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = common(sub.add_parser("edit", help="two-stage masked edit"))
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--cache", type=Path, help="inversion directory written by 'invert'")

    p = common(sub.add_parser("reconstruct", help="invert and regenerate without replacement"))
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = common(sub.add_parser("bench-order", help="solver convergence order on an analytic field"))
    p.add_argument("--out", type=Path)

    p = common(sub.add_parser("metrics", help="preservation metrics between two assets"))
    p.add_argument("--in", dest="inp", type=Path, required=True, help="edited asset")
    p.add_argument("--ref", type=Path, required=True, help="source asset")
    p.add_argument("--mask", type=Path, help="edit mask; omitted means nothing was edited")
    p.add_argument("--out", type=Path)
    return parser


def parse_invocation(argv) -> tuple[argparse.Namespace, RunConfig]:
    args = build_parser().parse_args(argv)
    for name in ("inp", "ref", "mask", "cache", "config"):
        path = getattr(args, name, None)
        if path is not None and not path.exists():
            raise FormatError(f"--{'in' if name == 'inp' else name} path does not exist: {path}")
    if args.steps is not None and args.steps < 1:
        raise UsageError("--steps must be >= 1")
    config = resolve_config(args.config, args.overrides, args.steps)
    return args, config


# -- verbs -----------------------------------------------------------------------------


def _floats(text: str, n: int, key: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"config key {key!r}: expected {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise UsageError(f"config key {key!r}: expected {n} numbers, got {len(vals)}")
    return vals


def shape_spec(config: RunConfig) -> ShapeSpec:
    return ShapeSpec(
        kind=config.shape,
        center=_floats(config.shape_center, 3, "shape_center"),
        radius=config.shape_radius,
        lo=_floats(config.shape_lo, 3, "shape_lo"),
        hi=_floats(config.shape_hi, 3, "shape_hi"),
        notch=config.shape_notch,
        seed=config.seed,
    )


def _outputs(directory: Path) -> dict:
    directory = Path(directory)
    return {
        str(p.relative_to(directory)): sha256_file(p)
        for p in sorted(directory.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }


def _finish(out: Path, verb: str, config: RunConfig, inputs: dict, results: dict, started: float) -> None:
    body = {
        "verb": verb,
        "version": __version__,
        "config": config.to_dict(),
        "inputs": inputs,
        "results": results,
        "outputs": _outputs(out),
    }
    volatile = {
        "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "elapsed_s": round(time.perf_counter() - started, 3),
    }
    write_manifest(out / "manifest.json", body, volatile)


def _print(results: dict) -> None:
    for key, value in results.items():
        print(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")


def _asset_inputs(path: Path) -> dict:
    return {f"{path.name}/{n}": sha256_file(path / n) for n in ("st.vxg", "slat.vxs")}


def cmd_gen(args, config: RunConfig, started: float) -> int:
    asset = gen_asset(shape_spec(config), config.resolution, config.resolution, config.slat_channels)
    out = args.out
    asset.save(out, {"shape": config.shape})
    if config.region:
        scenario = gen_edit_scenario(asset, config.region, config.occupancy_threshold)
        mask, region = scenario.mask, scenario.region
        results = {"mask_active": scenario.mask_active, "keep_count": scenario.keep_count}
    else:
        mask, region, results = BinaryMask3D.empty(asset.st_grid.dims), "", {}
    write_mask(out / "mask.vxg", mask)
    results = {
        "occupied": int(asset.occupancy().sum()),
        "slat_count": len(asset.slat),
        "region": region,
        "mask_voxels": mask.count(),
        **results,
    }
    write_keyvalue(out / "report.txt", results)
    _finish(out, "gen", config, {}, results, started)
    _print(results)
    return 0


def cmd_invert(args, config: RunConfig, started: float) -> int:
    asset = Asset.load(args.inp)
    inv = invert_asset(asset, config, capture=config.use_kv_replacement)
    args.out.mkdir(parents=True, exist_ok=True)
    inv.save(args.out)
    results = {
        "steps": config.steps,
        "st_evaluations": inv.st.evaluations,
        "slat_evaluations": inv.slat.evaluations,
        "st_kv_entries": len(inv.st.store) if inv.st.store is not None else 0,
        "slat_kv_entries": len(inv.slat.store) if inv.slat.store is not None else 0,
    }
    write_keyvalue(args.out / "report.txt", results)
    _finish(args.out, "invert", config, _asset_inputs(args.inp), results, started)
    _print(results)
    return 0


def _load_cache(cache: Path, asset_dir: Path) -> AssetInversion:
    manifest = read_manifest(cache / "manifest.json")
    recorded = manifest.get("body", {}).get("inputs", {})
    current = _asset_inputs(asset_dir)
    if sorted(recorded.values()) != sorted(current.values()):
        raise AlignmentError(f"inversion cache {cache} was computed from a different asset than {asset_dir}")
    return AssetInversion.load(cache)


def cmd_edit(args, config: RunConfig, started: float) -> int:
    asset = Asset.load(args.inp)
    mask = read_mask(args.mask)
    inversion = _load_cache(args.cache, args.inp) if args.cache is not None else None
    result = run_two_stage_edit(asset, mask, config=config, inversion=inversion)
    result.asset.save(args.out)
    report = dict(result.report)
    report["warnings"] = "; ".join(report["warnings"]) or "none"
    write_keyvalue(args.out / "report.txt", report)
    inputs = {**_asset_inputs(args.inp), "mask": sha256_file(args.mask)}
    _finish(args.out, "edit", config, inputs, report, started)
    _print({k: v for k, v in report.items() if not k.endswith("sha256_in") and not k.endswith("sha256_out")})
    return 0


def cmd_reconstruct(args, config: RunConfig, started: float) -> int:
    asset = Asset.load(args.inp)
    rec, errors = reconstruct_asset(asset, config, config.recon_stages)
    rec.save(args.out)
    write_keyvalue(args.out / "report.txt", errors)
    _finish(args.out, "reconstruct", config, _asset_inputs(args.inp), errors, started)
    _print(errors)
    return 0


def cmd_bench_order(args, config: RunConfig, started: float) -> int:
    params = {"lam": config.probe_lambda} if config.probe_field == "linear" else {}
    field = make_analytic_field(config.probe_field, **params)
    steps = [int(v) for v in _floats(config.probe_steps, len(config.probe_steps.split(",")), "probe_steps")]
    results = {"field": config.probe_field, "step_counts": steps}
    for method in ("taylor", "euler"):
        probe = convergence_probe(field, steps, method=method)
        results[f"{method}_errors"] = probe.errors
        results[f"{method}_slope"] = "exact" if probe.exact else probe.slope
    _print(results)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_keyvalue(args.out / "report.txt", results)
        _finish(args.out, "bench-order", config, {}, results, started)
    return 0


def cmd_metrics(args, config: RunConfig, started: float) -> int:
    edited = Asset.load(args.inp)
    source = Asset.load(args.ref)
    dims = source.st_grid.dims
    if edited.st_grid.dims != dims:
        raise AlignmentError(f"asset grids differ: {edited.st_grid.dims} vs {dims}")
    mask = read_mask(args.mask) if args.mask is not None else BinaryMask3D.empty(dims)
    region = dilate_mask(mask, config.dilation_radius) if config.use_soft_mask else mask
    results = preservation_metrics(source, edited, region, config.metrics_axis, config.occupancy_threshold)
    thr = config.occupancy_threshold
    a, b = PointSet.from_occupancy(source.occupancy(thr)), PointSet.from_occupancy(edited.occupancy(thr))
    if len(a) and len(b):
        results["chamfer_full"] = chamfer(a, b)
    results["projection"] = f"orthographic mean feature magnitude along {config.metrics_axis}"
    _print(results)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_keyvalue(args.out / "report.txt", results)
        inputs = {**_asset_inputs(args.inp), **_asset_inputs(args.ref)}
        _finish(args.out, "metrics", config, inputs, results, started)
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "invert": cmd_invert,
    "edit": cmd_edit,
    "reconstruct": cmd_reconstruct,
    "bench-order": cmd_bench_order,
    "metrics": cmd_metrics,
}


def execute(args, config: RunConfig) -> int:
    started = time.perf_counter()
    return COMMANDS[args.verb](args, config, started)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    verbose = "-v" in argv or "--verbose" in argv
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args, config = parse_invocation(argv)
        return execute(args, config)
    except VoxflowError as exc:
        print(f"voxflow: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"voxflow: error: {exc}", file=sys.stderr)
        return FormatError.exit_code
    except FloatingPointError as exc:
        print(f"voxflow: error: {exc}", file=sys.stderr)
        return NumericError.exit_code


if __name__ == "__main__":
    sys.exit(main())
