"""Audit covariate shift between inspected customers and the whole population.

Exit codes: 0 success, 2 usage or input error, 3 nothing could be audited.
Every command writes ``manifest_<command>.json`` next to its outputs; the
recorded argv replays the run (``covshift replay``).
"""
from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import HIERARCHY_LEVELS, DataError, FeatureSchema, SchemaError, load_customers, write_customers
from .engine import (
    DEFAULT_THRESHOLD,
    AuditConfig,
    audit_features,
    write_report_csv,
    write_report_json,
)
from .spatial import (
    audit_divisions,
    rasterize,
    render,
    skip_summary,
    write_raster_csv,
    write_scores_csv,
    write_scores_geojson,
)
from .synthgen import PRESETS, SpecError, load_spec, preset, synthesize

log = logging.getLogger("covshift")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INCONCLUSIVE = 3


class UsageError(Exception):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, argv, config: dict, seed, inputs, outputs, started):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {Path(p).name: _sha256(p) for p in outputs},
        "tool": {"name": "covshift", "version": __version__, "python": platform.python_version(),
                 "numpy": np.__version__},
        "timing": {"started_unix": started, "elapsed_s": round(time.time() - started, 3)},
    }
    path = out_dir / f"manifest_{command}.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path


def _parse_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _dedupe(names: list[str]) -> list[str]:
    out = []
    for n in names:
        if n in out:
            log.warning("duplicate feature %r in set; ignoring the repeat", n)
            continue
        out.append(n)
    return out


def _config(args) -> AuditConfig:
    try:
        return AuditConfig(k=args.k, n_models=args.models, seed=args.seed, workers=args.workers)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load(args):
    try:
        schema = FeatureSchema.load(args.schema)
    except FileNotFoundError as exc:
        raise UsageError(f"schema file not found: {args.schema}") from exc
    except (SchemaError, OSError, ValueError) as exc:
        raise UsageError(f"bad schema {args.schema}: {exc}") from exc
    try:
        table = load_customers(args.data, schema, strict=args.strict)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    except DataError as exc:
        raise UsageError(str(exc)) from exc
    if table.inspected is None:
        raise UsageError(f"{args.data}: no '{schema.inspected_column}' column")
    if table.rejected:
        print(f"rejected {len(table.rejected)} row(s) of {args.data}", file=sys.stderr)
    return schema, table


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _audit_and_report(args, argv, command, feature_sets, stem):
    started = time.time()
    schema, table = _load(args)
    for fs in feature_sets:
        for name in fs:
            try:
                schema.feature(name)
            except SchemaError as exc:
                raise UsageError(str(exc)) from exc
    config = _config(args)
    rows = audit_features(table, None, feature_sets, config, args.threshold)
    out = _out_dir(args)
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    write_report_csv(rows, csv_path)
    write_report_json(rows, json_path, args.threshold, config)
    for r in rows:
        score = "" if r.mcc_max_mean is None else f"{r.mcc_max_mean:.5f}"
        sd = "" if r.reliability is None else f"{r.reliability:.5f}"
        print(f"{r.label:40s} {score:>9s} {sd:>9s} {r.verdict or r.status}")
    _write_manifest(out, command, argv, {**config.as_dict(), "threshold": args.threshold},
                    args.seed, [args.schema, args.data], [csv_path, json_path], started)
    return EXIT_OK


def cmd_audit_feature(args, argv):
    schema = FeatureSchema.load(args.schema) if Path(args.schema).is_file() else None
    if schema is None:
        raise UsageError(f"schema file not found: {args.schema}")
    names = _dedupe(_parse_list(args.features)) if args.features else schema.names
    return _audit_and_report(args, argv, "audit-feature", [(n,) for n in names], "feature_report")


def cmd_audit_compound(args, argv):
    if not Path(args.schema).is_file():
        raise UsageError(f"schema file not found: {args.schema}")
    schema = FeatureSchema.load(args.schema)
    if args.all_pairs:
        sets = [tuple(p) for p in itertools.combinations(schema.names, 2)]
    elif args.all:
        sets = [tuple(schema.names)]
    elif args.set:
        sets = [tuple(_dedupe(_parse_list(s))) for s in args.set]
    else:
        raise UsageError("give --all-pairs, --all or at least one --set")
    return _audit_and_report(args, argv, "audit-compound", sets, "compound_report")


def _parse_floats(text, n, what):
    try:
        vals = [float(t) for t in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad {what}: {text!r}") from exc
    if len(vals) != n:
        raise UsageError(f"{what} needs {n} comma-separated values")
    return vals


def cmd_audit_spatial(args, argv):
    started = time.time()
    schema, table = _load(args)
    if args.levels == "all":
        levels = list(HIERARCHY_LEVELS)
    else:
        levels = _parse_list(args.levels)
        bad = [lv for lv in levels if lv not in HIERARCHY_LEVELS]
        if bad:
            raise UsageError(f"unknown level(s) {bad}; choose from {', '.join(HIERARCHY_LEVELS)} or all")
    features = _dedupe(_parse_list(args.features)) if args.features else None
    if features is None and schema.location is None:
        raise UsageError("schema has no location feature; pass --features")
    for name in features or ():
        try:
            schema.feature(name)
        except SchemaError as exc:
            raise UsageError(str(exc)) from exc
    config = _config(args)
    loc = table.locations()
    if args.bounds:
        bounds = _parse_floats(args.bounds, 4, "--bounds")
    else:
        if loc is None or np.isnan(loc).all():
            raise UsageError("cannot infer bounds without locations; pass --bounds")
        lo = np.nanmin(loc, axis=0)
        hi = np.nanmax(loc, axis=0)
        # pad a zero-width extent so a single point still gets a grid
        pad = np.where(hi > lo, 0.0, 0.5)
        bounds = [float(lo[0] - pad[0]), float(hi[0] + pad[0]), float(lo[1] - pad[1]), float(hi[1] + pad[1])]
    if not (bounds[0] < bounds[1] and bounds[2] < bounds[3]):
        raise UsageError(f"--bounds must satisfy lon_min < lon_max and lat_min < lat_max, got {bounds}")
    nx, ny = (int(v) for v in _parse_floats(args.resolution, 2, "--resolution"))
    if nx < 1 or ny < 1:
        raise UsageError(f"--resolution needs two positive integers, got {args.resolution}")

    out = _out_dir(args)
    outputs = []
    summaries = {}
    any_scored = False
    for level in levels:
        scores = audit_divisions(table, None, level, features, config)
        summary = skip_summary(scores)
        summaries[level] = summary
        stem = out / f"spatial_{level}"
        paths = [Path(f"{stem}_scores.csv"), Path(f"{stem}_scores.geojson"), Path(f"{stem}_skips.json")]
        write_scores_csv(scores, paths[0])
        write_scores_geojson(scores, paths[1])
        with open(paths[2], "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
        skipped = {r: v["count"] for r, v in summary["skipped"].items() if v["count"]}
        print(f"{level}: {summary['n_scored']}/{summary['n_divisions']} divisions scored; skipped {skipped}")
        if summary["n_scored"] and any(d.centroid is not None for d in scores if d.scored):
            any_scored = True
            raster = rasterize(scores, bounds, (nx, ny))
            png = Path(f"{stem}_raster.png")
            render(raster, png, args.colormap)
            grid = Path(f"{stem}_raster.csv")
            write_raster_csv(raster, grid)
            paths += [png, png.with_suffix(".json"), grid]
        outputs += paths
    _write_manifest(out, "audit-spatial", argv,
                    {**config.as_dict(), "levels": levels, "bounds": bounds, "resolution": [nx, ny],
                     "features": features}, args.seed, [args.schema, args.data], outputs, started)
    if not any_scored:
        print("no division could be audited:", file=sys.stderr)
        for level, s in summaries.items():
            print(f"  {level}: " + json.dumps({r: v["count"] for r, v in s["skipped"].items()}), file=sys.stderr)
        return EXIT_INCONCLUSIVE
    return EXIT_OK


def cmd_gen_synthetic(args, argv):
    started = time.time()
    if args.preset and args.spec:
        raise UsageError("give either --preset or --spec, not both")
    try:
        if args.preset:
            pop_spec, bias = preset(args.preset, n=args.n, seed=args.seed)
        elif args.spec:
            pop_spec, bias = load_spec(args.spec)
            if args.n is not None:
                pop_spec = type(pop_spec)(args.n, pop_spec.clusters, pop_spec.categorical, pop_spec.seed, pop_spec.schema)
        else:
            raise UsageError(f"give --preset ({', '.join(sorted(PRESETS))}) or --spec")
    except SpecError as exc:
        raise UsageError(str(exc)) from exc
    except FileNotFoundError as exc:
        raise UsageError(f"spec file not found: {args.spec}") from exc
    table = synthesize(pop_spec, bias)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_customers(table, out)
    outputs = [out]
    schema_out = Path(args.schema_out) if args.schema_out else out.with_name(out.stem + ".schema.yaml")
    table.schema.save(schema_out)
    outputs.append(schema_out)
    n_sel = int(table.inspected.sum())
    print(f"wrote {table.n} customers ({n_sel} inspected) to {out}")
    inputs = [args.spec] if args.spec else []
    _write_manifest(out.parent, "gen-synthetic", argv,
                    {"preset": args.preset, "spec": args.spec, "n": pop_spec.n_customers},
                    pop_spec.seed, inputs, outputs, started)
    return EXIT_OK


def cmd_replay(args, argv):
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    for path, digest in manifest.get("inputs", {}).items():
        if not Path(path).is_file() or _sha256(path) != digest:
            raise UsageError(f"input {path} is missing or has changed since the recorded run")
    return main(manifest["argv"])


def _add_audit_args(p, spatial=False):
    p.add_argument("--schema", required=True, help="YAML schema file")
    p.add_argument("--data", required=True, help="customer CSV with inspected flag")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int, default=10, help="cross-validation folds")
    p.add_argument("--models", type=int, default=100, help="random tree configurations per audit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")
    p.add_argument("--strict", action="store_true", help="abort on the first invalid CSV row")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covshift", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"covshift {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("audit-feature", help="audit every single feature")
    _add_audit_args(p)
    p.add_argument("--features", help="comma-separated subset (default: all schema features)")

    p = sub.add_parser("audit-compound", help="audit feature combinations")
    _add_audit_args(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--all-pairs", action="store_true", help="every 2-combination of features")
    g.add_argument("--all", action="store_true", help="one audit on all features together")
    g.add_argument("--set", action="append", help="comma-separated feature set (repeatable)")

    p = sub.add_parser("audit-spatial", help="per-division audits and shift maps")
    _add_audit_args(p)
    p.add_argument("--levels", default="all", help=f"comma-separated subset of {', '.join(HIERARCHY_LEVELS)}, or all")
    p.add_argument("--features", help="features to audit per division (default: location)")
    p.add_argument("--bounds", help="lon_min,lon_max,lat_min,lat_max (default: data extent)")
    p.add_argument("--resolution", default="200,200", help="nx,ny raster cells")
    p.add_argument("--colormap", default="viridis")

    p = sub.add_parser("gen-synthetic", help="write a synthetic population CSV and its schema")
    p.add_argument("--preset", help=f"one of: {', '.join(sorted(PRESETS))}")
    p.add_argument("--spec", help="YAML population/bias spec")
    p.add_argument("--n", type=int, help="override the number of customers")
    p.add_argument("--seed", type=int, default=0, help="seed for presets")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--schema-out", help="schema YAML path (default: <out>.schema.yaml)")

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    return parser


COMMANDS = {
    "audit-feature": cmd_audit_feature,
    "audit-compound": cmd_audit_compound,
    "audit-spatial": cmd_audit_spatial,
    "gen-synthetic": cmd_gen_synthetic,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"covshift {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, DataError) as exc:
        print(f"covshift {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
