"""Per-division audits and nearest-centroid shift maps.

Each division (region, municipality, locality or neighborhood) is audited
on its own customers. Its score is pinned to the component-wise median
location of its members, and a raster is filled by assigning every cell the
score of the nearest scored centroid in raw lon/lat degrees.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .dataset import HIERARCHY_LEVELS, CustomerTable, SchemaError, split_by_flag
from .engine import AuditConfig, AuditInconclusive, AuditResult, quantify_shift

log = logging.getLogger(__name__)

UNASSIGNED = "__unassigned__"
TOO_FEW_CUSTOMERS = "too_few_customers"
SINGLE_CLASS = "single_class"
MCC_UNDEFINED = "mcc_undefined_everywhere"
SKIP_REASONS = (TOO_FEW_CUSTOMERS, SINGLE_CLASS, MCC_UNDEFINED)


@dataclass(frozen=True)
class DivisionScore:
    division_id: str
    level: str
    n_customers: int
    n_selected: int
    centroid: tuple[float, float] | None
    result: AuditResult | None = None
    skip_reason: str | None = None

    @property
    def score(self) -> float | None:
        return None if self.result is None else self.result.mcc_max_mean

    @property
    def scored(self) -> bool:
        return self.result is not None


@dataclass(frozen=True)
class ShiftRaster:
    """Grid of scores; ``cells[iy, ix]`` with row 0 at ``lat_max``, NaN = no data."""

    bounds: tuple[float, float, float, float]
    resolution: tuple[int, int]
    cells: np.ndarray

    def cell_centers(self):
        return cell_centers(self.bounds, self.resolution)


def partition(customers: CustomerTable, level: str) -> dict[str, np.ndarray]:
    """Row indices per division id, keys sorted; blank ids go under ``UNASSIGNED``."""
    if level not in HIERARCHY_LEVELS:
        raise SchemaError(f"unknown division level {level!r}")
    ids = customers.division_ids(level)
    ids = np.where(np.char.strip(ids.astype(str)) == "", UNASSIGNED, ids) if len(ids) else ids
    uniq, inv = np.unique(ids, return_inverse=True)
    return {str(u): np.flatnonzero(inv == j) for j, u in enumerate(uniq)}


def median_location(locations: np.ndarray) -> tuple[float, float] | None:
    loc = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
    loc = loc[~np.isnan(loc).any(axis=1)]
    if len(loc) == 0:
        return None
    med = np.median(loc, axis=0)
    return float(med[0]), float(med[1])


def _audit_one(args) -> DivisionScore:
    sub, flag, level, div_id, features, config = args
    loc = sub.locations()
    centroid = median_location(loc) if loc is not None else None
    n = sub.n
    n_sel = int(np.count_nonzero(flag))
    base = dict(division_id=div_id, level=level, n_customers=n, n_selected=n_sel, centroid=centroid)
    if n < max(config.k, 2):
        return DivisionScore(**base, skip_reason=TOO_FEW_CUSTOMERS)
    sel, rest, _ = split_by_flag(sub, features, flag)
    if len(sel.matrix) < config.k or len(rest.matrix) < config.k:
        return DivisionScore(**base, skip_reason=SINGLE_CLASS)
    try:
        res = quantify_shift(sel, rest, config)
    except AuditInconclusive:
        return DivisionScore(**base, skip_reason=MCC_UNDEFINED)
    return DivisionScore(**base, result=res)


def audit_divisions(
    customers: CustomerTable,
    inspected_flag,
    level: str,
    feature_set: Sequence[str] | None = None,
    config: AuditConfig = AuditConfig(),
) -> list[DivisionScore]:
    """Audit every division at ``level``; output ordered by division id.

    ``feature_set`` defaults to the schema's location feature. A division is
    skipped when it has fewer than ``max(k, 2)`` customers, when either class
    has fewer than ``k`` members, or when no fold MCC is ever defined.
    """
    schema = customers.schema
    if feature_set is None:
        if schema.location is None:
            raise SchemaError("schema has no location feature; pass feature_set")
        feature_set = (schema.location.name,)
    for name in feature_set:
        schema.feature(name)
    flag = customers.inspected if inspected_flag is None else np.asarray(inspected_flag, dtype=bool)
    if flag is None or len(flag) != customers.n:
        raise ValueError("need one inspected flag per customer")
    groups = partition(customers, level)
    groups.pop(UNASSIGNED, None)
    inner = AuditConfig(config.k, config.n_models, config.seed, config.ranges, config.class_weighting, 1)
    jobs = [(customers.take(idx), flag[idx], level, div_id, tuple(feature_set), inner)
            for div_id, idx in groups.items()]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            out = list(ex.map(_audit_one, jobs))
    else:
        out = [_audit_one(j) for j in jobs]
    log.info("%s: %d divisions, %d scored", level, len(out), sum(d.scored for d in out))
    return out


def skip_summary(scores: Sequence[DivisionScore]) -> dict:
    summary = {reason: [] for reason in SKIP_REASONS}
    for d in scores:
        if d.skip_reason:
            summary[d.skip_reason].append(d.division_id)
    return {
        "n_divisions": len(scores),
        "n_scored": sum(d.scored for d in scores),
        "skipped": {r: {"count": len(ids), "division_ids": ids} for r, ids in summary.items()},
    }


def cell_centers(bounds, resolution):
    lon_min, lon_max, lat_min, lat_max = bounds
    nx, ny = resolution
    lon = lon_min + (np.arange(nx) + 0.5) * ((lon_max - lon_min) / nx)
    lat = lat_max - (np.arange(ny) + 0.5) * ((lat_max - lat_min) / ny)
    return lon, lat


def _check_grid(bounds, resolution):
    lon_min, lon_max, lat_min, lat_max = bounds
    if not (lon_min < lon_max and lat_min < lat_max):
        raise ValueError(f"degenerate bounds {bounds}")
    nx, ny = resolution
    if nx < 1 or ny < 1:
        raise ValueError(f"invalid resolution {resolution}")


def rasterize(scores: Sequence[DivisionScore], bounds, resolution) -> ShiftRaster:
    """Nearest scored centroid per cell; ties go to the smallest division id."""
    bounds = tuple(float(b) for b in bounds)
    resolution = (int(resolution[0]), int(resolution[1]))
    _check_grid(bounds, resolution)
    pts = sorted((d.division_id, d.centroid, d.score) for d in scores if d.scored and d.centroid is not None)
    if not pts:
        raise ValueError("no scored division with a centroid to rasterize")
    cx = np.array([p[1][0] for p in pts])
    cy = np.array([p[1][1] for p in pts])
    val = np.array([p[2] for p in pts])
    lon, lat = cell_centers(bounds, resolution)
    nx, ny = resolution
    cells = np.empty((ny, nx))
    dx2 = (lon[:, None] - cx[None, :]) ** 2  # (nx, m)
    for iy in range(ny):
        d2 = dx2 + (lat[iy] - cy)[None, :] ** 2
        cells[iy] = val[np.argmin(d2, axis=1)]
    return ShiftRaster(bounds, resolution, cells)


def _lut(name: str) -> np.ndarray:
    from matplotlib import colormaps

    cmap = colormaps[name]
    return np.round(cmap(np.linspace(0.0, 1.0, 256)) * 255).astype(np.uint8)


def render(raster: ShiftRaster, out, colormap: str = "viridis") -> dict:
    """Write a PNG (RGBA, no-data transparent) plus a ``.json`` sidecar.

    Colors span ``[0, max score]``; negative scores take the lowest color.
    Returns the sidecar dict.
    """
    out = Path(out)
    cells = raster.cells
    data = ~np.isnan(cells)
    vmax = float(cells[data].max()) if data.any() else 0.0
    scale_max = max(vmax, 0.0)
    idx = np.zeros(cells.shape, dtype=np.int64)
    if scale_max > 0:
        idx[data] = np.round(np.clip(cells[data] / scale_max, 0.0, 1.0) * 255).astype(np.int64)
    rgba = _lut(colormap)[idx]
    rgba[~data] = 0
    Image.fromarray(rgba, mode="RGBA").save(out, format="PNG", optimize=False)
    sidecar = {
        "bounds": list(raster.bounds),
        "resolution": list(raster.resolution),
        "color_scale_min": 0.0,
        "color_scale_max": scale_max,
        "colormap": colormap,
        "no_data": "transparent",
        "image": out.name,
    }
    with open(out.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
    return sidecar


def _num(x) -> str:
    return "" if x is None else repr(float(x))


SCORE_COLUMNS = (
    "division_id", "level", "n_customers", "n_selected", "centroid_lon", "centroid_lat",
    "mcc_max_mean", "reliability", "folds_skipped", "skip_reason",
)


def write_scores_csv(scores: Sequence[DivisionScore], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for d in scores:
            c = d.centroid or (None, None)
            r = d.result
            w.writerow([
                d.division_id, d.level, d.n_customers, d.n_selected, _num(c[0]), _num(c[1]),
                _num(d.score), _num(r.reliability if r else None),
                "" if r is None else r.folds_skipped, d.skip_reason or "",
            ])


def write_scores_geojson(scores: Sequence[DivisionScore], path) -> None:
    feats = []
    for d in scores:
        if d.centroid is None:
            continue
        r = d.result
        feats.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [d.centroid[0], d.centroid[1]]},
            "properties": {
                "division_id": d.division_id,
                "level": d.level,
                "n_customers": d.n_customers,
                "n_selected": d.n_selected,
                "mcc_max_mean": d.score,
                "reliability": None if r is None else r.reliability,
                "skip_reason": d.skip_reason,
            },
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"type": "FeatureCollection", "features": feats}, fh, indent=2)
        fh.write("\n")


def write_raster_csv(raster: ShiftRaster, path) -> None:
    """First row: cell-center longitudes; each later row: latitude then scores."""
    lon, lat = raster.cell_centers()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lat\\lon"] + [repr(float(x)) for x in lon])
        for iy in range(raster.resolution[1]):
            w.writerow([repr(float(lat[iy]))] + [_num(None if np.isnan(v) else v) for v in raster.cells[iy]])
