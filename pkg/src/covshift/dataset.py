"""Customer tables, CSV ingestion, one-hot encoding and selection labelling."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import yaml

log = logging.getLogger(__name__)

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"
LOCATION = "location"
KINDS = (CATEGORICAL, CONTINUOUS, LOCATION)

HIERARCHY_LEVELS = ("region", "municipality", "locality", "neighborhood")
MISSING_CATEGORY = ""
_MISSING_NUMERIC = {"", "nan", "NaN", "NA"}
_TRUE = {"1", "true", "True", "TRUE", "yes", "y"}
_FALSE = {"0", "false", "False", "FALSE", "no", "n"}


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str
    levels: tuple[str, ...] = ()
    # CSV column names; defaults to (name,) or (name_lon, name_lat) for locations
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        if self.kind == CATEGORICAL:
            if not self.levels:
                raise SchemaError(f"feature {self.name!r}: categorical needs levels")
            if len(set(self.levels)) != len(self.levels):
                raise SchemaError(f"feature {self.name!r}: duplicate levels")
            if MISSING_CATEGORY in self.levels:
                raise SchemaError(f"feature {self.name!r}: empty string is reserved for missing")
        elif self.levels:
            raise SchemaError(f"feature {self.name!r}: only categorical features take levels")
        if not self.columns:
            cols = (f"{self.name}_lon", f"{self.name}_lat") if self.kind == LOCATION else (self.name,)
            object.__setattr__(self, "columns", cols)
        else:
            object.__setattr__(self, "columns", tuple(self.columns))
        want = 2 if self.kind == LOCATION else 1
        if len(self.columns) != want:
            raise SchemaError(f"feature {self.name!r}: expected {want} column(s)")

    @property
    def encoded_names(self) -> list[str]:
        if self.kind == CATEGORICAL:
            return [f"{self.name}={lvl}" for lvl in self.levels]
        if self.kind == LOCATION:
            return [f"{self.name}.lon", f"{self.name}.lat"]
        return [self.name]

    @property
    def width(self) -> int:
        return len(self.encoded_names)


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]
    hierarchy_columns: tuple[str, ...] = HIERARCHY_LEVELS
    inspected_column: str = "inspected"
    id_column: str = "customer_id"

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "hierarchy_columns", tuple(self.hierarchy_columns))
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        if sum(f.kind == LOCATION for f in self.features) > 1:
            raise SchemaError("at most one location feature is allowed")
        if len(self.hierarchy_columns) != len(HIERARCHY_LEVELS):
            raise SchemaError(f"hierarchy needs {len(HIERARCHY_LEVELS)} columns")
        cols = self.csv_columns
        if len(set(cols)) != len(cols):
            raise SchemaError("CSV column names collide")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def feature(self, name: str) -> Feature:
        for f in self.features:
            if f.name == name:
                return f
        raise SchemaError(f"unknown feature {name!r}")

    @property
    def location(self) -> Feature | None:
        for f in self.features:
            if f.kind == LOCATION:
                return f
        return None

    @property
    def csv_columns(self) -> list[str]:
        cols = [self.id_column]
        for f in self.features:
            cols.extend(f.columns)
        cols.extend(self.hierarchy_columns)
        cols.append(self.inspected_column)
        return cols

    def hierarchy_column(self, level: str) -> str:
        if level not in HIERARCHY_LEVELS:
            raise SchemaError(f"unknown division level {level!r}")
        return self.hierarchy_columns[HIERARCHY_LEVELS.index(level)]

    def to_dict(self) -> dict:
        feats = []
        for f in self.features:
            d = {"name": f.name, "kind": f.kind}
            if f.levels:
                d["levels"] = list(f.levels)
            d["columns"] = list(f.columns)
            feats.append(d)
        return {
            "features": feats,
            "hierarchy_columns": list(self.hierarchy_columns),
            "inspected_column": self.inspected_column,
            "id_column": self.id_column,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        if not isinstance(d, dict) or "features" not in d:
            raise SchemaError("schema needs a 'features' list")
        try:
            feats = tuple(
                Feature(
                    name=str(f["name"]),
                    kind=str(f["kind"]),
                    levels=tuple(f.get("levels", ())),
                    columns=tuple(f.get("columns", ())),
                )
                for f in d["features"]
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed feature entry: {exc}") from exc
        kw = {k: d[k] for k in ("inspected_column", "id_column") if k in d}
        if "hierarchy_columns" in d:
            kw["hierarchy_columns"] = tuple(d["hierarchy_columns"])
        return cls(features=feats, **kw)

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        """Read a YAML (or JSON) schema file."""
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


CLASS_LEVELS = (
    "power_generation", "residential", "commercial", "industrial", "public",
    "public_illumination", "rural", "public_service", "reseller",
)
METER_TYPES = tuple(f"M{i:02d}" for i in range(1, 23))


def default_schema() -> FeatureSchema:
    """The six customer master-data features audited by default."""
    return FeatureSchema(
        features=(
            Feature("class", CATEGORICAL, CLASS_LEVELS),
            Feature("contract_status", CATEGORICAL, ("active", "suspended")),
            Feature("location", LOCATION, columns=("longitude", "latitude")),
            Feature("meter_type", CATEGORICAL, METER_TYPES),
            Feature("number_of_wires", CATEGORICAL, ("1", "2", "3")),
            Feature("voltage", CATEGORICAL, ("<=2.3kV", ">2.3kV")),
        )
    )


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CustomerTable:
    """Immutable population container.

    ``values`` maps feature name to an array: strings for categorical
    features (``""`` = missing), float64 for continuous ones and an (n, 2)
    float64 (lon, lat) array for the location; NaN marks missing numbers.
    """

    schema: FeatureSchema
    values: dict
    hierarchy_ids: np.ndarray
    customer_ids: np.ndarray
    inspected: np.ndarray | None = None
    rejected: tuple = field(default=(), compare=False)

    def __post_init__(self):
        n = len(self.customer_ids)
        if self.hierarchy_ids.shape != (n, len(HIERARCHY_LEVELS)):
            raise DataError("hierarchy id matrix has the wrong shape")
        for name in self.schema.names:
            if name not in self.values or len(self.values[name]) != n:
                raise DataError(f"feature {name!r} missing or of the wrong length")
        if self.inspected is not None and len(self.inspected) != n:
            raise DataError("inspected flag length mismatch")
        if len(set(self.customer_ids.tolist())) != n:
            raise DataError("customer ids must be unique")
        for v in self.values.values():
            _freeze(v)
        _freeze(self.hierarchy_ids)
        _freeze(self.customer_ids)
        if self.inspected is not None:
            _freeze(self.inspected)

    @property
    def n(self) -> int:
        return len(self.customer_ids)

    def __len__(self) -> int:
        return self.n

    def take(self, idx) -> "CustomerTable":
        idx = np.asarray(idx)
        return CustomerTable(
            schema=self.schema,
            values={k: v[idx].copy() for k, v in self.values.items()},
            hierarchy_ids=self.hierarchy_ids[idx].copy(),
            customer_ids=self.customer_ids[idx].copy(),
            inspected=None if self.inspected is None else self.inspected[idx].copy(),
        )

    def with_inspected(self, flag) -> "CustomerTable":
        flag = np.asarray(flag, dtype=bool).copy()
        return CustomerTable(self.schema, dict(self.values), self.hierarchy_ids,
                             self.customer_ids, flag, self.rejected)

    def division_ids(self, level: str) -> np.ndarray:
        if level not in HIERARCHY_LEVELS:
            raise SchemaError(f"unknown division level {level!r}")
        return self.hierarchy_ids[:, HIERARCHY_LEVELS.index(level)]

    def locations(self) -> np.ndarray | None:
        loc = self.schema.location
        return None if loc is None else self.values[loc.name]


def _parse_number(text: str) -> float:
    text = text.strip()
    if text in _MISSING_NUMERIC:
        return float("nan")
    return float(text)


def load_customers(path, schema: FeatureSchema, strict: bool = False) -> CustomerTable:
    """Parse a customer CSV against ``schema``.

    Invalid rows are dropped and listed in ``table.rejected`` as
    ``(line_number, reason)``; with ``strict=True`` the first one raises
    :class:`DataError` instead. The inspected-flag column is optional.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such customer file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: missing header row") from None
        required = [c for c in schema.csv_columns if c != schema.inspected_column]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}: header lacks columns {missing}")
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate header columns")
        pos = {c: i for i, c in enumerate(header)}
        has_flag = schema.inspected_column in pos

        ids, hier, flags = [], [], []
        vals = {f.name: [] for f in schema.features}
        level_sets = {f.name: set(f.levels) for f in schema.features if f.kind == CATEGORICAL}
        seen = set()
        rejected = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                if len(rec) != len(header):
                    raise DataError(f"expected {len(header)} fields, got {len(rec)}")
                row_vals = {}
                for f in schema.features:
                    if f.kind == CATEGORICAL:
                        v = rec[pos[f.columns[0]]]
                        if v != MISSING_CATEGORY and v not in level_sets[f.name]:
                            raise DataError(f"{f.name}: value {v!r} not among declared levels")
                        row_vals[f.name] = v
                    elif f.kind == CONTINUOUS:
                        row_vals[f.name] = _parse_number(rec[pos[f.columns[0]]])
                    else:
                        lon = _parse_number(rec[pos[f.columns[0]]])
                        lat = _parse_number(rec[pos[f.columns[1]]])
                        if not np.isnan(lon) and not -180.0 <= lon <= 180.0:
                            raise DataError(f"longitude {lon} out of range")
                        if not np.isnan(lat) and not -90.0 <= lat <= 90.0:
                            raise DataError(f"latitude {lat} out of range")
                        row_vals[f.name] = (lon, lat)
                cid = rec[pos[schema.id_column]]
                if cid in seen:
                    raise DataError(f"duplicate customer id {cid!r}")
                flag = False
                if has_flag:
                    raw = rec[pos[schema.inspected_column]].strip()
                    if raw in _TRUE:
                        flag = True
                    elif raw not in _FALSE:
                        raise DataError(f"inspected flag {raw!r} is not boolean")
            except (DataError, ValueError) as exc:
                if strict:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
                rejected.append((lineno, str(exc)))
                continue
            seen.add(cid)
            ids.append(cid)
            hier.append([rec[pos[c]] for c in schema.hierarchy_columns])
            flags.append(flag)
            for k, v in row_vals.items():
                vals[k].append(v)

    values = {}
    for f in schema.features:
        if f.kind == CATEGORICAL:
            values[f.name] = np.array(vals[f.name], dtype=str)
        elif f.kind == CONTINUOUS:
            values[f.name] = np.array(vals[f.name], dtype=np.float64)
        else:
            values[f.name] = np.array(vals[f.name], dtype=np.float64).reshape(-1, 2)
    if rejected:
        log.warning("%s: rejected %d row(s)", path, len(rejected))
    return CustomerTable(
        schema=schema,
        values=values,
        hierarchy_ids=np.array(hier, dtype=str).reshape(-1, len(HIERARCHY_LEVELS)),
        customer_ids=np.array(ids, dtype=str),
        inspected=np.array(flags, dtype=bool) if has_flag else None,
        rejected=tuple(rejected),
    )


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def write_customers(table: CustomerTable, path) -> None:
    """Inverse of :func:`load_customers`; floats use shortest round-trip repr."""
    schema = table.schema
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.csv_columns)
        for i in range(table.n):
            row = [table.customer_ids[i]]
            for f in schema.features:
                v = table.values[f.name][i]
                if f.kind == CATEGORICAL:
                    row.append(str(v))
                elif f.kind == CONTINUOUS:
                    row.append(_fmt(v))
                else:
                    row.extend((_fmt(v[0]), _fmt(v[1])))
            row.extend(table.hierarchy_ids[i])
            flag = table.inspected[i] if table.inspected is not None else False
            row.append("1" if flag else "0")
            w.writerow(row)


class Encoded(NamedTuple):
    matrix: np.ndarray
    column_names: tuple[str, ...]


def _resolve(schema: FeatureSchema, features: Iterable[str]) -> list[Feature]:
    wanted = list(features)
    for name in wanted:
        schema.feature(name)
    # schema order regardless of request order
    return [f for f in schema.features if f.name in wanted]


def encode(table: CustomerTable, features: Iterable[str]) -> Encoded:
    """One-hot expand categorical features; numeric ones pass through.

    Columns follow schema order, categorical levels in declared order. A
    missing category encodes as an all-zero block; missing numbers stay NaN.
    """
    feats = _resolve(table.schema, features)
    if not feats:
        raise SchemaError("no features requested")
    blocks, names = [], []
    for f in feats:
        v = table.values[f.name]
        if f.kind == CATEGORICAL:
            lv = np.array(f.levels, dtype=str)
            blocks.append((v[:, None] == lv[None, :]).astype(np.float64))
        elif f.kind == CONTINUOUS:
            blocks.append(v.astype(np.float64).reshape(-1, 1))
        else:
            blocks.append(v.astype(np.float64).reshape(-1, 2))
        names.extend(f.encoded_names)
    matrix = np.ascontiguousarray(np.hstack(blocks)) if table.n else np.zeros((0, len(names)))
    return Encoded(matrix, tuple(names))


def decode_categorical(encoded: Encoded, feature: Feature) -> np.ndarray:
    """Recover categorical values from their one-hot block (``""`` if all-zero)."""
    prefix = f"{feature.name}="
    idx = [i for i, c in enumerate(encoded.column_names) if c.startswith(prefix)]
    if len(idx) != len(feature.levels):
        raise SchemaError(f"feature {feature.name!r} is not in the encoded matrix")
    block = encoded.matrix[:, idx]
    out = np.array(feature.levels, dtype=str)[block.argmax(axis=1)] if len(block) else np.array([], dtype=str)
    return np.where(block.sum(axis=1) > 0, out, MISSING_CATEGORY)


@dataclass(frozen=True)
class LabeledTable:
    """Merged matrix with the selection label (1 = inspected, 0 = not).

    ``source`` records provenance per row: (label, row index in its input).
    """

    feature_matrix: np.ndarray
    s: np.ndarray
    column_names: tuple[str, ...]
    source: np.ndarray

    @property
    def n(self) -> int:
        return len(self.s)

    def class_counts(self) -> tuple[int, int]:
        n1 = int(np.count_nonzero(self.s))
        return self.n - n1, n1


def _as_encoded(m) -> Encoded:
    if isinstance(m, Encoded):
        return m
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    return Encoded(m, tuple(f"x{i}" for i in range(m.shape[1])))


def label_selection(selected, not_selected) -> LabeledTable:
    a = _as_encoded(selected)
    b = _as_encoded(not_selected)
    if len(a.matrix) == 0:
        raise DataError("no selected examples")
    if len(b.matrix) == 0:
        raise DataError("no not-selected examples")
    if a.matrix.shape[1] != b.matrix.shape[1] or a.column_names != b.column_names:
        raise DataError("selected and not-selected matrices have different column layouts")
    X = np.ascontiguousarray(np.vstack([a.matrix, b.matrix]))
    s = np.concatenate([np.ones(len(a.matrix), np.int8), np.zeros(len(b.matrix), np.int8)])
    source = np.concatenate([
        np.stack([np.ones(len(a.matrix), np.int64), np.arange(len(a.matrix))], axis=1),
        np.stack([np.zeros(len(b.matrix), np.int64), np.arange(len(b.matrix))], axis=1),
    ])
    return LabeledTable(_freeze(X), _freeze(s), a.column_names, _freeze(source))


def split_by_flag(table: CustomerTable, features: Sequence[str], inspected=None):
    """Encode ``features`` and split rows by the inspected flag.

    Rows with a missing continuous/location value in an audited column are
    dropped. Returns ``(selected, not_selected, n_dropped)``.
    """
    flag = table.inspected if inspected is None else np.asarray(inspected, dtype=bool)
    if flag is None:
        raise DataError("table carries no inspected flag")
    if len(flag) != table.n:
        raise DataError("inspected flag length mismatch")
    enc = encode(table, features)
    ok = ~np.isnan(enc.matrix).any(axis=1)
    sel = Encoded(enc.matrix[ok & flag], enc.column_names)
    rest = Encoded(enc.matrix[ok & ~flag], enc.column_names)
    return sel, rest, int(np.count_nonzero(~ok))
