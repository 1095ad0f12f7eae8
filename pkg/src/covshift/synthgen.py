"""Synthetic customer populations with feature-dependent inspection bias.

A population is a mixture of Gaussian spatial clusters, each carrying fixed
region/municipality/locality ids; neighborhoods are square grid cells laid
over each cluster. Categorical features are drawn i.i.d. from per-feature
distributions. Inspection depends on the features only: each customer is
inspected independently with probability

    clip(base_rate * prod(factor_j ** strength), 0, 1)

over all bias factors that apply to the customer. There is no outcome
variable at all.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from . import rng as rngmod
from .dataset import CATEGORICAL, CONTINUOUS, HIERARCHY_LEVELS, CustomerTable, FeatureSchema, default_schema

BLOCK = 4096


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class Cluster:
    name: str
    center: tuple[float, float]
    std: float
    weight: float
    region: str
    municipality: str
    locality: str
    neighborhood_cell: float = 0.05

    def __post_init__(self):
        if not (self.std >= 0 and math.isfinite(self.std)):
            raise SpecError(f"cluster {self.name!r}: std must be finite and >= 0")
        if not self.weight > 0:
            raise SpecError(f"cluster {self.name!r}: weight must be > 0")
        if not self.neighborhood_cell > 0:
            raise SpecError(f"cluster {self.name!r}: neighborhood_cell must be > 0")


@dataclass(frozen=True)
class PopulationSpec:
    n_customers: int
    clusters: tuple[Cluster, ...]
    # feature -> {level: weight}; features left out are uniform over their levels
    categorical: dict = field(default_factory=dict)
    seed: int = 0
    schema: FeatureSchema = field(default_factory=default_schema)

    def __post_init__(self):
        if self.n_customers < 0:
            raise SpecError("n_customers must be >= 0")
        if not self.clusters:
            raise SpecError("at least one cluster is required")
        if any(f.kind == CONTINUOUS for f in self.schema.features):
            raise SpecError("the generator only produces categorical and location features")
        for name, dist in self.categorical.items():
            feat = self.schema.feature(name)
            if feat.kind != CATEGORICAL:
                raise SpecError(f"{name!r} is not categorical")
            for lvl, w in dist.items():
                if str(lvl) not in feat.levels:
                    raise SpecError(f"{name!r}: unknown level {lvl!r}")
                if not (w > 0 and math.isfinite(w)):
                    raise SpecError(f"{name!r}: weight of {lvl!r} must be > 0")

    def level_probabilities(self, name: str) -> np.ndarray:
        feat = self.schema.feature(name)
        dist = {str(k): float(v) for k, v in self.categorical.get(name, {}).items()}
        if not dist:
            return np.full(len(feat.levels), 1.0 / len(feat.levels))
        w = np.array([dist.get(lvl, 0.0) for lvl in feat.levels])
        return w / w.sum()


@dataclass(frozen=True)
class BoxFactor:
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float
    factor: float


@dataclass(frozen=True)
class BiasSpec:
    base_rate: float
    strength: float = 1.0
    # {(feature, level): factor}
    feature_factors: dict = field(default_factory=dict)
    # {(hierarchy level, division id): factor}
    division_factors: dict = field(default_factory=dict)
    box_factors: tuple[BoxFactor, ...] = ()

    def __post_init__(self):
        if not 0 < self.base_rate < 1:
            raise SpecError("base_rate must lie in (0, 1)")
        if not self.strength >= 0:
            raise SpecError("strength must be >= 0")
        factors = [*self.feature_factors.values(), *self.division_factors.values(),
                   *(b.factor for b in self.box_factors)]
        if any(not f >= 0 for f in factors):
            raise SpecError("bias factors must be >= 0")
        for level, _ in self.division_factors:
            if level not in HIERARCHY_LEVELS:
                raise SpecError(f"unknown division level {level!r}")


def _neighborhood_ids(cluster: Cluster, lon, lat) -> np.ndarray:
    ix = np.floor((lon - cluster.center[0]) / cluster.neighborhood_cell).astype(np.int64)
    iy = np.floor((lat - cluster.center[1]) / cluster.neighborhood_cell).astype(np.int64)
    return np.array([f"{cluster.locality}/{a:+d}{b:+d}" for a, b in zip(ix, iy)], dtype=object)


def generate_population(spec: PopulationSpec) -> CustomerTable:
    """Deterministic per ``spec.seed``; rows are produced in fixed-size blocks,
    each from its own random stream."""
    schema = spec.schema
    n = spec.n_customers
    cw = np.array([c.weight for c in spec.clusters])
    cw = cw / cw.sum()
    cats = {f.name: [] for f in schema.features if f.kind == CATEGORICAL}
    locs, hier = [], []
    for b, start in enumerate(range(0, n, BLOCK)):
        m = min(BLOCK, n - start)
        g = rngmod.stream(spec.seed, "population", b)
        which = g.choice(len(spec.clusters), size=m, p=cw)
        noise = g.standard_normal((m, 2))
        for f in schema.features:
            if f.kind == CATEGORICAL:
                p = spec.level_probabilities(f.name)
                cats[f.name].append(np.array(f.levels, dtype=object)[g.choice(len(f.levels), size=m, p=p)])
        block_loc = np.empty((m, 2))
        block_hier = np.empty((m, len(HIERARCHY_LEVELS)), dtype=object)
        for j, c in enumerate(spec.clusters):
            sel = which == j
            pts = np.asarray(c.center, dtype=np.float64) + c.std * noise[sel]
            pts[:, 0] = np.clip(pts[:, 0], -180.0, 180.0)
            pts[:, 1] = np.clip(pts[:, 1], -90.0, 90.0)
            block_loc[sel] = pts
            block_hier[sel, 0] = c.region
            block_hier[sel, 1] = c.municipality
            block_hier[sel, 2] = c.locality
            block_hier[sel, 3] = _neighborhood_ids(c, pts[:, 0], pts[:, 1])
        locs.append(block_loc)
        hier.append(block_hier)

    values = {}
    for f in schema.features:
        if f.kind == CATEGORICAL:
            values[f.name] = np.concatenate(cats[f.name]).astype(str) if n else np.array([], dtype=str)
        else:
            values[f.name] = np.concatenate(locs) if n else np.zeros((0, 2))
    width = len(str(max(n - 1, 0)))
    return CustomerTable(
        schema=schema,
        values=values,
        hierarchy_ids=(np.concatenate(hier).astype(str) if n else np.zeros((0, 4), dtype=str)),
        customer_ids=np.array([f"C{i:0{width}d}" for i in range(n)], dtype=str),
    )


def inspection_probability(pop: CustomerTable, bias: BiasSpec) -> np.ndarray:
    """Per-customer inspection probability; depends on features only."""
    p = np.full(pop.n, bias.base_rate)
    lam = bias.strength
    for (name, level), factor in sorted(bias.feature_factors.items()):
        hit = pop.values[name] == str(level)
        p[hit] *= np.power(float(factor), lam)
    for (level, div_id), factor in sorted(bias.division_factors.items()):
        hit = pop.division_ids(level) == div_id
        p[hit] *= np.power(float(factor), lam)
    if bias.box_factors:
        loc = pop.locations()
        if loc is None:
            raise SpecError("box factors need a location feature")
        for box in bias.box_factors:
            hit = ((loc[:, 0] >= box.lon_min) & (loc[:, 0] <= box.lon_max)
                   & (loc[:, 1] >= box.lat_min) & (loc[:, 1] <= box.lat_max))
            p[hit] *= np.power(float(box.factor), lam)
    return np.clip(p, 0.0, 1.0)


def apply_inspection_bias(pop: CustomerTable, bias: BiasSpec, seed: int) -> np.ndarray:
    p = inspection_probability(pop, bias)
    u = np.concatenate(
        [rngmod.stream(seed, "inspection", b).random(min(BLOCK, pop.n - s))
         for b, s in enumerate(range(0, pop.n, BLOCK))]
    ) if pop.n else np.zeros(0)
    return u < p


# -- presets ----------------------------------------------------------------

CLASS_MIX = {
    "residential": 0.70, "commercial": 0.14, "industrial": 0.04, "rural": 0.05,
    "public": 0.02, "public_illumination": 0.01, "public_service": 0.02,
    "power_generation": 0.005, "reseller": 0.015,
}
WIRES_MIX = {"1": 0.55, "2": 0.30, "3": 0.15}
VOLTAGE_MIX = {"<=2.3kV": 0.9, ">2.3kV": 0.1}
CONTRACT_MIX = {"active": 0.92, "suspended": 0.08}

COAST = Cluster("coast", (-38.50, -12.95), 0.12, 0.7, "R1", "M-coast", "L-coast", 0.05)
INTERIOR = Cluster("interior", (-40.80, -12.40), 0.06, 0.3, "R1", "M-interior", "L-interior", 0.03)


def _base_population(n: int, seed: int) -> PopulationSpec:
    return PopulationSpec(
        n_customers=n,
        clusters=(COAST, INTERIOR),
        categorical={
            "class": CLASS_MIX,
            "number_of_wires": WIRES_MIX,
            "voltage": VOLTAGE_MIX,
            "contract_status": CONTRACT_MIX,
        },
        seed=seed,
    )


def _preset_null(n, seed):
    return _base_population(n, seed), BiasSpec(base_rate=0.2)


def _preset_class(n, seed):
    bias = BiasSpec(
        base_rate=0.15,
        feature_factors={("class", "commercial"): 3.0, ("class", "industrial"): 4.0, ("class", "rural"): 0.3},
    )
    return _base_population(n, seed), bias


def _preset_two_cities(n, seed):
    # the small interior city gets most inspections, concentrated in its north half
    c = INTERIOR
    north = BoxFactor(c.center[0] - 1.0, c.center[0] + 1.0, c.center[1], c.center[1] + 1.0, 2.5)
    bias = BiasSpec(
        base_rate=0.1,
        division_factors={("locality", c.locality): 3.0},
        box_factors=(north,),
    )
    return _base_population(n, seed), bias


PRESETS = {
    "fig1-two-cities": _preset_two_cities,
    "null-uniform": _preset_null,
    "class-biased": _preset_class,
}
DEFAULT_PRESET_SIZE = 4000


def preset(name: str, n: int | None = None, seed: int = 0) -> tuple[PopulationSpec, BiasSpec]:
    if name not in PRESETS:
        raise SpecError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    return PRESETS[name](DEFAULT_PRESET_SIZE if n is None else n, seed)


def synthesize(pop_spec: PopulationSpec, bias: BiasSpec) -> CustomerTable:
    """Population plus inspected flag, both derived from ``pop_spec.seed``."""
    pop = generate_population(pop_spec)
    return pop.with_inspected(apply_inspection_bias(pop, bias, pop_spec.seed))


def with_strength(bias: BiasSpec, strength: float) -> BiasSpec:
    return replace(bias, strength=strength)


# -- spec files -----------------------------------------------------------

def spec_from_dict(d: dict) -> tuple[PopulationSpec, BiasSpec]:
    """Build specs from a parsed YAML document (see README for the layout)."""
    if not isinstance(d, dict):
        raise SpecError("spec file must hold a mapping")
    try:
        schema = FeatureSchema.from_dict(d["schema"]) if "schema" in d else default_schema()
        clusters = tuple(
            Cluster(
                name=str(c["name"]),
                center=(float(c["center"][0]), float(c["center"][1])),
                std=float(c["std"]),
                weight=float(c.get("weight", 1.0)),
                region=str(c["region"]),
                municipality=str(c["municipality"]),
                locality=str(c["locality"]),
                neighborhood_cell=float(c.get("neighborhood_cell", 0.05)),
            )
            for c in d["clusters"]
        )
        pop = PopulationSpec(
            n_customers=int(d["n_customers"]),
            clusters=clusters,
            categorical={k: {str(a): float(b) for a, b in v.items()} for k, v in d.get("categorical", {}).items()},
            seed=int(d.get("seed", 0)),
            schema=schema,
        )
        b = d.get("bias", {}) or {}
        bias = BiasSpec(
            base_rate=float(b.get("base_rate", 0.2)),
            strength=float(b.get("strength", 1.0)),
            feature_factors={(e["feature"], str(e["level"])): float(e["factor"]) for e in b.get("feature_factors", [])},
            division_factors={(e["level"], str(e["id"])): float(e["factor"]) for e in b.get("division_factors", [])},
            box_factors=tuple(
                BoxFactor(float(e["lon_min"]), float(e["lon_max"]), float(e["lat_min"]), float(e["lat_max"]), float(e["factor"]))
                for e in b.get("box_factors", [])
            ),
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise SpecError(f"malformed spec: {exc!r}") from exc
    return pop, bias


def load_spec(path) -> tuple[PopulationSpec, BiasSpec]:
    with open(path, encoding="utf-8") as fh:
        return spec_from_dict(yaml.safe_load(fh))
