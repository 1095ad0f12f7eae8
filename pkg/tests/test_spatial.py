import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from covshift.dataset import CustomerTable, SchemaError, default_schema
from covshift.engine import AuditConfig, AuditResult
from covshift.spatial import (
    MCC_UNDEFINED,
    SINGLE_CLASS,
    TOO_FEW_CUSTOMERS,
    UNASSIGNED,
    DivisionScore,
    ShiftRaster,
    audit_divisions,
    median_location,
    partition,
    rasterize,
    render,
    skip_summary,
    write_raster_csv,
    write_scores_csv,
    write_scores_geojson,
)

import oracles

GOLDEN = Path(__file__).parent / "golden"
SMALL = AuditConfig(k=5, n_models=4, seed=0)


def make_table(loc, localities, inspected, classes=None):
    """Minimal default-schema table with the given locations and locality ids."""
    schema = default_schema()
    n = len(loc)
    values = {f.name: np.full(n, f.levels[0]) for f in schema.features if f.levels}
    if classes is not None:
        values["class"] = np.asarray(classes)
    values["location"] = np.asarray(loc, dtype=float).reshape(n, 2)
    hier = np.array([["R", "M", l, f"{l}/n"] for l in localities]).reshape(n, 4)
    ids = np.array([f"c{i}" for i in range(n)])
    return CustomerTable(schema, values, hier, ids, np.asarray(inspected, dtype=bool))


def scored(div_id, centroid, value):
    res = AuditResult(value, 0.0, None, 0, (), 0, 1, 1)
    return DivisionScore(div_id, "locality", 10, 5, centroid, res)


def test_partition_groups_and_unassigned():
    t = make_table(np.zeros((5, 2)), ["b", "a", "b", " ", "a"], [0] * 5)
    groups = partition(t, "locality")
    assert list(groups) == [UNASSIGNED, "a", "b"]
    assert groups["a"].tolist() == [1, 4]
    assert groups["b"].tolist() == [0, 2]
    assert groups[UNASSIGNED].tolist() == [3]
    with pytest.raises(SchemaError):
        partition(t, "street")


def test_too_few_customers_skip():
    g = np.random.default_rng(0)
    t = make_table(g.normal(size=(7, 2)), ["x"] * 7, [1, 0, 1, 0, 1, 0, 0])
    [d] = audit_divisions(t, None, "locality", config=AuditConfig(k=10, n_models=3))
    assert d.skip_reason == TOO_FEW_CUSTOMERS
    assert d.centroid is not None and d.result is None


def test_single_class_skip():
    g = np.random.default_rng(0)
    t = make_table(g.normal(size=(100, 2)), ["x"] * 100, [1] * 100)
    [d] = audit_divisions(t, None, "locality", config=AuditConfig(k=10, n_models=3))
    assert d.skip_reason == SINGLE_CLASS


def test_minority_below_k_is_single_class():
    g = np.random.default_rng(1)
    flag = np.zeros(60, dtype=bool)
    flag[:4] = True
    t = make_table(g.normal(size=(60, 2)), ["x"] * 60, flag)
    [d] = audit_divisions(t, None, "locality", config=SMALL)
    assert d.skip_reason == SINGLE_CLASS


def test_undefined_everywhere_skip():
    t = make_table(np.ones((40, 2)), ["x"] * 40, [1, 0] * 20)
    [d] = audit_divisions(t, None, "locality", config=SMALL)
    assert d.skip_reason == MCC_UNDEFINED


def test_skip_rule_soundness():
    # audited iff both classes have >= k members
    g = np.random.default_rng(3)
    k = 5
    for n_sel, n_rest in [(4, 30), (5, 30), (30, 4), (5, 5), (0, 20)]:
        flag = np.array([True] * n_sel + [False] * n_rest)
        t = make_table(g.normal(size=(len(flag), 2)), ["x"] * len(flag), flag)
        [d] = audit_divisions(t, None, "locality", config=SMALL)
        both = n_sel >= k and n_rest >= k
        assert (d.skip_reason not in (TOO_FEW_CUSTOMERS, SINGLE_CLASS)) == both


def test_divisions_are_audited_independently():
    g = np.random.default_rng(5)
    a = g.normal(size=(80, 2))
    b = g.normal(size=(80, 2)) + 10
    flag = np.r_[a[:, 0] > 0, g.random(80) < 0.5]
    t = make_table(np.vstack([a, b]), ["a"] * 80 + ["b"] * 80, flag)
    scores = audit_divisions(t, None, "locality", config=AuditConfig(k=5, n_models=10, seed=2))
    assert [d.division_id for d in scores] == ["a", "b"]
    assert scores[0].score > 0.8
    assert scores[0].score > scores[1].score
    assert scores[0].n_selected == int(flag[:80].sum())
    # same result when the division is audited alone
    alone = audit_divisions(t.take(np.arange(80)), flag[:80], "locality",
                            config=AuditConfig(k=5, n_models=10, seed=2))
    assert alone[0].result == scores[0].result


def test_workers_do_not_change_scores():
    g = np.random.default_rng(6)
    loc = g.normal(size=(120, 2))
    flag = loc[:, 1] > 0.2
    t = make_table(loc, ["a", "b", "c"] * 40, flag)
    one = audit_divisions(t, None, "locality", config=AuditConfig(k=3, n_models=5, workers=1))
    two = audit_divisions(t, None, "locality", config=AuditConfig(k=3, n_models=5, workers=2))
    assert one == two


def test_median_examples():
    assert median_location(np.array([[0, 0], [1, 10], [2, 20]])) == (1.0, 10.0)
    assert median_location(np.full((3, 2), np.nan)) is None
    assert median_location(np.array([[0, 0], [np.nan, np.nan], [2, 4]])) == (1.0, 2.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=3, max_size=40), st.randoms())
def test_median_order_invariant_and_outlier_robust(pts, rnd):
    loc = np.array(pts)
    order = list(range(len(loc)))
    rnd.shuffle(order)
    shuffled = loc[order]
    m = median_location(loc)
    assert median_location(shuffled) == m
    # one wild outlier moves each component by at most one order statistic
    out = np.vstack([loc, [[1e6, -1e6]]])
    mo = median_location(out)
    xs, ys = np.sort(loc[:, 0]), np.sort(loc[:, 1])
    assert xs[0] <= mo[0] <= xs[-1]
    assert ys[0] <= mo[1] <= ys[-1]


BOUNDS = (0.0, 10.0, 0.0, 5.0)


def test_single_division_gives_uniform_raster():
    r = rasterize([scored("a", (3.0, 3.0), 0.4)], BOUNDS, (30, 15))
    assert r.cells.shape == (15, 30)
    assert (r.cells == 0.4).all()


def test_two_centroids_bisector():
    r = rasterize([scored("a", (2.0, 2.5), 0.1), scored("b", (8.0, 2.5), 0.7)], BOUNDS, (10, 4))
    assert (r.cells[:, :5] == 0.1).all()
    assert (r.cells[:, 5:] == 0.7).all()


def test_equidistant_cell_goes_to_smallest_id():
    # 3 columns over [0, 3]: middle center x=1.5 is equidistant from 0.5 and 2.5
    r = rasterize([scored("z", (2.5, 0.5), 0.9), scored("m", (0.5, 0.5), 0.2)], (0, 3, 0, 1), (3, 1))
    assert r.cells[0].tolist() == [0.2, 0.2, 0.9]


def test_skipped_divisions_do_not_enter_raster():
    skip = DivisionScore("a", "locality", 3, 1, (1.0, 1.0), None, TOO_FEW_CUSTOMERS)
    r = rasterize([skip, scored("b", (9.0, 4.0), 0.3)], BOUNDS, (5, 5))
    assert (r.cells == 0.3).all()
    with pytest.raises(ValueError):
        rasterize([skip], BOUNDS, (5, 5))


def test_raster_matches_brute_force_on_random_centroids():
    g = np.random.default_rng(9)
    for _ in range(10):
        pts = g.uniform([0, 0], [10, 5], size=(5, 2))
        vals = g.uniform(0, 1, size=5)
        ids = [f"d{i}" for i in range(5)]
        divs = [scored(i, tuple(p), v) for i, p, v in zip(ids, pts, vals)]
        r = rasterize(divs, BOUNDS, (20, 20))
        want = oracles.nearest_raster(pts, vals, ids, BOUNDS, (20, 20))
        assert (r.cells == want).all()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=6, unique=True),
       st.integers(1, 9), st.integers(1, 9))
def test_raster_property_on_lattice_points(pts, nx, ny):
    # integer lattice centroids make exact distance ties common
    pts = [(float(x), float(y)) for x, y in pts]
    ids = [f"d{i:02d}" for i in range(len(pts))]
    vals = [i / 10 for i in range(len(pts))]
    bounds = (0.0, 6.0, 0.0, 6.0)
    r = rasterize([scored(i, p, v) for i, p, v in zip(ids, pts, vals)], bounds, (nx, ny))
    assert (r.cells == oracles.nearest_raster(pts, vals, ids, bounds, (nx, ny))).all()


def test_bad_grid():
    with pytest.raises(ValueError):
        rasterize([scored("a", (0, 0), 0.1)], (1, 1, 0, 2), (4, 4))
    with pytest.raises(ValueError):
        rasterize([scored("a", (0, 0), 0.1)], BOUNDS, (0, 4))


def test_render_uniform_is_single_color(tmp_path):
    r = ShiftRaster(BOUNDS, (8, 6), np.full((6, 8), 0.3))
    render(r, tmp_path / "u.png")
    img = np.asarray(Image.open(tmp_path / "u.png"))
    assert img.shape == (6, 8, 4)
    assert len(np.unique(img.reshape(-1, 4), axis=0)) == 1
    assert img[0, 0, 3] == 255


def test_render_sidecar_max_and_no_data(tmp_path):
    cells = np.array([[0.0, 0.25], [0.5, np.nan]])
    side = render(ShiftRaster(BOUNDS, (2, 2), cells), tmp_path / "m.png")
    assert side["color_scale_max"] == 0.5
    on_disk = json.loads((tmp_path / "m.json").read_text())
    assert on_disk["color_scale_max"] == 0.5
    assert on_disk["bounds"] == list(BOUNDS)
    img = np.asarray(Image.open(tmp_path / "m.png"))
    assert img[1, 1, 3] == 0
    assert (img[:, :, 3][~np.isnan(cells)] == 255).all()
    # the ramp runs from the darkest color at 0 to the brightest at the max
    assert img[0, 0, :3].sum() < img[1, 0, :3].sum()


def golden_raster():
    g = np.random.default_rng(2024)
    pts = g.uniform([-41.5, -13.5], [-38.0, -11.8], size=(6, 2))
    vals = g.uniform(0, 0.6, size=6)
    divs = [scored(f"d{i}", tuple(p), v) for i, (p, v) in enumerate(zip(pts, vals))]
    return rasterize(divs, (-41.5, -38.0, -13.5, -11.8), (70, 34))


def test_render_matches_golden(tmp_path):
    out = tmp_path / "g.png"
    render(golden_raster(), out)
    assert out.read_bytes() == (GOLDEN / "raster.png").read_bytes()
    again = tmp_path / "g2.png"
    render(golden_raster(), again)
    assert again.read_bytes() == out.read_bytes()


def test_exports(tmp_path):
    skip = DivisionScore("a", "locality", 3, 1, (1.0, 1.0), None, TOO_FEW_CUSTOMERS)
    nowhere = DivisionScore("c", "locality", 3, 1, None, None, TOO_FEW_CUSTOMERS)
    divs = [skip, scored("b", (9.0, 4.0), 0.3), nowhere]
    write_scores_csv(divs, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert len(lines) == 4
    assert lines[1].endswith("too_few_customers")
    write_scores_geojson(divs, tmp_path / "s.geojson")
    geo = json.loads((tmp_path / "s.geojson").read_text())
    assert [f["properties"]["division_id"] for f in geo["features"]] == ["a", "b"]
    assert geo["features"][1]["geometry"]["coordinates"] == [9.0, 4.0]
    assert geo["features"][0]["properties"]["mcc_max_mean"] is None
    summary = skip_summary(divs)
    assert summary["n_scored"] == 1
    assert summary["skipped"][TOO_FEW_CUSTOMERS]["division_ids"] == ["a", "c"]

    r = rasterize(divs, BOUNDS, (4, 3))
    write_raster_csv(r, tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert len(rows) == 4
    assert rows[1].split(",")[1:] == ["0.3"] * 4
