import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from shapely.geometry import Polygon

from cgsar.scene import (
    DemGrid,
    DemParseError,
    Footprint,
    GridDef,
    SceneError,
    SceneSpec,
    extrude_footprints,
    generate_scene,
    load_dem,
    load_footprints,
    rasterize_polygon,
    save_dem,
    save_footprints,
    signed_area,
)


def single_box_spec(**kw):
    base = dict(
        seed=1, extent=(40.0, 40.0), n_buildings=1, shape_mix=(1.0, 0.0), height_range=(10.0, 10.0),
        touch_fraction=0.0, width_range=(10.0, 10.0), length_range=(20.0, 20.0),
    )
    base.update(kw)
    return SceneSpec(**base)


def test_extrusion_reads_building_height_inside_and_zero_outside():
    dem, fps = generate_scene(single_box_spec())
    inside = rasterize_polygon(fps[0].ring, dem.grid)
    assert np.all(dem.heights[inside] == 10.0)
    assert np.all(dem.heights[~inside] == 0.0)
    # 10 x 20 m on a 0.5 m grid is about 800 cells
    assert abs(inside.sum() * 0.25 - 200.0) < 0.5 * Polygon(fps[0].ring).length


def test_generation_is_deterministic():
    spec = SceneSpec(seed=5, extent=(120.0, 120.0), n_buildings=12, touch_fraction=0.3)
    a_dem, a_fps = generate_scene(spec)
    b_dem, b_fps = generate_scene(spec)
    assert a_dem.heights.tobytes() == b_dem.heights.tobytes()
    assert [f.id for f in a_fps] == [f.id for f in b_fps]
    for fa, fb in zip(a_fps, b_fps):
        assert fa.ring.tobytes() == fb.ring.tobytes() and fa.gt_height == fb.gt_height


def _shared_segments(a, b, tol=1e-6):
    count = 0
    for ea in a.edges():
        for eb in b.edges():
            if np.allclose(ea, eb, atol=tol) or np.allclose(ea, eb[::-1], atol=tol):
                count += 1
    return count


def test_touching_pair_shares_exactly_one_edge():
    spec = SceneSpec(seed=3, extent=(80.0, 80.0), n_buildings=2, touch_fraction=1.0, shape_mix=(1.0, 0.0))
    _, fps = generate_scene(spec)
    assert _shared_segments(fps[0], fps[1]) == 1
    pa, pb = Polygon(fps[0].ring), Polygon(fps[1].ring)
    assert pa.intersection(pb).area < 1e-6


def test_extrusion_consistency_on_mixed_scene():
    dem, fps = generate_scene(SceneSpec(seed=9, extent=(150.0, 150.0), n_buildings=15, touch_fraction=0.2))
    covered = np.zeros(dem.heights.shape, bool)
    for fp in fps:
        m = rasterize_polygon(fp.ring, dem.grid)
        assert np.all(dem.heights[m] == fp.gt_height)
        covered |= m
    assert np.all(dem.heights[~covered] == 0.0)


def test_placement_failure_is_reported():
    with pytest.raises(SceneError, match="could not place"):
        generate_scene(SceneSpec(seed=0, extent=(30.0, 30.0), n_buildings=40, max_tries=20))


@pytest.mark.parametrize(
    "kw",
    [dict(shape_mix=(0.5, 0.2)), dict(height_range=(-1.0, 5.0)), dict(n_buildings=0), dict(touch_fraction=1.5)],
)
def test_invalid_spec_rejected(kw):
    with pytest.raises(SceneError):
        generate_scene(SceneSpec(**kw))


# ---------------------------------------------------------------- DEM files


def test_dem_round_trip_small(tmp_path):
    dem = DemGrid(2, 2, 100.0, 200.0, 1.0, -9999.0, np.array([[0.0, 1.0], [2.0, 3.0]]))
    save_dem(dem, tmp_path / "a.asc")
    back = load_dem(tmp_path / "a.asc")
    assert back.heights.tobytes() == dem.heights.tobytes()
    assert (back.origin_x, back.origin_y, back.cellsize, back.nodata) == (100.0, 200.0, 1.0, -9999.0)


def test_dem_missing_cellsize_names_field(tmp_path):
    p = tmp_path / "bad.asc"
    p.write_text("ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\nNODATA_value -9999\n1 2\n")
    with pytest.raises(DemParseError, match="cellsize"):
        load_dem(p)


def test_dem_non_numeric_cell_reports_line(tmp_path):
    p = tmp_path / "bad.asc"
    p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n3 x\n")
    with pytest.raises(DemParseError) as err:
        load_dem(p)
    assert err.value.line == 8


def test_dem_wrong_value_count(tmp_path):
    p = tmp_path / "bad.asc"
    p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n3\n")
    with pytest.raises(DemParseError, match="expected 4"):
        load_dem(p)


def test_dem_nodata_preserved(tmp_path):
    h = np.array([[-9999.0, 1.5], [2.25, -9999.0]])
    dem = DemGrid(2, 2, 0.0, 0.0, 0.5, -9999.0, h)
    save_dem(dem, tmp_path / "n.asc")
    back = load_dem(tmp_path / "n.asc")
    assert np.array_equal(back.valid, dem.valid)
    assert back.heights.tobytes() == h.tobytes()


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 6), st.integers(1, 6), finite, finite,
    st.floats(0.01, 100.0), st.data(),
)
def test_dem_round_trip_property(tmp_path_factory, ncols, nrows, x0, y0, cs, data):
    vals = data.draw(st.lists(st.one_of(finite, st.just(-9999.0)), min_size=ncols * nrows, max_size=ncols * nrows))
    dem = DemGrid(ncols, nrows, x0, y0, cs, -9999.0, np.array(vals).reshape(nrows, ncols))
    p = tmp_path_factory.mktemp("dem") / "g.asc"
    save_dem(dem, p)
    back = load_dem(p)
    assert back.heights.tobytes() == dem.heights.tobytes()
    assert (back.origin_x, back.origin_y, back.cellsize) == (x0, y0, cs)


# ---------------------------------------------------------- footprint files


def test_cw_square_normalised_to_ccw(tmp_path):
    p = tmp_path / "f.json"
    p.write_text(json.dumps([{"id": "a", "ring": [[0, 0], [0, 1], [1, 1], [1, 0]], "gt_height": 3}]))
    (fp,) = load_footprints(p)
    assert signed_area(fp.ring) == pytest.approx(1.0)


def test_duplicate_id_listed(tmp_path):
    p = tmp_path / "f.json"
    ring = [[0, 0], [1, 0], [1, 1]]
    p.write_text(json.dumps([{"id": "dup7", "ring": ring}, {"id": "dup7", "ring": ring}]))
    with pytest.raises(ValueError, match="dup7"):
        load_footprints(p)


def test_short_and_self_intersecting_rings_rejected(tmp_path):
    p = tmp_path / "f.json"
    p.write_text(json.dumps([{"id": "a", "ring": [[0, 0], [1, 0]]}]))
    with pytest.raises(ValueError, match="3 vertices"):
        load_footprints(p)
    p.write_text(json.dumps([{"id": "bow", "ring": [[0, 0], [1, 1], [1, 0], [0, 1]]}]))
    with pytest.raises(ValueError, match="self-intersect"):
        load_footprints(p)


def _random_polygon(rng, spread=500.0):
    n = int(rng.integers(3, 9))
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(1, 10, n)
    c = rng.uniform(-spread, spread, 2)
    return c + np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])


def test_hundred_random_polygons_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    fps = []
    while len(fps) < 100:
        ring = _random_polygon(rng)
        if Polygon(ring).is_valid and signed_area(ring) > 1e-9:
            fps.append(Footprint(f"p{len(fps)}", ring, float(rng.uniform(3, 40))))
    save_footprints(fps, tmp_path / "f.json")
    back = load_footprints(tmp_path / "f.json")
    assert [f.id for f in back] == [f.id for f in fps]
    for a, b in zip(fps, back):
        assert a.ring.tobytes() == b.ring.tobytes()
        assert a.gt_height == b.gt_height


# ------------------------------------------------------------ rasterization


def test_aligned_square_sets_sixteen_cells():
    grid = GridDef(0.0, 0.0, 1.0, 1.0, 10, 10)
    m = rasterize_polygon([[2, 3], [6, 3], [6, 7], [2, 7]], grid)
    assert m.sum() == 16


def test_top_left_rule_on_shared_boundary():
    # centres at 0.5, 1.5, ...; a square with edges exactly through centres
    grid = GridDef(0.0, 0.0, 1.0, 1.0, 6, 6)
    a = rasterize_polygon([[0.5, 0.5], [2.5, 0.5], [2.5, 2.5], [0.5, 2.5]], grid)
    b = rasterize_polygon([[2.5, 0.5], [4.5, 0.5], [4.5, 2.5], [2.5, 2.5]], grid)
    assert not np.any(a & b)  # no cell claimed twice
    assert a.sum() == 4 and b.sum() == 4


def test_off_grid_polygon_is_empty():
    grid = GridDef(0.0, 0.0, 1.0, 1.0, 10, 10)
    assert not rasterize_polygon([[50, 50], [60, 50], [60, 60]], grid).any()


def test_degenerate_polygon_is_empty(caplog):
    grid = GridDef(0.0, 0.0, 1.0, 1.0, 10, 10)
    assert not rasterize_polygon([[1, 1], [5, 5], [3, 3]], grid).any()
    assert "degenerate" in caplog.text


def test_l_shape_equals_union_of_rectangles():
    grid = GridDef(-0.3, 0.2, 0.5, -0.5, 40, 40)
    l_shape = [[0, -15], [12, -15], [12, -11], [4, -11], [4, -2], [0, -2]]
    r1 = [[0, -15], [12, -15], [12, -11], [0, -11]]
    r2 = [[0, -11], [4, -11], [4, -2], [0, -2]]
    assert np.array_equal(rasterize_polygon(l_shape, grid), rasterize_polygon(r1, grid) | rasterize_polygon(r2, grid))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_raster_area_within_perimeter_band(seed):
    rng = np.random.default_rng(seed)
    ring = _random_polygon(rng, spread=5.0) + 15.0
    poly = Polygon(ring)
    if not poly.is_valid:
        return
    cs = 0.25
    grid = GridDef(0.0, 0.0, cs, cs, 120, 120)
    m = rasterize_polygon(ring, grid)
    assert abs(m.sum() * cs * cs - poly.area) <= poly.length * cs


def test_extrude_writes_heights_in_place():
    dem = DemGrid(10, 10, 0.0, 0.0, 1.0, -9999.0, np.zeros((10, 10)))
    extrude_footprints(dem, [Footprint("a", np.array([[2.0, 2.0], [6.0, 2.0], [6.0, 6.0], [2.0, 6.0]]), 7.0)])
    assert dem.heights.sum() == 16 * 7.0
