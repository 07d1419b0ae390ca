import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kicdpm.grid import (GeoGrid, GridFormatError, MinMaxNormalizer, Normalizer, coarsen,
                         dumps_grid, fit_normalizer, load_grid, loads_grid, save_grid)

TWO_BY_TWO = "GRID v1\nnrows 2 ncols 2\norigin 0.0 0.0 cellsize 1.0 1.0\nvariable z\n0 1\n1 0\n"


def test_load_echoes_values():
    g = loads_grid(TWO_BY_TWO)
    assert g.shape == (2, 2)
    np.testing.assert_array_equal(g.values, [[0, 1], [1, 0]])
    assert g.variable_name == "z"
    assert g.fully_observed


def test_short_row_names_the_row():
    text = "GRID v1\nnrows 2 ncols 3\norigin 0 0 cellsize 1 1\nvariable z\n0 1 2\n3 4\n"
    with pytest.raises(GridFormatError, match="row 1") as err:
        loads_grid(text)
    assert err.value.line == 6


@pytest.mark.parametrize("bad", ["nan", "inf", "-Infinity", "1,5", "abc"])
def test_rejects_non_numeric_cells(bad):
    text = f"GRID v1\nnrows 1 ncols 2\norigin 0 0 cellsize 1 1\nvariable z\n0 {bad}\n"
    with pytest.raises(GridFormatError):
        loads_grid(text)


def test_header_errors():
    with pytest.raises(GridFormatError):
        loads_grid("GRID v2\nnrows 1 ncols 1\norigin 0 0 cellsize 1 1\nvariable z\n0\n")
    with pytest.raises(GridFormatError):
        loads_grid("GRID v1\nnrows 1 ncols 1\norigin 0 0 cellsize 0 1\nvariable z\n0\n")
    with pytest.raises(GridFormatError, match="rows"):
        loads_grid("GRID v1\nnrows 2 ncols 1\norigin 0 0 cellsize 1 1\nvariable z\n0\n")


def test_missing_sentinel_round_trip(tmp_path):
    mask = np.array([[False, True], [False, False]])
    g = GeoGrid(np.array([[1.5, 0.0], [2.0, -3.25]]), mask=mask, variable_name="sla")
    path = tmp_path / "g.grid"
    save_grid(g, path)
    assert "NA" in path.read_text()
    assert load_grid(path) == g


def test_constant_round_trip(tmp_path):
    g = GeoGrid(np.full((3, 4), 7.0), origin_lat=10.0, origin_lon=-70.0,
                cell_size_lat=0.25, cell_size_lon=0.5)
    save_grid(g, tmp_path / "c.grid")
    assert load_grid(tmp_path / "c.grid") == g


finite = st.floats(-1e12, 1e12, allow_nan=False, allow_infinity=False)


@st.composite
def grids(draw):
    r, c = draw(st.integers(1, 6)), draw(st.integers(1, 6))
    vals = draw(arrays(np.float64, (r, c), elements=finite))
    mask = draw(arrays(np.bool_, (r, c)))
    return GeoGrid(np.where(mask, 0.0, vals), mask=mask,
                   origin_lat=draw(finite), origin_lon=draw(finite),
                   cell_size_lat=draw(st.floats(1e-6, 1e3)),
                   cell_size_lon=draw(st.floats(1e-6, 1e3)))


@given(grids())
def test_round_trip_property(g):
    text = dumps_grid(g)
    back = loads_grid(text)
    assert back == g
    assert dumps_grid(back) == text


def test_geogrid_validation():
    with pytest.raises(ValueError):
        GeoGrid(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        GeoGrid(np.zeros(3))
    g = GeoGrid(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        g.values[0, 0] = 1.0


def test_fit_normalizer_endpoints():
    n = fit_normalizer([GeoGrid(np.array([[3.0, 5.0]])), GeoGrid(np.array([[7.0, 4.0]]))])
    assert (n.v_min, n.v_max) == (3.0, 7.0)
    assert n.normalize(3.0) == -1.0 and n.normalize(7.0) == 1.0 and n.normalize(5.0) == 0.0


def test_normalizer_ignores_missing_and_rejects_constant():
    g = GeoGrid(np.array([[1.0, 100.0, 2.0]]), mask=np.array([[False, True, False]]))
    assert fit_normalizer([g]) == Normalizer(1.0, 2.0)
    with pytest.raises(ValueError):
        fit_normalizer([GeoGrid(np.ones((2, 2)))])


@given(st.floats(-1e6, 1e6), st.floats(-1e3, 1e3), st.floats(1e-3, 1e3))
def test_normalizer_round_trip(v, lo, span):
    n = Normalizer(lo, lo + span)
    assert abs(n.denormalize(n.normalize(v)) - v) <= 1e-12 * max(1.0, abs(v), abs(lo) + span)


def test_minmax_estimator():
    gs = [GeoGrid(np.array([[0.0, 2.0], [4.0, 1.0]]))]
    est = MinMaxNormalizer().fit(gs)
    out = est.transform(gs)
    assert out[0].values.min() == -1.0 and out[0].values.max() == 1.0
    assert est.inverse_transform(out)[0] == gs[0]
    assert est.get_params() == {}


def test_coarsen_examples():
    np.testing.assert_array_equal(coarsen(loads_grid(TWO_BY_TWO), 2).values, [[0.5]])
    c = coarsen(GeoGrid(np.full((8, 8), 3.0)), 4)
    assert c.shape == (2, 2) and np.all(c.values == 3.0)
    g = GeoGrid(np.arange(6.0).reshape(2, 3))
    assert coarsen(g, 1) == g
    with pytest.raises(ValueError):
        coarsen(g, 2)


def test_coarsen_missing_and_registration():
    mask = np.zeros((4, 4), dtype=bool)
    mask[:2, :2] = True
    mask[2, 2] = True
    g = GeoGrid(np.arange(16.0).reshape(4, 4), mask=mask, origin_lat=1.0, cell_size_lat=0.5)
    c = coarsen(g, 2)
    assert c.mask[0, 0] and not c.mask[1, 1]
    assert c.values[1, 1] == pytest.approx((11 + 14 + 15) / 3)
    assert c.cell_size_lat == 1.0 and c.origin_lat == 1.0
    # block centroid equals the coarse center
    assert c.cell_centers()[0][0] == pytest.approx(g.cell_centers()[0][:2].mean())
