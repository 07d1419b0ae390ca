"""Raster data model, min-max normalization, block coarsening and GRID text I/O.

A GRID file is a four-line header followed by ``nrows`` lines of ``ncols``
whitespace-separated values::

    GRID v1
    nrows 2 ncols 3
    origin 10.0 -70.0 cellsize 0.25 0.25
    variable sla
    0.1 0.2 NA
    0.4 0.5 0.6

``origin`` is the outer corner of cell ``(0, 0)``; row ``i`` and column ``j``
have their center at ``origin + (i + 0.5, j + 0.5) * cellsize``. Values are
written with Python's shortest round-trip ``repr`` so load/save is value-exact.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_finite_real, check_positive_int

MISSING_TOKEN = "NA"
MAGIC = "GRID v1"


class GridFormatError(ValueError):
    """Raised when a GRID file cannot be parsed."""

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path


@dataclass(frozen=True, eq=False)
class GeoGrid:
    """A rectangular raster of one variable with geographic registration.

    ``values`` is an ``(n_rows, n_cols)`` float64 array; ``mask`` is a boolean
    array of the same shape that is True on missing cells. Missing cells hold
    0.0 in ``values`` and must never be read as data. Both arrays are frozen.
    """

    values: np.ndarray
    origin_lat: float = 0.0
    origin_lon: float = 0.0
    cell_size_lat: float = 1.0
    cell_size_lon: float = 1.0
    variable_name: str = "value"
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"grid values must be a non-empty 2-D array, got {values.shape}")
        if self.mask is None:
            mask = np.zeros(values.shape, dtype=bool)
        else:
            mask = np.array(self.mask, dtype=bool)
            if mask.shape != values.shape:
                raise ValueError("mask shape does not match values shape")
        values[mask] = 0.0
        if not np.all(np.isfinite(values)):
            raise ValueError("non-missing grid values must be finite")
        for name in ("cell_size_lat", "cell_size_lon"):
            check_finite_real(getattr(self, name), name, low=0.0, low_inclusive=False)
        for name in ("origin_lat", "origin_lon"):
            check_finite_real(getattr(self, name), name)
        name = str(self.variable_name)
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"variable name must be a non-empty token, got {name!r}")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        for name in ("origin_lat", "origin_lon", "cell_size_lat", "cell_size_lon"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def n_rows(self):
        return self.values.shape[0]

    @property
    def n_cols(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    @property
    def observed(self):
        return ~self.mask

    @property
    def n_observed(self):
        return int(self.observed.sum())

    @property
    def fully_observed(self):
        return not self.mask.any()

    def registration(self):
        return dict(
            origin_lat=self.origin_lat,
            origin_lon=self.origin_lon,
            cell_size_lat=self.cell_size_lat,
            cell_size_lon=self.cell_size_lon,
            variable_name=self.variable_name,
        )

    def with_values(self, values, mask=None):
        """Return a grid with the same registration and new values."""
        return GeoGrid(values, mask=mask, **self.registration())

    def masked_values(self):
        """Values with NaN on missing cells (for display and reductions)."""
        out = self.values.copy()
        out[self.mask] = np.nan
        return out

    def cell_centers(self):
        """Latitude and longitude of every cell center, each ``(n_rows, n_cols)``."""
        rows = self.origin_lat + (np.arange(self.n_rows) + 0.5) * self.cell_size_lat
        cols = self.origin_lon + (np.arange(self.n_cols) + 0.5) * self.cell_size_lon
        return np.meshgrid(rows, cols, indexing="ij")

    def __eq__(self, other):
        if not isinstance(other, GeoGrid):
            return NotImplemented
        return (
            self.registration() == other.registration()
            and self.shape == other.shape
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    def __repr__(self):
        return (
            f"GeoGrid({self.n_rows}x{self.n_cols}, variable={self.variable_name!r}, "
            f"missing={int(self.mask.sum())})"
        )


def _format_value(v):
    return repr(float(v))


def dumps_grid(grid):
    """Serialize a grid to canonical GRID text."""
    lines = [
        MAGIC,
        f"nrows {grid.n_rows} ncols {grid.n_cols}",
        "origin {} {} cellsize {} {}".format(
            *map(_format_value, (grid.origin_lat, grid.origin_lon,
                                 grid.cell_size_lat, grid.cell_size_lon))
        ),
        f"variable {grid.variable_name}",
    ]
    for i in range(grid.n_rows):
        row = grid.values[i]
        miss = grid.mask[i]
        lines.append(" ".join(
            MISSING_TOKEN if miss[j] else _format_value(row[j]) for j in range(grid.n_cols)
        ))
    return "\n".join(lines) + "\n"


def _parse_float(token, line_no, path, what):
    # float() is locale independent; reject the spellings it accepts beyond plain decimals.
    if token.lower().lstrip("+-") in ("nan", "inf", "infinity"):
        raise GridFormatError(f"non-finite {what} {token!r}", line_no, path)
    try:
        return float(token)
    except ValueError:
        raise GridFormatError(f"non-numeric {what} {token!r}", line_no, path) from None


def loads_grid(text, path=None):
    """Parse GRID text into a :class:`GeoGrid`."""
    lines = text.splitlines()
    if len(lines) < 4:
        raise GridFormatError("truncated header (need 4 header lines)", len(lines) + 1, path)
    if lines[0].strip() != MAGIC:
        raise GridFormatError(f"expected {MAGIC!r}, got {lines[0].strip()!r}", 1, path)

    tok = lines[1].split()
    if len(tok) != 4 or tok[0] != "nrows" or tok[2] != "ncols":
        raise GridFormatError("expected 'nrows <int> ncols <int>'", 2, path)
    try:
        n_rows, n_cols = int(tok[1]), int(tok[3])
    except ValueError:
        raise GridFormatError("nrows/ncols must be integers", 2, path) from None
    if n_rows < 1 or n_cols < 1:
        raise GridFormatError("nrows/ncols must be positive", 2, path)

    tok = lines[2].split()
    if len(tok) != 6 or tok[0] != "origin" or tok[3] != "cellsize":
        raise GridFormatError("expected 'origin <lat> <lon> cellsize <dlat> <dlon>'", 3, path)
    lat, lon, dlat, dlon = (_parse_float(t, 3, path, "header value")
                            for t in (tok[1], tok[2], tok[4], tok[5]))
    if dlat <= 0 or dlon <= 0:
        raise GridFormatError("cell sizes must be strictly positive", 3, path)

    tok = lines[3].split()
    if len(tok) != 2 or tok[0] != "variable":
        raise GridFormatError("expected 'variable <name>'", 4, path)
    name = tok[1]

    body = lines[4:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != n_rows:
        raise GridFormatError(
            f"header declares {n_rows} rows but body has {len(body)}", 5 + len(body), path
        )
    values = np.zeros((n_rows, n_cols))
    mask = np.zeros((n_rows, n_cols), dtype=bool)
    for i, line in enumerate(body):
        line_no = 5 + i
        cells = line.split()
        if len(cells) != n_cols:
            raise GridFormatError(
                f"row {i} has {len(cells)} values, header declares {n_cols} columns",
                line_no, path,
            )
        for j, token in enumerate(cells):
            if token == MISSING_TOKEN:
                mask[i, j] = True
            else:
                values[i, j] = _parse_float(token, line_no, path, "cell value")
    return GeoGrid(values, origin_lat=lat, origin_lon=lon, cell_size_lat=dlat,
                   cell_size_lon=dlon, variable_name=name, mask=mask)


def load_grid(path):
    with open(path, "r", encoding="ascii", newline="") as fh:
        text = fh.read()
    return loads_grid(text, path=str(path))


def save_grid(grid, path):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(dumps_grid(grid))


@dataclass(frozen=True)
class Normalizer:
    """Affine map of ``[v_min, v_max]`` onto ``[-1, 1]``."""

    v_min: float
    v_max: float

    def __post_init__(self):
        check_finite_real(self.v_min, "v_min")
        check_finite_real(self.v_max, "v_max")
        if not self.v_max > self.v_min:
            raise ValueError(f"v_max must exceed v_min, got [{self.v_min}, {self.v_max}]")

    @property
    def span(self):
        return self.v_max - self.v_min

    def normalize(self, v):
        return 2.0 * ((np.asarray(v, dtype=np.float64) - self.v_min) / self.span) - 1.0

    def denormalize(self, u):
        return (np.asarray(u, dtype=np.float64) + 1.0) / 2.0 * self.span + self.v_min

    def normalize_grid(self, grid):
        return grid.with_values(self.normalize(grid.values), mask=grid.mask)

    def denormalize_grid(self, grid):
        return grid.with_values(self.denormalize(grid.values), mask=grid.mask)


def _observed_values(item):
    if isinstance(item, GeoGrid):
        return item.values[item.observed]
    arr = np.asarray(item, dtype=np.float64).ravel()
    return arr[np.isfinite(arr)]


def fit_normalizer(grids):
    """Global min/max of the observed values across ``grids``."""
    if isinstance(grids, GeoGrid):
        grids = [grids]
    chunks = [_observed_values(g) for g in grids]
    chunks = [c for c in chunks if c.size]
    if not chunks:
        raise ValueError("cannot fit a normalizer: every input value is missing")
    allv = np.concatenate(chunks)
    lo, hi = float(allv.min()), float(allv.max())
    if hi == lo:
        raise ValueError(f"cannot fit a normalizer to constant data (value {lo})")
    return Normalizer(lo, hi)


class MinMaxNormalizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper mapping the training range onto ``[-1, 1]``.

    Accepts a list of :class:`GeoGrid` (or arrays). ``transform`` and
    ``inverse_transform`` return objects of the same kind as their input.
    """

    def fit(self, X, y=None):
        self.normalizer_ = fit_normalizer(X)
        self.data_min_ = self.normalizer_.v_min
        self.data_max_ = self.normalizer_.v_max
        return self

    def _apply(self, X, inverse):
        check_is_fitted(self, "normalizer_")
        n = self.normalizer_
        on_grid = n.denormalize_grid if inverse else n.normalize_grid
        if isinstance(X, GeoGrid):
            return on_grid(X)
        if isinstance(X, (list, tuple)) and X and isinstance(X[0], GeoGrid):
            return [on_grid(g) for g in X]
        return n.denormalize(X) if inverse else n.normalize(X)

    def transform(self, X):
        return self._apply(X, inverse=False)

    def inverse_transform(self, X):
        return self._apply(X, inverse=True)


def coarsen(grid, factor):
    """Block-mean coarsening by an integer ``factor`` along both axes.

    Missing cells are excluded from each block mean; a block with no observed
    cells becomes missing. Registration is preserved so that each coarse
    center is the centroid of its fine block.
    """
    factor = check_positive_int(factor, "factor")
    if grid.n_rows % factor or grid.n_cols % factor:
        raise ValueError(
            f"grid shape {grid.shape} is not divisible by coarsening factor {factor}"
        )
    if factor == 1:
        return grid
    r, c = grid.n_rows // factor, grid.n_cols // factor
    obs = grid.observed.reshape(r, factor, c, factor)
    vals = np.where(obs, grid.values.reshape(r, factor, c, factor), 0.0)
    counts = obs.sum(axis=(1, 3))
    sums = vals.sum(axis=(1, 3))
    missing = counts == 0
    means = np.divide(sums, np.maximum(counts, 1))
    return GeoGrid(
        means,
        origin_lat=grid.origin_lat,
        origin_lon=grid.origin_lon,
        cell_size_lat=grid.cell_size_lat * factor,
        cell_size_lon=grid.cell_size_lon * factor,
        variable_name=grid.variable_name,
        mask=missing,
    )


def refine_registration(coarse, factor):
    """Registration of the grid obtained by splitting each cell ``factor`` ways."""
    reg = coarse.registration()
    reg["cell_size_lat"] = coarse.cell_size_lat / factor
    reg["cell_size_lon"] = coarse.cell_size_lon / factor
    return reg
