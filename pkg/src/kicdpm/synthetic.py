"""Gaussian random fields with a known Matern variogram, used as ground truth.

Fields are drawn as ``L z`` with ``L`` the Cholesky factor of the dense
covariance over all cells and ``z`` standard normal. The generator is
PCG64 seeded with ``GrfSpec.seed``; normals come from numpy's ziggurat
``standard_normal``, drawn in one call of length ``n_rows * n_cols`` so the
draw order is fixed.
"""

import functools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .grid import GeoGrid, coarsen
from .kriging import CoordinateFrame, N_BASIS, grid_locations, trend_basis
from .validation import as_generator, check_positive_int
from .variogram import MaternModel

log = logging.getLogger(__name__)

MAX_CELLS = 64 * 64
_JITTER_STEPS = 6


class GrfError(RuntimeError):
    """Raised when a random field cannot be generated."""


def derive_seed(base_seed, *keys):
    """Deterministic 63-bit child seed from a base seed and integer keys."""
    seq = np.random.SeedSequence([int(base_seed) % 2 ** 64, *[int(k) for k in keys]])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class GrfSpec:
    """Grid size, covariance model, optional quadratic mean and seed."""

    n_rows: int
    n_cols: int
    model: MaternModel
    mean_trend: tuple = None
    seed: int = 0
    max_cells: int = MAX_CELLS

    def __post_init__(self):
        check_positive_int(self.n_rows, "n_rows")
        check_positive_int(self.n_cols, "n_cols")
        if not isinstance(self.model, MaternModel):
            raise TypeError("model must be a MaternModel")
        if self.mean_trend is not None:
            beta = tuple(float(b) for b in self.mean_trend)
            if len(beta) != N_BASIS or not np.all(np.isfinite(beta)):
                raise ValueError("mean_trend needs 6 finite coefficients")
            object.__setattr__(self, "mean_trend", beta)
        if self.n_rows * self.n_cols > self.max_cells:
            raise GrfError(
                f"{self.n_rows}x{self.n_cols} grid exceeds the dense-covariance cap of "
                f"{self.max_cells} cells")


@functools.lru_cache(maxsize=8)
def _covariance_factor(n_rows, n_cols, nu, rho, sill, nugget):
    model = MaternModel(nu, rho, sill, nugget)
    locs = grid_locations(GeoGrid(np.zeros((n_rows, n_cols))), only_observed=False)
    cov = model.covariance(squareform(pdist(locs)))
    scale = max(sill + nugget, 1e-300)
    jitter = 0.0
    for step in range(_JITTER_STEPS + 1):
        try:
            factor = np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
            if jitter:
                log.warning("covariance factorized with diagonal jitter %.3g", jitter)
            factor.setflags(write=False)
            return factor
        except np.linalg.LinAlgError:
            jitter = scale * 1e-12 * 10.0 ** (step + 1)
    raise GrfError(f"covariance not positive definite after jitter {jitter:.3g}")


def sample_grf(spec, **registration):
    """Draw one Gaussian random field.

    Parameters
    ----------
    spec : GrfSpec
    **registration
        Optional GeoGrid registration fields (origin, cell sizes, variable name).

    Returns
    -------
    GeoGrid
    """
    m = spec.model
    shape = (spec.n_rows, spec.n_cols)
    if m.sill == 0.0 and m.nugget == 0.0:
        field = np.zeros(shape)
    else:
        factor = _covariance_factor(spec.n_rows, spec.n_cols, m.nu, m.rho, m.sill, m.nugget)
        z = as_generator(spec.seed).standard_normal(spec.n_rows * spec.n_cols)
        field = (factor @ z).reshape(shape)
    if spec.mean_trend is not None:
        frame = CoordinateFrame(0.0, 0.0, float(spec.n_cols), float(spec.n_rows))
        locs = grid_locations(GeoGrid(np.zeros(shape)), only_observed=False)
        field = field + (trend_basis(locs, frame) @ np.asarray(spec.mean_trend)).reshape(shape)
    return GeoGrid(field, **registration)


def make_pair(fine, factor):
    """Return the training pair ``(coarse, fine)`` with coarse = block means of fine."""
    return coarsen(fine, factor), fine


def make_dataset(n_pairs, n, factor, model, seed, mean_trend=None, variable_name="value"):
    """``n_pairs`` independent (coarse, fine) pairs; pair ``i`` uses ``derive_seed(seed, i)``."""
    check_positive_int(n_pairs, "n_pairs", minimum=0)
    pairs = []
    for i in range(n_pairs):
        spec = GrfSpec(n, n, model, mean_trend=mean_trend, seed=derive_seed(seed, i))
        pairs.append(make_pair(sample_grf(spec, variable_name=variable_name), factor))
    return pairs
