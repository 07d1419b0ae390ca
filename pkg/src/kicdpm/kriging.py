"""Universal kriging with a quadratic trend, plus bicubic interpolation baselines.

Coordinates are ``(x, y) = (column, row)`` positions in cell units of the
coarse grid, so coarse cell ``(i, j)`` sits at ``(j + 0.5, i + 0.5)``. The
trend basis ``[1, x, y, x^2, y^2, xy]`` is evaluated on coordinates
normalized by the grid extent to ``[0, 1]^2``.

The pipeline is trend fit -> residuals -> residual variogram -> bordered
kriging system; each prediction is the kriged residual plus the trend at
the target, which equals ``sum_i lambda_i z_i`` exactly because the weights
reproduce every basis function.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.interpolate import make_interp_spline
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .grid import GeoGrid, refine_registration
from .validation import check_grid, check_positive_int
from .variogram import (DEFAULT_N_BINS, MaternModel, empirical_variogram, fit_variogram,
                        matern_eval)

log = logging.getLogger(__name__)

BASIS_NAMES = ("1", "x", "y", "x^2", "y^2", "xy")
N_BASIS = len(BASIS_NAMES)
COND_LIMIT = 1e12
JITTER_BASE = 1e-10
JITTER_ESCALATIONS = 3
LOCAL_DEFAULT_K = 32
# Residuals below this fraction of the data scale are round-off from the trend fit.
RESIDUAL_ROUNDOFF = 1e-10


class KrigingError(RuntimeError):
    """Raised when a kriging system cannot be built or solved."""


class RankDeficientTrendError(KrigingError):
    def __init__(self, message, null_directions=()):
        super().__init__(message)
        self.null_directions = null_directions


@dataclass(frozen=True)
class CoordinateFrame:
    """Affine map from cell-unit coordinates to the unit square used by the trend."""

    x0: float = 0.0
    y0: float = 0.0
    width: float = 1.0
    height: float = 1.0

    @classmethod
    def for_grid(cls, grid):
        return cls(0.0, 0.0, float(grid.n_cols), float(grid.n_rows))

    @classmethod
    def bounding(cls, locs):
        locs = np.asarray(locs, dtype=np.float64)
        lo, hi = locs.min(axis=0), locs.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        return cls(float(lo[0]), float(lo[1]), float(span[0]), float(span[1]))

    def normalize(self, locs):
        locs = np.asarray(locs, dtype=np.float64)
        return np.column_stack([(locs[:, 0] - self.x0) / self.width,
                                (locs[:, 1] - self.y0) / self.height])


def trend_basis(locs, frame):
    """Design matrix ``[1, x, y, x^2, y^2, xy]`` at ``locs`` (shape ``(n, 2)``)."""
    u = frame.normalize(np.atleast_2d(locs))
    x, y = u[:, 0], u[:, 1]
    return np.column_stack([np.ones_like(x), x, y, x * x, y * y, x * y])


def grid_locations(grid, only_observed=True):
    """Cell-center coordinates ``(x, y)`` of a grid, row-major."""
    ii, jj = np.meshgrid(np.arange(grid.n_rows), np.arange(grid.n_cols), indexing="ij")
    locs = np.column_stack([jj.ravel() + 0.5, ii.ravel() + 0.5])
    if only_observed:
        locs = locs[grid.observed.ravel()]
    return locs


def fine_target_locations(coarse_shape, factor):
    """Centers of the factor-refined cells, in coarse cell units, row-major."""
    n_rows, n_cols = coarse_shape[0] * factor, coarse_shape[1] * factor
    ii, jj = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    return np.column_stack([(jj.ravel() + 0.5) / factor, (ii.ravel() + 0.5) / factor])


@dataclass(frozen=True)
class TrendModel:
    """Quadratic trend ``m(s) = beta . [1, x, y, x^2, y^2, xy]`` in normalized coordinates."""

    beta: np.ndarray
    frame: CoordinateFrame = field(default_factory=CoordinateFrame)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if beta.size != N_BASIS or not np.all(np.isfinite(beta)):
            raise ValueError("trend needs 6 finite coefficients")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    def evaluate(self, locs):
        return trend_basis(locs, self.frame) @ self.beta

    def evaluate_grid(self, grid):
        return self.evaluate(grid_locations(grid, only_observed=False)).reshape(grid.shape)


def _null_directions(design):
    _, s, vt = np.linalg.svd(design, full_matrices=True)
    tol = s.max() * max(design.shape) * np.finfo(float).eps if s.size else 0.0
    rank = int(np.sum(s > tol))
    dirs = []
    for v in vt[rank:]:
        v = v / np.abs(v).max()
        terms = [f"{c:+.3g}*{name}" for c, name in zip(v, BASIS_NAMES) if abs(c) > 1e-8]
        dirs.append(" ".join(terms))
    return rank, dirs


def fit_trend(grid):
    """Ordinary least-squares quadratic trend over the observed cells.

    Raises
    ------
    RankDeficientTrendError
        When fewer than 6 cells are observed or the design matrix is rank
        deficient; the message lists the unidentifiable basis combinations.
    """
    check_grid(grid)
    if grid.n_observed < N_BASIS:
        raise RankDeficientTrendError(
            f"trend fit needs at least {N_BASIS} observed cells, got {grid.n_observed}")
    frame = CoordinateFrame.for_grid(grid)
    locs = grid_locations(grid)
    design = trend_basis(locs, frame)
    rank, dirs = _null_directions(design)
    if rank < N_BASIS:
        raise RankDeficientTrendError(
            "rank-deficient trend design (rank {}); unidentified directions: {}".format(
                rank, "; ".join(dirs)), tuple(dirs))
    z = grid.values[grid.observed]
    beta, *_ = np.linalg.lstsq(design, z, rcond=None)
    return TrendModel(beta, frame)


def residuals(grid, trend):
    """Observed minus trend; missing cells stay missing."""
    check_grid(grid)
    r = grid.values - trend.evaluate_grid(grid)
    return grid.with_values(np.where(grid.mask, 0.0, r), mask=grid.mask)


@dataclass(frozen=True)
class KrigingSystem:
    """Bordered universal-kriging system ``[[G, F], [F^T, 0]] w = [g0; f0]``."""

    matrix: np.ndarray
    rhs: np.ndarray
    locations: np.ndarray
    values: np.ndarray = None
    sill: float = 1.0
    n_merged: int = 0

    @property
    def n_samples(self):
        return self.locations.shape[0]


@dataclass(frozen=True)
class KrigingSolution:
    """Weights, Lagrange multipliers and prediction for one target."""

    weights: np.ndarray
    multipliers: np.ndarray
    basis_target: np.ndarray
    prediction: float = None
    condition: float = None
    jitter: float = 0.0

    @property
    def jittered(self):
        return self.jitter > 0.0


def collapse_duplicates(locs, values=None):
    """Merge samples sharing a location, averaging their values."""
    locs = np.asarray(locs, dtype=np.float64)
    uniq, inverse, counts = np.unique(locs, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    if uniq.shape[0] == locs.shape[0]:
        return locs, values, 0
    order = np.argsort(inverse, kind="stable")
    first = np.unique(inverse[order], return_index=True)[1]
    keep_order = np.sort(order[first])
    out_locs = locs[keep_order]
    out_vals = None
    if values is not None:
        values = np.asarray(values, dtype=np.float64)
        sums = np.bincount(inverse, weights=values)
        means = sums / counts
        out_vals = means[inverse[keep_order]]
    return out_locs, out_vals, locs.shape[0] - uniq.shape[0]


def semivariance_matrix(model, a, b):
    return matern_eval(model, cdist(a, b))


def assemble_system(sample_locs, model, target, values=None, frame=None):
    """Build the bordered universal-kriging system for one target.

    Parameters
    ----------
    sample_locs : array_like, shape (n, 2)
    model : MaternModel
    target : array_like, shape (2,)
    values : array_like, shape (n,), optional
        Sample values, carried along so the solution can report a prediction.
    frame : CoordinateFrame, optional
        Trend coordinate normalization; defaults to the samples' bounding box.

    Returns
    -------
    KrigingSystem
        ``(n + 6) x (n + 6)`` symmetric matrix and right-hand side. Samples
        at duplicate locations are merged (values averaged) first.
    """
    locs, values, n_merged = collapse_duplicates(sample_locs, values)
    if n_merged:
        log.info("merged %d duplicate sample locations", n_merged)
    n = locs.shape[0]
    if n < N_BASIS:
        raise KrigingError(f"universal kriging needs at least {N_BASIS} samples, got {n}")
    frame = frame or CoordinateFrame.bounding(locs)
    target = np.asarray(target, dtype=np.float64).reshape(1, 2)
    f = trend_basis(locs, frame)
    rank, dirs = _null_directions(f)
    if rank < N_BASIS:
        raise RankDeficientTrendError(
            "rank-deficient trend border; unidentified directions: " + "; ".join(dirs),
            tuple(dirs))
    a = np.zeros((n + N_BASIS, n + N_BASIS))
    a[:n, :n] = semivariance_matrix(model, locs, locs)
    a[:n, n:] = f
    a[n:, :n] = f.T
    rhs = np.concatenate([semivariance_matrix(model, locs, target)[:, 0],
                          trend_basis(target, frame)[0]])
    return KrigingSystem(a, rhs, locs, values, sill=model.sill, n_merged=n_merged)


def _factor_with_jitter(matrix, n, sill):
    """LU-factor the system, adding diagonal jitter to the semivariance block if needed."""
    scale = sill if sill > 0 else 1.0
    cond = np.linalg.cond(matrix)
    jitter = 0.0
    a = matrix
    for level in range(JITTER_ESCALATIONS + 1):
        if np.isfinite(cond) and cond <= COND_LIMIT:
            return scipy.linalg.lu_factor(a, check_finite=True), cond, jitter
        if level == JITTER_ESCALATIONS:
            break
        jitter = JITTER_BASE * scale * 10.0 ** level
        a = matrix.copy()
        a[np.arange(n), np.arange(n)] += jitter
        cond = np.linalg.cond(a)
        log.warning("kriging system ill-conditioned; retrying with jitter %.3g", jitter)
    raise KrigingError(f"kriging system singular after jitter (condition estimate {cond:.3g})")


def solve_system(system):
    """Solve a bordered kriging system by pivoted LU.

    When the condition estimate exceeds 1e12 the semivariance diagonal is
    jittered by ``1e-10 * sill``, escalating by 10x at most three times, and
    the solution is flagged via ``jitter``.
    """
    n = system.n_samples
    lu, cond, jitter = _factor_with_jitter(system.matrix, n, system.sill)
    w = scipy.linalg.lu_solve(lu, system.rhs)
    lam, mu = w[:n], w[n:]
    pred = None if system.values is None else float(lam @ system.values)
    return KrigingSolution(weights=lam, multipliers=mu, basis_target=system.rhs[n:].copy(),
                           prediction=pred, condition=float(cond), jitter=jitter)


def krige_points(sample_locs, sample_values, targets, model, trend, local=None):
    """Universal-kriging predictions of residual + trend at ``targets``.

    ``sample_values`` are residuals from ``trend``. With ``local=k`` each
    target uses only its ``k`` nearest samples.
    """
    sample_locs = np.asarray(sample_locs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    sample_locs, sample_values, _ = collapse_duplicates(sample_locs, sample_values)
    base = trend.evaluate(targets)
    if model.sill == 0.0 and model.nugget == 0.0:
        return base
    n = sample_locs.shape[0]
    frame = trend.frame
    if local is None or local >= n:
        a = assemble_system(sample_locs, model, sample_locs[0], frame=frame).matrix
        lu, _, _ = _factor_with_jitter(a, n, model.sill)
        rhs = np.vstack([semivariance_matrix(model, sample_locs, targets),
                         trend_basis(targets, frame).T])
        w = scipy.linalg.lu_solve(lu, rhs)
        return w[:n].T @ sample_values + base
    k = check_positive_int(local, "local", minimum=N_BASIS)
    tree = cKDTree(sample_locs)
    _, idx = tree.query(targets, k=k)
    out = np.empty(targets.shape[0])
    for t in range(targets.shape[0]):
        nb = np.sort(idx[t])
        system = assemble_system(sample_locs[nb], model, targets[t],
                                 values=sample_values[nb], frame=frame)
        out[t] = solve_system(system).prediction
    return out + base


def ukrig_downscale(coarse, factor, model=None, local=None, n_bins=DEFAULT_N_BINS,
                    fixed_nu=None, fit_nugget=False, return_details=False):
    """Downscale a coarse grid by universal kriging.

    Parameters
    ----------
    coarse : GeoGrid
        At least 6 observed cells with a full-rank trend design.
    factor : int
        Refinement factor along each axis.
    model : MaternModel, optional
        Residual variogram model in coarse cell units. Fitted to the trend
        residuals when omitted.
    local : int, optional
        Use the ``local`` nearest coarse cells per target instead of all.
    fit_nugget : bool, default=False
        Fit a nugget in the residual variogram. Off by default: coarse cells
        are noise-free block means, so the kriged surface should honour them.
    return_details : bool, default=False
        Also return ``(trend, model)``.

    Returns
    -------
    GeoGrid
        Predictions at every fine cell center.
    """
    check_grid(coarse)
    factor = check_positive_int(factor, "factor")
    trend = fit_trend(coarse)
    resid = residuals(coarse, trend)
    observed = coarse.values[coarse.observed]
    scale = max(float(np.max(np.abs(observed))), 1.0)
    if np.max(np.abs(resid.values)) <= RESIDUAL_ROUNDOFF * scale:
        resid = resid.with_values(np.zeros(resid.shape), mask=resid.mask)
    if model is None:
        model = fit_variogram(empirical_variogram(resid, n_bins=n_bins), fixed_nu=fixed_nu,
                              fit_nugget=fit_nugget)
    locs = grid_locations(coarse)
    vals = resid.values[coarse.observed]
    targets = fine_target_locations(coarse.shape, factor)
    pred = krige_points(locs, vals, targets, model, trend, local=local)
    fine = GeoGrid(pred.reshape(coarse.n_rows * factor, coarse.n_cols * factor),
                   **refine_registration(coarse, factor))
    if return_details:
        return fine, trend, model
    return fine


def _catmull_rom_matrix(n_in, factor):
    """Interpolation matrix ``(n_in * factor, n_in)`` at fine centers, edges clamped."""
    n_out = n_in * factor
    u = (np.arange(n_out) + 0.5) / factor - 0.5
    i0 = np.floor(u).astype(int)
    t = u - i0
    t2, t3 = t * t, t * t * t
    weights = np.stack([
        (-t3 + 2 * t2 - t) / 2,
        (3 * t3 - 5 * t2 + 2) / 2,
        (-3 * t3 + 4 * t2 + t) / 2,
        (t3 - t2) / 2,
    ], axis=1)
    m = np.zeros((n_out, n_in))
    for k in range(4):
        idx = np.clip(i0 + k - 1, 0, n_in - 1)
        np.add.at(m, (np.arange(n_out), idx), weights[:, k])
    return m


def _spline_matrix(n_in, factor):
    """Not-a-knot cubic spline through the coarse centers, sampled at fine centers.

    Sample positions outside the hull of the coarse centers are clamped to
    it, so edge cells take the boundary value instead of an extrapolation.
    """
    u = np.clip((np.arange(n_in * factor) + 0.5) / factor - 0.5, 0.0, n_in - 1.0)
    return make_interp_spline(np.arange(n_in, dtype=np.float64), np.eye(n_in), k=3, axis=0)(u)


BICUBIC_KERNELS = {"spline": _spline_matrix, "catmull-rom": _catmull_rom_matrix}


def bicubic_upsample(coarse, factor, kernel="spline"):
    """Separable bicubic interpolation at the factor-refined cell centers.

    ``kernel="spline"`` (default) is tensor-product cubic spline
    interpolation, exact for polynomials of degree 3 per axis inside the
    hull of the coarse centers. ``kernel="catmull-rom"`` is the Keys
    convolution kernel with ``a = -1/2``, exact up to degree 2.
    """
    check_grid(coarse)
    factor = check_positive_int(factor, "factor")
    if kernel not in BICUBIC_KERNELS:
        raise ValueError(f"unknown bicubic kernel {kernel!r}; use one of {sorted(BICUBIC_KERNELS)}")
    if not coarse.fully_observed:
        raise ValueError("bicubic interpolation requires a fully observed grid")
    if coarse.n_rows < 4 or coarse.n_cols < 4:
        raise ValueError("bicubic interpolation requires at least 4x4 cells")
    build = BICUBIC_KERNELS[kernel]
    wr = build(coarse.n_rows, factor)
    wc = build(coarse.n_cols, factor)
    return GeoGrid(wr @ coarse.values @ wc.T, **refine_registration(coarse, factor))


class UniversalKriging(RegressorMixin, BaseEstimator):
    """Universal kriging of one gridded field with a quadratic trend.

    ``fit`` takes a :class:`GeoGrid`; ``predict`` takes coordinates
    ``(n, 2)`` as ``(x, y)`` in the grid's cell units.

    Parameters
    ----------
    model : MaternModel, optional
        Fixed residual variogram. Fitted on trend residuals when None.
    nu : float, optional
        Fixed smoothness for the variogram fit.
    n_bins : int, default=16
    local : int, optional
        Nearest-neighbour window size; global kriging when None.
    fit_nugget : bool, default=False
    """

    def __init__(self, model=None, nu=None, n_bins=DEFAULT_N_BINS, local=None,
                 fit_nugget=False):
        self.model = model
        self.nu = nu
        self.n_bins = n_bins
        self.local = local
        self.fit_nugget = fit_nugget

    def fit(self, X, y=None):
        check_grid(X, "X")
        self.trend_ = fit_trend(X)
        self.residuals_ = residuals(X, self.trend_)
        if self.model is None:
            self.empirical_ = empirical_variogram(self.residuals_, n_bins=self.n_bins)
            self.model_ = fit_variogram(self.empirical_, fixed_nu=self.nu,
                                        fit_nugget=self.fit_nugget)
        else:
            self.model_ = self.model
        self.locations_ = grid_locations(X)
        self.sample_residuals_ = self.residuals_.values[X.observed]
        self.grid_shape_ = X.shape
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != 2:
            raise ValueError("prediction coordinates must have shape (n, 2)")
        return krige_points(self.locations_, self.sample_residuals_, X, self.model_,
                            self.trend_, local=self.local)


class KrigingDownscaler(TransformerMixin, BaseEstimator):
    """Stateless transformer: coarse GeoGrid(s) to kriged fine GeoGrid(s)."""

    def __init__(self, factor=4, model=None, nu=None, n_bins=DEFAULT_N_BINS, local=None,
                 fit_nugget=False):
        self.factor = factor
        self.model = model
        self.nu = nu
        self.n_bins = n_bins
        self.local = local
        self.fit_nugget = fit_nugget

    def fit(self, X=None, y=None):
        check_positive_int(self.factor, "factor")
        return self

    def _one(self, grid):
        return ukrig_downscale(grid, self.factor, model=self.model, local=self.local,
                               n_bins=self.n_bins, fixed_nu=self.nu,
                               fit_nugget=self.fit_nugget)

    def transform(self, X):
        if isinstance(X, GeoGrid):
            return self._one(X)
        return [self._one(g) for g in X]


class BicubicDownscaler(TransformerMixin, BaseEstimator):
    """Stateless transformer applying :func:`bicubic_upsample`."""

    def __init__(self, factor=4, kernel="spline"):
        self.factor = factor
        self.kernel = kernel

    def fit(self, X=None, y=None):
        check_positive_int(self.factor, "factor")
        return self

    def transform(self, X):
        if isinstance(X, GeoGrid):
            return bicubic_upsample(X, self.factor, self.kernel)
        return [bicubic_upsample(g, self.factor, self.kernel) for g in X]


def make_conditioner(method, factor, **kwargs):
    """Downscaler used to build diffusion conditionals.

    ``method`` is ``"ukrig"``, ``"bicubic"`` (cubic spline) or
    ``"catmull-rom"``.
    """
    if method == "ukrig":
        return KrigingDownscaler(factor=factor, **kwargs)
    if method == "bicubic":
        return BicubicDownscaler(factor=factor, kernel="spline")
    if method == "catmull-rom":
        return BicubicDownscaler(factor=factor, kernel="catmull-rom")
    raise ValueError(f"unknown conditioning method {method!r}")
