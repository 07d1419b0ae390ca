"""Empirical variograms, the Matern variogram model and weighted least-squares fitting.

The Matern semivariance used throughout is

    gamma(h) = sill * (1 - 2^(1-nu) / Gamma(nu) * (h/rho)^nu * K_nu(h/rho)) + nugget,  h > 0
    gamma(0) = 0

with the plain ``h / rho`` argument (no ``sqrt(2 nu)`` rescaling). Distances
are Euclidean in cell units.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize_scalar, nnls
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .bessel import bessel_k
from .grid import GeoGrid
from .validation import check_finite_real, check_positive_int

DEFAULT_NU_GRID = (0.5, 1.0, 1.5, 2.5)
CONTINUOUS_NU_BOUNDS = (0.2, 5.0)
DEFAULT_N_BINS = 16
_RHO_GRID_SIZE = 33


@dataclass(frozen=True)
class EmpiricalVariogram:
    """Binned semivariance estimates.

    ``lags`` holds the mean pair separation of each populated bin; empty
    bins are dropped.
    """

    lags: np.ndarray
    semivariance: np.ndarray
    pair_counts: np.ndarray

    def __post_init__(self):
        lags = np.asarray(self.lags, dtype=np.float64)
        sv = np.asarray(self.semivariance, dtype=np.float64)
        counts = np.asarray(self.pair_counts, dtype=np.int64)
        if not (lags.shape == sv.shape == counts.shape) or lags.ndim != 1:
            raise ValueError("lags, semivariance and pair_counts must be 1-D and equal length")
        if lags.size and (np.any(np.diff(lags) <= 0) or lags[0] <= 0):
            raise ValueError("lags must be positive and strictly ascending")
        if np.any(~np.isfinite(sv)) or np.any(sv < 0):
            raise ValueError("semivariance must be finite and nonnegative")
        if np.any(counts <= 0):
            raise ValueError("pair counts must be positive (empty bins are omitted)")
        for name, arr in (("lags", lags), ("semivariance", sv), ("pair_counts", counts)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.lags.size

    def to_csv(self):
        rows = ["lag,semivariance,pair_count"]
        rows += [f"{h!r},{g!r},{int(n)}" for h, g, n in
                 zip(self.lags.tolist(), self.semivariance.tolist(), self.pair_counts)]
        return "\n".join(rows) + "\n"


@dataclass(frozen=True)
class MaternModel:
    """Matern variogram parameters: smoothness, range, partial sill, nugget.

    ``degenerate`` marks the pure-nugget fallback returned when the
    empirical variogram is identically zero.
    """

    nu: float
    rho: float
    sill: float
    nugget: float = 0.0
    degenerate: bool = False

    def __post_init__(self):
        check_finite_real(self.nu, "nu", low=0.0, low_inclusive=False)
        check_finite_real(self.rho, "rho", low=0.0, low_inclusive=False)
        check_finite_real(self.sill, "sill", low=0.0)
        check_finite_real(self.nugget, "nugget", low=0.0)
        for name in ("nu", "rho", "sill", "nugget"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def semivariance(self, h):
        return matern_eval(self, h)

    def covariance(self, h):
        """Stationary covariance ``sill * corr(h) + nugget * 1{h == 0}``."""
        h = np.asarray(h, dtype=np.float64)
        cov = self.sill * matern_correlation(self.nu, h / self.rho)
        return np.where(h == 0.0, cov + self.nugget, cov)

    @property
    def total_sill(self):
        return self.sill + self.nugget

    def scaled(self, factor):
        """Model for a field multiplied by ``sqrt(factor)`` (variance scaled by ``factor``)."""
        return replace(self, sill=self.sill * factor, nugget=self.nugget * factor)

    def to_text(self):
        return "".join(f"{k}={getattr(self, k)!r}\n"
                       for k in ("nu", "rho", "sill", "nugget", "degenerate"))


def _half_integer_order(nu):
    for n, half in enumerate((0.5, 1.5, 2.5)):
        if nu == half:
            return n
    return None


_SERIES_CUTOFF = 1.0
_SERIES_TERMS = 24


def _half_integer_series(n, z):
    """Taylor series of ``1 - corr`` for orders 3/2 (n=1) and 5/2 (n=2) on ``z < 1``.

    Coefficients of ``z^m``: ``(-1)^m (m - 1) / m!`` for 3/2 and
    ``-(-1)^m (1 - m + m (m - 1) / 3) / m!`` for 5/2.
    """
    acc = np.zeros_like(z)
    for m in range(_SERIES_TERMS, 1, -1):
        sign = 1.0 if m % 2 == 0 else -1.0
        if n == 1:
            c = sign * (m - 1) / math.factorial(m)
        else:
            c = -sign * (1 - m + m * (m - 1) / 3.0) / math.factorial(m)
        acc = (acc + c) * z
    return acc * z


def matern_correlation(nu, z):
    """Matern correlation ``2^(1-nu)/Gamma(nu) z^nu K_nu(z)``, equal to 1 at z = 0."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z < 0):
        raise ValueError("scaled distance must be nonnegative")
    return 1.0 - _one_minus_correlation(nu, z)


def _one_minus_correlation(nu, z):
    # Evaluated directly so small lags keep full relative precision.
    z = np.asarray(z, dtype=np.float64)
    n = _half_integer_order(nu)
    if n is not None:
        ez = np.exp(-z)
        out = -np.expm1(-z)
        if n >= 1:
            out = out - z * ez
        if n == 2:
            out = out - z * z / 3.0 * ez
        if n >= 1:
            # The closed form cancels to leading order near 0; use the Taylor series there.
            small = z < _SERIES_CUTOFF
            if np.any(small):
                out = np.where(small, _half_integer_series(n, np.where(small, z, 0.0)), out)
        return out
    out = np.zeros_like(z)
    pos = (z > 0) & (z < 700.0)
    out[z >= 700.0] = 1.0
    if np.any(pos):
        zp = z[pos]
        log_k = np.log(bessel_k(nu, zp))
        log_corr = (1.0 - nu) * math.log(2.0) - math.lgamma(nu) + nu * np.log(zp) + log_k
        out[pos] = -np.expm1(log_corr)
    return out


def matern_eval(model, h):
    """Matern semivariance at lag(s) ``h``; exactly 0 at ``h == 0``.

    Parameters
    ----------
    model : MaternModel
    h : float or array_like
        Nonnegative lag distance(s) in cell units.

    Returns
    -------
    float or ndarray
    """
    if not isinstance(model, MaternModel):
        raise TypeError("model must be a MaternModel")
    scalar = np.ndim(h) == 0
    h = np.asarray(h, dtype=np.float64)
    if np.any(~np.isfinite(h)) or np.any(h < 0):
        raise ValueError("lag distances must be finite and nonnegative")
    gamma = model.sill * _one_minus_correlation(model.nu, h / model.rho) + model.nugget
    gamma = np.where(h == 0.0, 0.0, gamma)
    return float(gamma) if scalar else gamma


def _offsets(n_rows, n_cols, max_lag):
    """Half-plane offsets (di, dj) with 0 < |d| <= max_lag; each unordered pair once."""
    out = []
    for di in range(0, n_rows):
        if di > max_lag:
            break
        for dj in range(-(n_cols - 1), n_cols):
            if di == 0 and dj <= 0:
                continue
            if di * di + dj * dj <= max_lag * max_lag:
                out.append((di, dj))
    return out


def _pair_slices(n_rows, n_cols, di, dj):
    j0 = max(0, -dj)
    j1 = n_cols - max(0, dj)
    a = (slice(0, n_rows - di), slice(j0, j1))
    b = (slice(di, n_rows), slice(j0 + dj, j1 + dj))
    return a, b


def _default_max_lag(shape):
    return 0.5 * math.hypot(shape[0] - 1, shape[1] - 1) if max(shape) > 1 else 1.0


def empirical_variogram(grid, n_bins=DEFAULT_N_BINS, max_lag=None, bin_edges=None):
    """Isotropic binned semivariance of a grid (or pooled over several grids).

    Every unordered pair of observed cells at distance ``<= max_lag`` falls
    in exactly one bin ``(e_k, e_{k+1}]``; bin semivariance is
    ``sum (z_i - z_j)^2 / (2 N)`` over its pairs.

    Parameters
    ----------
    grid : GeoGrid or sequence of GeoGrid
        Field(s) of identical shape. Pairs from all fields are pooled.
    n_bins : int, default=16
        Number of equal-width bins on ``(0, max_lag]``. Ignored when
        ``bin_edges`` is given.
    max_lag : float, optional
        Largest separation considered; defaults to half the grid diagonal.
    bin_edges : array_like, optional
        Explicit ascending bin edges starting at a value >= 0.

    Returns
    -------
    EmpiricalVariogram
    """
    grids = [grid] if isinstance(grid, GeoGrid) else list(grid)
    if not grids:
        raise ValueError("no grids supplied")
    shape = grids[0].shape
    if any(g.shape != shape for g in grids):
        raise ValueError("pooled grids must share one shape")
    if sum(g.n_observed for g in grids) < 2 or max(g.n_observed for g in grids) < 2:
        raise ValueError("empirical variogram needs at least 2 observed cells")

    if bin_edges is None:
        n_bins = check_positive_int(n_bins, "n_bins")
        if max_lag is None:
            max_lag = _default_max_lag(shape)
        max_lag = check_finite_real(max_lag, "max_lag", low=0.0, low_inclusive=False)
        edges = np.linspace(0.0, max_lag, n_bins + 1)
    else:
        edges = np.asarray(bin_edges, dtype=np.float64)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0) or edges[0] < 0:
            raise ValueError("bin_edges must be ascending, nonnegative, with >= 2 entries")
        max_lag = float(edges[-1])

    nb = edges.size - 1
    sq_sum = np.zeros(nb)
    count = np.zeros(nb, dtype=np.int64)
    dist_sum = np.zeros(nb)
    n_rows, n_cols = shape
    vals = np.stack([g.values for g in grids])
    obs = np.stack([g.observed for g in grids])
    for di, dj in _offsets(n_rows, n_cols, max_lag):
        d = math.hypot(di, dj)
        k = int(np.searchsorted(edges, d, side="left")) - 1
        if k < 0 or k >= nb:
            continue
        sa, sb = _pair_slices(n_rows, n_cols, di, dj)
        both = obs[(slice(None),) + sa] & obs[(slice(None),) + sb]
        n = int(both.sum())
        if n == 0:
            continue
        diff = vals[(slice(None),) + sa] - vals[(slice(None),) + sb]
        sq_sum[k] += float(np.sum(diff[both] ** 2))
        count[k] += n
        dist_sum[k] += n * d
    keep = count > 0
    return EmpiricalVariogram(
        lags=dist_sum[keep] / count[keep],
        semivariance=sq_sum[keep] / (2.0 * count[keep]),
        pair_counts=count[keep],
    )


def variogram_objective(emp, model):
    """Weighted squared misfit ``sum N(h)/h^2 (gamma_emp - gamma_model)^2``."""
    w = emp.pair_counts / emp.lags ** 2
    r = emp.semivariance - matern_eval(model, emp.lags)
    return float(np.sum(w * r * r))


def _profile(emp, nu, rho, fit_nugget=True):
    """Best (objective, sill, nugget) at fixed (nu, rho); linear NNLS in the amplitudes."""
    sw = np.sqrt(emp.pair_counts / emp.lags ** 2)
    g = _one_minus_correlation(nu, emp.lags / rho)
    cols = [g, np.ones_like(g)] if fit_nugget else [g]
    design = np.column_stack(cols) * sw[:, None]
    coef, _ = nnls(design, emp.semivariance * sw)
    sill = float(coef[0])
    nugget = float(coef[1]) if fit_nugget else 0.0
    obj = variogram_objective(emp, MaternModel(nu, rho, sill, nugget))
    return obj, sill, nugget


def _fit_fixed_nu(emp, nu, log_rho_grid, fit_nugget=True):
    starts = [(_profile(emp, nu, math.exp(lr), fit_nugget), lr) for lr in log_rho_grid]
    candidates = [(obj, nu, math.exp(lr), s, c) for (obj, s, c), lr in starts]
    k = min(range(len(starts)), key=lambda i: (starts[i][0][0], i))
    lo = log_rho_grid[max(k - 1, 0)]
    hi = log_rho_grid[min(k + 1, len(log_rho_grid) - 1)]
    if hi > lo:
        res = minimize_scalar(lambda lr: _profile(emp, nu, math.exp(lr), fit_nugget)[0],
                              bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-10, "maxiter": 500})
        obj, s, c = _profile(emp, nu, math.exp(res.x), fit_nugget)
        candidates.append((obj, nu, math.exp(res.x), s, c))
    return min(candidates)


def fit_variogram(emp, fixed_nu=None, nu_grid=DEFAULT_NU_GRID, continuous_nu=False,
                  fit_nugget=True):
    """Fit a Matern model to an empirical variogram by weighted least squares.

    The misfit ``sum N(h)/h^2 (gamma_emp(h) - gamma(h))^2`` is minimized over
    ``(nu, rho, sill, nugget)``. For fixed ``(nu, rho)`` the model is linear
    in ``(sill, nugget)``, which are solved exactly by nonnegative least
    squares; ``log rho`` is searched over a fixed 33-point start grid spanning
    ``[h_min/20, 20 h_max]`` and the best start is refined by bounded Brent
    search between its neighbours. ``nu`` is taken from ``nu_grid`` by
    discrete search, or held at ``fixed_nu``. With ``continuous_nu=True``
    the best discrete ``nu`` is refined on ``[0.2, 5]``. ``fit_nugget=False``
    pins the nugget at zero.

    Returns
    -------
    MaternModel
        With ``degenerate=True`` (and zero sill and nugget) when every
        semivariance is zero.
    """
    if not isinstance(emp, EmpiricalVariogram):
        raise TypeError("emp must be an EmpiricalVariogram")
    need = 3 if fixed_nu is not None else 4
    if len(emp) < need:
        raise ValueError(f"variogram fit needs at least {need} populated bins, got {len(emp)}")
    if fixed_nu is not None:
        nus = [check_finite_real(fixed_nu, "fixed_nu", low=0.0, low_inclusive=False)]
    else:
        nus = [float(v) for v in nu_grid]
    if np.all(emp.semivariance == 0.0):
        return MaternModel(nus[0], float(np.median(emp.lags)), 0.0, 0.0, degenerate=True)

    log_rho_grid = np.linspace(math.log(emp.lags[0] / 20.0), math.log(emp.lags[-1] * 20.0),
                               _RHO_GRID_SIZE).tolist()
    best = min(_fit_fixed_nu(emp, nu, log_rho_grid, fit_nugget) for nu in nus)
    if continuous_nu and fixed_nu is None:
        lo, hi = CONTINUOUS_NU_BOUNDS
        res = minimize_scalar(lambda v: _fit_fixed_nu(emp, v, log_rho_grid, fit_nugget)[0],
                              bounds=(lo, hi), method="bounded", options={"xatol": 1e-4})
        best = min(best, _fit_fixed_nu(emp, float(res.x), log_rho_grid, fit_nugget))
    _, nu, rho, sill, nugget = best
    return MaternModel(nu, rho, sill, nugget)


def fit_start_points(emp, fixed_nu=None, nu_grid=DEFAULT_NU_GRID, fit_nugget=True):
    """The fixed multi-start models ``fit_variogram`` evaluates before refinement."""
    nus = [float(fixed_nu)] if fixed_nu is not None else [float(v) for v in nu_grid]
    log_rho_grid = np.linspace(math.log(emp.lags[0] / 20.0), math.log(emp.lags[-1] * 20.0),
                               _RHO_GRID_SIZE)
    out = []
    for nu in nus:
        for lr in log_rho_grid:
            _, s, c = _profile(emp, nu, math.exp(lr), fit_nugget)
            out.append(MaternModel(nu, math.exp(lr), s, c))
    return out


class MaternVariogram(BaseEstimator):
    """Estimate and fit an isotropic Matern variogram.

    Parameters
    ----------
    n_bins : int, default=16
    max_lag : float, optional
        Defaults to half the grid diagonal.
    nu : float, optional
        Hold the smoothness fixed instead of searching ``nu_grid``.
    nu_grid : tuple of float, default=(0.5, 1.0, 1.5, 2.5)
    continuous_nu : bool, default=False
    fit_nugget : bool, default=True
        Pin the nugget at zero when False.

    Attributes
    ----------
    empirical_ : EmpiricalVariogram
    model_ : MaternModel
    """

    def __init__(self, n_bins=DEFAULT_N_BINS, max_lag=None, nu=None,
                 nu_grid=DEFAULT_NU_GRID, continuous_nu=False, fit_nugget=True):
        self.n_bins = n_bins
        self.max_lag = max_lag
        self.nu = nu
        self.nu_grid = nu_grid
        self.continuous_nu = continuous_nu
        self.fit_nugget = fit_nugget

    def fit(self, X, y=None):
        """Fit to a GeoGrid, a list of GeoGrids (pooled) or an EmpiricalVariogram."""
        if isinstance(X, EmpiricalVariogram):
            self.empirical_ = X
        else:
            self.empirical_ = empirical_variogram(X, n_bins=self.n_bins, max_lag=self.max_lag)
        self.model_ = fit_variogram(self.empirical_, fixed_nu=self.nu, nu_grid=self.nu_grid,
                                    continuous_nu=self.continuous_nu,
                                    fit_nugget=self.fit_nugget)
        return self

    def predict(self, h):
        """Fitted semivariance at lags ``h``."""
        check_is_fitted(self, "model_")
        return matern_eval(self.model_, h)

    def score(self, X=None, y=None):
        """Negative weighted misfit against the fitted empirical variogram."""
        check_is_fitted(self, "model_")
        return -variogram_objective(self.empirical_, self.model_)
