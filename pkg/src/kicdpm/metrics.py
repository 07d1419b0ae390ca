"""Deterministic and probabilistic verification scores over jointly observed cells."""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import norm
from sklearn.exceptions import UndefinedMetricWarning

from .grid import GeoGrid


@dataclass(frozen=True)
class Ensemble:
    """Same-shape ensemble members; the empirical predictive distribution per cell."""

    members: tuple

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ValueError("ensemble must have at least one member")
        shape = _shape(members[0])
        if any(_shape(m) != shape for m in members):
            raise ValueError("ensemble members must share one shape")
        object.__setattr__(self, "members", members)

    def __len__(self):
        return len(self.members)

    @property
    def shape(self):
        return _shape(self.members[0])

    def stack(self):
        return np.stack([_values(m) for m in self.members])

    def observed(self):
        obs = np.ones(self.shape, dtype=bool)
        for m in self.members:
            obs &= _observed(m)
        return obs

    def mean(self):
        first = self.members[0]
        mean = self.stack().mean(axis=0)
        if isinstance(first, GeoGrid):
            return first.with_values(np.where(self.observed(), mean, 0.0),
                                     mask=~self.observed())
        return mean


def _shape(x):
    return x.shape if isinstance(x, GeoGrid) else np.shape(x)


def _values(x):
    return x.values if isinstance(x, GeoGrid) else np.asarray(x, dtype=np.float64)


def _observed(x):
    if isinstance(x, GeoGrid):
        return x.observed
    return np.isfinite(np.asarray(x, dtype=np.float64))


def _joint(pred, truth):
    if _shape(pred) != _shape(truth):
        raise ValueError(f"shape mismatch: {_shape(pred)} vs {_shape(truth)}")
    obs = _observed(pred) & _observed(truth)
    if not obs.any():
        raise ValueError("no jointly observed cells")
    return _values(pred)[obs], _values(truth)[obs]


def n_joint(pred, truth):
    """Number of jointly observed cells."""
    return int((_observed(pred) & _observed(truth)).sum())


def rmse(pred, truth):
    p, t = _joint(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(pred, truth):
    p, t = _joint(pred, truth)
    return float(np.mean(np.abs(p - t)))


def pcc(pred, truth):
    """Pearson correlation; NaN with an ``UndefinedMetricWarning`` if either side is constant."""
    p, t = _joint(pred, truth)
    dp, dt = p - p.mean(), t - t.mean()
    sp, st = np.sqrt(np.sum(dp * dp)), np.sqrt(np.sum(dt * dt))
    if sp == 0.0 or st == 0.0:
        which = "prediction" if sp == 0.0 else "truth"
        warnings.warn(f"PCC undefined: {which} has zero variance", UndefinedMetricWarning,
                      stacklevel=2)
        return float("nan")
    return float(np.clip(np.sum(dp * dt) / (sp * st), -1.0, 1.0))


def _as_ensemble(ens):
    # A bare array is split along its first axis into members.
    return ens if isinstance(ens, Ensemble) else Ensemble(tuple(ens))


def crps_cells(ens, truth):
    """Per-cell CRPS of the empirical ensemble CDF (NaN where not jointly observed).

    Uses the energy form ``mean|X_i - x| - 1/(2 n^2) sum_ij |X_i - X_j|``,
    which is the exact integral of ``(F_n(y) - 1{y >= x})^2`` for the
    empirical CDF ``F_n``. The pairwise sum is evaluated from sorted members
    as ``2 sum_k (2k - n - 1) X_(k)``.
    """
    ens = _as_ensemble(ens)
    if _shape(truth) != ens.shape:
        raise ValueError("truth shape does not match the ensemble")
    x = ens.stack()
    n = x.shape[0]
    y = _values(truth)
    skill = np.mean(np.abs(x - y[None]), axis=0)
    xs = np.sort(x, axis=0)
    k = np.arange(1, n + 1, dtype=np.float64).reshape((n,) + (1,) * (x.ndim - 1))
    pair_sum = 2.0 * np.sum((2.0 * k - n - 1.0) * xs, axis=0)
    out = skill - pair_sum / (2.0 * n * n)
    obs = ens.observed() & _observed(truth)
    return np.where(obs, np.maximum(out, 0.0), np.nan)


def crps_ensemble(ens, truth):
    """Mean per-cell CRPS over jointly observed cells (equal cell weights)."""
    cells = crps_cells(ens, truth)
    cells = cells[np.isfinite(cells)]
    if not cells.size:
        raise ValueError("no jointly observed cells")
    return float(np.mean(cells))


def crps_integral_oracle(members, truth_value, n_points=2 ** 17 + 1, pad=1.0):
    """Trapezoid quadrature of ``(F_n(y) - 1{y >= x})^2`` for one cell.

    Test oracle only: integrates the printed CRPS definition directly on a
    uniform grid over the padded support of members and observation.
    """
    m = np.sort(np.asarray(members, dtype=np.float64).ravel())
    if m.size == 0:
        raise ValueError("ensemble must have at least one member")
    x = float(truth_value)
    lo, hi = min(m[0], x), max(m[-1], x)
    width = max(hi - lo, 1e-12)
    y = np.linspace(lo - pad * width, hi + pad * width, n_points)
    cdf = np.searchsorted(m, y, side="right") / m.size
    step = (y >= x).astype(np.float64)
    return float(trapezoid((cdf - step) ** 2, y))


def gaussian_crps(mu, sigma, x):
    """Closed-form CRPS of ``N(mu, sigma^2)`` at observation ``x``."""
    z = (x - mu) / sigma
    return float(sigma * (z * (2 * norm.cdf(z) - 1) + 2 * norm.pdf(z) - 1 / np.sqrt(np.pi)))


def evaluate(pred, truth, ensemble=None):
    """Rows ``(metric, value, n_cells)`` for RMSE, MAE, PCC and, given an ensemble, CRPS."""
    n = n_joint(pred, truth)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UndefinedMetricWarning)
        rows = [("rmse", rmse(pred, truth), n), ("mae", mae(pred, truth), n),
                ("pcc", pcc(pred, truth), n)]
    if ensemble is not None:
        cells = crps_cells(ensemble, truth)
        rows.append(("crps", crps_ensemble(ensemble, truth), int(np.isfinite(cells).sum())))
    return rows
