"""Input validation helpers shared by the estimators and functional API."""

import numbers

import numpy as np


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_finite_real(value, name, *, low=None, high=None, low_inclusive=True):
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value}")
    if low is not None:
        bad = value < low if low_inclusive else value <= low
        if bad:
            op = ">=" if low_inclusive else ">"
            raise ValueError(f"{name} must be {op} {low}, got {value}")
    if high is not None and value > high:
        raise ValueError(f"{name} must be <= {high}, got {value}")
    return value


def check_field(x, name="x", ndim=None):
    """Coerce to a float64 array and reject non-finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise ValueError(
            f"shape mismatch: {names[0]} {np.shape(a)} vs {names[1]} {np.shape(b)}"
        )


def check_grid(grid, name="grid"):
    from .grid import GeoGrid

    if not isinstance(grid, GeoGrid):
        raise TypeError(f"{name} must be a GeoGrid, got {type(grid).__name__}")
    return grid


def check_psi(psi):
    psi = float(psi)
    if not (0.0 < psi <= 1.0):
        raise ValueError(f"noise level psi must lie in (0, 1], got {psi}")
    return psi


def as_generator(rng):
    """Accept a seed, a Generator, or None and return a ``numpy.random.Generator``.

    Integer seeds always map onto PCG64 so that streams are portable.
    """
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, numbers.Integral):
        return np.random.Generator(np.random.PCG64(rng))
    raise TypeError(f"cannot build a random generator from {type(rng).__name__}")
