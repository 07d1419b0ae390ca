"""Noise schedule, forward noising, posterior, x0 estimate and the conditional sampler.

Step indices are 1-based: ``alpha[t - 1]`` is alpha_t, and ``psi_0 = 1``.
Any callable ``denoiser(x_t, y, sqrt_psi) -> eps_hat`` (or an object with a
``predict_noise`` method of that signature) can drive the reverse chain.
Arrays are ``(H, W)`` or batched ``(B, H, W)``; a per-sample noise level
may be given as a length-``B`` vector.
"""

from dataclasses import dataclass

import numpy as np

from .grid import GeoGrid
from .validation import as_generator, check_finite_real, check_positive_int, check_psi


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances ``beta``, retentions ``alpha = 1 - beta`` and ``psi = cumprod(alpha)``."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64).reshape(-1)
        if beta.size < 1:
            raise ValueError("schedule needs at least one step")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta_t must lie in (0, 1)")
        alpha = 1.0 - beta
        psi = np.cumprod(alpha)
        for name, arr in (("beta", beta), ("alpha", alpha), ("psi", psi)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    alpha = None
    psi = None

    @property
    def T(self):
        return self.beta.size

    def _check_t(self, t):
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"step t must lie in [1, {self.T}], got {t}")
        return t

    def alpha_t(self, t):
        return float(self.alpha[self._check_t(t) - 1])

    def psi_t(self, t):
        """Cumulative ``psi_t``; ``psi_t(0) == 1``."""
        t = int(t)
        if t == 0:
            return 1.0
        return float(self.psi[self._check_t(t) - 1])


def make_schedule(T=1000, beta_start=1e-4, beta_end=0.02):
    """Linear variance schedule from ``beta_start`` to ``beta_end`` inclusive."""
    T = check_positive_int(T, "T")
    beta_start = check_finite_real(beta_start, "beta_start", low=0.0, low_inclusive=False)
    beta_end = check_finite_real(beta_end, "beta_end", high=1.0)
    if not beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def sample_psi(schedule, rng, size=None):
    """Draw from the piecewise-uniform noise-level law.

    ``t`` is uniform on ``{1..T}`` and ``psi`` uniform between ``psi_t`` and
    ``psi_{t-1}``. Returns ``(psi, t)``; arrays when ``size`` is given. For
    each draw ``t`` is generated before ``psi``.
    """
    rng = as_generator(rng)
    psi_prev = np.concatenate([[1.0], schedule.psi])
    if size is None:
        t = int(rng.integers(1, schedule.T + 1))
        psi = float(rng.uniform(schedule.psi[t - 1], psi_prev[t - 1]))
        return psi, t
    ts = np.empty(size, dtype=np.int64)
    psis = np.empty(size)
    for i in range(size):
        psis[i], ts[i] = sample_psi(schedule, rng)
    return psis, ts


def _level(psi, x):
    """Broadcast a scalar or per-sample noise level against ``x``."""
    psi = np.asarray(psi, dtype=np.float64)
    if psi.ndim == 0:
        check_psi(psi)
        return psi
    if np.any(psi <= 0) or np.any(psi > 1):
        raise ValueError("noise levels must lie in (0, 1]")
    return psi.reshape(psi.shape + (1,) * (np.ndim(x) - psi.ndim))


def forward_sample(x0, psi, epsilon):
    """Noisy map ``sqrt(psi) x0 + sqrt(1 - psi) eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if x0.shape != epsilon.shape:
        raise ValueError(f"x0 {x0.shape} and epsilon {epsilon.shape} shapes differ")
    p = _level(psi, x0)
    return np.sqrt(p) * x0 + np.sqrt(1.0 - p) * epsilon


def estimate_x0(xt, eps_pred, psi):
    """Invert the forward map: ``(x_t - sqrt(1 - psi) eps_hat) / sqrt(psi)``."""
    xt = np.asarray(xt, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if xt.shape != eps_pred.shape:
        raise ValueError("x_t and eps_pred shapes differ")
    p = _level(psi, xt)
    return (xt - np.sqrt(1.0 - p) * eps_pred) / np.sqrt(p)


def posterior_params(x0, xt, t, schedule):
    """Mean and variance of ``q(x_{t-1} | x_0, x_t)``.

    ``mu = sqrt(psi_{t-1}) (1 - alpha_t) / (1 - psi_t) x0
         + sqrt(alpha_t) (1 - psi_{t-1}) / (1 - psi_t) x_t``,
    ``sigma2 = (1 - psi_{t-1}) (1 - alpha_t) / (1 - psi_t)``.
    """
    t = schedule._check_t(t)
    a = schedule.alpha_t(t)
    p, p_prev = schedule.psi_t(t), schedule.psi_t(t - 1)
    x0 = np.asarray(x0, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    c0 = np.sqrt(p_prev) * (1.0 - a) / (1.0 - p)
    ct = np.sqrt(a) * (1.0 - p_prev) / (1.0 - p)
    sigma2 = (1.0 - p_prev) * (1.0 - a) / (1.0 - p)
    return c0 * x0 + ct * xt, float(sigma2)


def predict_noise(denoiser, xt, cond, sqrt_psi):
    fn = getattr(denoiser, "predict_noise", denoiser)
    eps = np.asarray(fn(xt, cond, sqrt_psi), dtype=np.float64)
    if eps.shape != np.shape(xt):
        raise ValueError(f"denoiser returned shape {eps.shape}, expected {np.shape(xt)}")
    return eps


def _normals(rng, shape):
    """Standard normals of ``shape``; one generator per leading-axis chain when a list."""
    if isinstance(rng, (list, tuple)):
        return np.stack([g.standard_normal(shape[1:]) for g in rng])
    return as_generator(rng).standard_normal(shape)


def reverse_step(xt, cond, t, schedule, denoiser, rng):
    """One ancestral step ``x_t -> x_{t-1}``.

    ``x_{t-1} = (x_t - (1 - alpha_t) / sqrt(1 - psi_t) eps_hat) / sqrt(alpha_t)
    + sqrt(1 - alpha_t) z`` with ``z ~ N(0, I)`` for ``t > 1`` and ``z = 0``
    at ``t = 1``. ``rng`` may be a list of generators, one per batch row.
    """
    t = schedule._check_t(t)
    xt = np.asarray(xt, dtype=np.float64)
    a, p = schedule.alpha_t(t), schedule.psi_t(t)
    eps = predict_noise(denoiser, xt, cond, np.sqrt(p))
    mean = (xt - (1.0 - a) / np.sqrt(1.0 - p) * eps) / np.sqrt(a)
    if t == 1:
        return mean
    return mean + np.sqrt(1.0 - a) * _normals(rng, xt.shape)


def chain_generators(seed, n_chains):
    """Independent PCG64 streams; chain ``i`` is seeded with ``seed + i``."""
    return [np.random.Generator(np.random.PCG64(int(seed) + i)) for i in range(n_chains)]


def run_chains(cond, schedule, denoiser, seed, n_samples, clip=True):
    """Run ``n_samples`` reverse chains conditioned on the normalized map ``cond``.

    ``cond`` is one ``(H, W)`` map shared by all chains or an
    ``(n_samples, H, W)`` stack with one map per chain. Chains are batched;
    each draws its initial state and per-step noise from its own generator.
    Returns an ``(n_samples, H, W)`` array, clipped to ``[-1, 1]`` after the
    final step when ``clip``.
    """
    n_samples = check_positive_int(n_samples, "n_samples")
    cond = np.asarray(cond, dtype=np.float64)
    if cond.ndim == 3 and cond.shape[0] != n_samples:
        raise ValueError(f"{cond.shape[0]} conditionals for {n_samples} chains")
    gens = chain_generators(seed, n_samples)
    x = _normals(gens, (n_samples,) + cond.shape[-2:])
    y = np.broadcast_to(cond, x.shape)
    for t in range(schedule.T, 0, -1):
        x = reverse_step(x, y, t, schedule, denoiser, gens)
    return np.clip(x, -1.0, 1.0) if clip else x


def sample(coarse_cond, schedule, denoiser, seed, n_samples, conditioner, normalizer=None):
    """Draw an ensemble of fine grids for one coarse grid.

    Parameters
    ----------
    coarse_cond : GeoGrid
        Coarse map in physical units.
    schedule : NoiseSchedule
    denoiser : callable
        ``eps_hat = denoiser(x_t, y, sqrt_psi)`` on normalized arrays.
    seed : int
        Chain ``i`` uses seed ``seed + i``.
    n_samples : int
    conditioner : transformer
        Object with ``transform(GeoGrid) -> GeoGrid`` producing the fine
        conditional (e.g. a ``KrigingDownscaler``); applied once.
    normalizer : Normalizer, optional
        Maps physical values to ``[-1, 1]``; outputs are mapped back.

    Returns
    -------
    list of GeoGrid
    """
    if not isinstance(coarse_cond, GeoGrid):
        raise TypeError("coarse_cond must be a GeoGrid")
    coarse = normalizer.normalize_grid(coarse_cond) if normalizer is not None else coarse_cond
    y = conditioner.transform(coarse)
    xs = run_chains(y.values, schedule, denoiser, seed, n_samples)
    out = []
    for x in xs:
        if normalizer is not None:
            x = normalizer.denormalize(x)
        out.append(y.with_values(x))
    return out
