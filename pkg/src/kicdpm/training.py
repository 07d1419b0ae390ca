"""Training objective (noise-prediction loss plus a variogram penalty) and the Adam loop."""

import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import denoiser as dn
from .diffusion import estimate_x0, forward_sample, make_schedule, sample_psi
from .grid import GeoGrid, fit_normalizer
from .kriging import make_conditioner
from .synthetic import derive_seed
from .validation import as_generator, check_finite_real, check_positive_int

log = logging.getLogger(__name__)

DEFAULT_LAGS = (1, 2, 4, 8)
RV_TARGETS = ("xhat0", "xt", "none")
RV_WEIGHTS = ("flat", "snr")
CONDITIONERS = ("ukrig", "bicubic", "catmull-rom")


class TrainingError(RuntimeError):
    """Raised when the loss becomes non-finite."""


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


@dataclass
class TrainConfig:
    """Hyperparameters of a training run.

    ``rv_target`` selects where the variogram penalty is measured:
    ``"xhat0"`` (the denoiser's implied clean field, so the penalty has a
    gradient), ``"xt"`` (the noisy input, penalty reported but gradient
    zero) or ``"none"`` (penalty never computed).

    ``rv_weight="snr"`` multiplies each item's penalty by ``psi^2``. The
    x0 estimate carries the noise-prediction error scaled by
    ``sqrt((1 - psi) / psi)``, so the unweighted penalty grows like
    ``psi^-2`` at high noise; with the default 1000-step schedule that
    factor reaches about 1e9 and swamps the noise-prediction loss.
    """

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lambda_v: float = 0.1
    lags: tuple = DEFAULT_LAGS
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss_norm: int = 2
    rv_target: str = "xhat0"
    rv_weight: str = "flat"
    width: int = 16
    factor: int = 4
    conditioner: str = "ukrig"

    def __post_init__(self):
        check_positive_int(self.T, "T")
        self.beta_start = check_finite_real(self.beta_start, "beta_start", low=0.0,
                                            low_inclusive=False)
        self.beta_end = check_finite_real(self.beta_end, "beta_end", high=1.0)
        if not self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        self.lambda_v = check_finite_real(self.lambda_v, "lambda_v", low=0.0)
        self.lags = tuple(check_positive_int(h, "lag") for h in self.lags)
        if self.lambda_v > 0 and self.rv_target != "none" and not self.lags:
            raise ConfigError("lags must be non-empty when lambda_v > 0")
        check_positive_int(self.epochs, "epochs", minimum=0)
        check_positive_int(self.batch_size, "batch_size")
        self.learning_rate = check_finite_real(self.learning_rate, "learning_rate", low=0.0,
                                               low_inclusive=False)
        for name in ("adam_beta1", "adam_beta2"):
            v = check_finite_real(getattr(self, name), name, low=0.0)
            if v >= 1.0:
                raise ConfigError(f"{name} must be < 1")
            setattr(self, name, v)
        self.adam_eps = check_finite_real(self.adam_eps, "adam_eps", low=0.0, low_inclusive=False)
        if self.loss_norm not in (1, 2):
            raise ConfigError(f"loss_norm must be 1 or 2, got {self.loss_norm}")
        if self.rv_target not in RV_TARGETS:
            raise ConfigError(f"rv_target must be one of {RV_TARGETS}, got {self.rv_target!r}")
        if self.rv_weight not in RV_WEIGHTS:
            raise ConfigError(f"rv_weight must be one of {RV_WEIGHTS}, got {self.rv_weight!r}")
        check_positive_int(self.width, "width", minimum=2)
        check_positive_int(self.factor, "factor")
        if self.conditioner not in CONDITIONERS:
            raise ConfigError(
                f"conditioner must be one of {', '.join(CONDITIONERS)}, got {self.conditioner!r}")

    def schedule(self):
        return make_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string (or typed) values; unknown keys raise :class:`ConfigError`."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, types[key], raw)
        return cls(**kwargs)


def _coerce(key, typ, raw):
    if not isinstance(raw, str):
        return tuple(raw) if typ == "tuple" or typ is tuple else raw
    text = raw.strip()
    try:
        if typ in (int, "int"):
            return int(text)
        if typ in (float, "float"):
            return float(text)
        if typ in (tuple, "tuple"):
            return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def parse_config_text(text, source="<config>"):
    """Parse flat ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        if key in out:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


# ------------------------------------------------------------------- losses

def loss_vlb(eps_true, eps_pred, p=2):
    """Mean over cells of ``|eps - eps_hat|^p``."""
    eps_true = np.asarray(eps_true, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if eps_true.shape != eps_pred.shape:
        raise ValueError("eps_true and eps_pred shapes differ")
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    d = np.abs(eps_true - eps_pred)
    return float(np.mean(d * d if p == 2 else d))


def _loss_vlb_grad(eps_true, eps_pred, p):
    d = eps_pred - eps_true
    if p == 2:
        return 2.0 * d / d.size
    return np.sign(d) / d.size


def effective_lags(lags, shape):
    """Lags with at least one axis-aligned pair on a grid of ``shape``."""
    return tuple(h for h in lags if h < max(shape[-2], shape[-1]))


def axis_variogram(x, lag):
    """Semivariance over all row and column pairs exactly ``lag`` apart."""
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape
    sq, n = 0.0, 0
    if lag < W:
        d = x[:, lag:] - x[:, :-lag]
        sq += np.sum(d * d)
        n += d.size
    if lag < H:
        d = x[lag:, :] - x[:-lag, :]
        sq += np.sum(d * d)
        n += d.size
    if n == 0:
        raise ValueError(f"lag {lag} has no pairs on a {H}x{W} grid")
    return sq / (2.0 * n)


def _axis_variogram_grad(x, lag):
    H, W = x.shape
    g = np.zeros_like(x)
    n = (H * (W - lag) if lag < W else 0) + ((H - lag) * W if lag < H else 0)
    if lag < W:
        d = (x[:, lag:] - x[:, :-lag]) / n
        g[:, lag:] += d
        g[:, :-lag] -= d
    if lag < H:
        d = (x[lag:, :] - x[:-lag, :]) / n
        g[lag:, :] += d
        g[:-lag, :] -= d
    return g


def variogram_reg(generated, observed, lags=DEFAULT_LAGS):
    """Mean over ``lags`` of the squared difference of axis-aligned semivariances."""
    generated = np.asarray(generated, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if generated.shape != observed.shape or generated.ndim != 2:
        raise ValueError("generated and observed must be same-shape 2-D fields")
    lags = tuple(lags)
    if not lags:
        raise ValueError("lag set is empty")
    diffs = [axis_variogram(generated, h) - axis_variogram(observed, h) for h in lags]
    return float(np.mean(np.square(diffs)))


def variogram_reg_grad(generated, observed, lags=DEFAULT_LAGS):
    """Gradient of :func:`variogram_reg` with respect to ``generated``."""
    generated = np.asarray(generated, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    lags = tuple(lags)
    g = np.zeros_like(generated)
    for h in lags:
        diff = axis_variogram(generated, h) - axis_variogram(observed, h)
        g += 2.0 * diff * _axis_variogram_grad(generated, h)
    return g / len(lags)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    vlb: float
    rv: float


@dataclass(frozen=True)
class NoisyBatch:
    """Everything random about one step, drawn before the loss is evaluated."""

    x0: np.ndarray
    cond: np.ndarray
    psi: np.ndarray
    t: np.ndarray
    eps: np.ndarray

    @property
    def xt(self):
        return forward_sample(self.x0, self.psi, self.eps)


def draw_noise(x0, cond, schedule, rng):
    """Per item: ``t`` and ``psi`` from the noise-level law, then ``eps``."""
    rng = as_generator(rng)
    x0 = np.asarray(x0, dtype=np.float64)
    B = x0.shape[0]
    psi, ts, eps = np.empty(B), np.empty(B, dtype=np.int64), np.empty_like(x0)
    for b in range(B):
        psi[b], ts[b] = sample_psi(schedule, rng)
        eps[b] = rng.standard_normal(x0.shape[1:])
    return NoisyBatch(x0, np.asarray(cond, dtype=np.float64), psi, ts, eps)


def objective(params, batch, config, with_grad=True):
    """Augmented loss on a pre-drawn batch and, optionally, its parameter gradient.

    Returns ``(LossBreakdown, GradientBuffers or None)``. The total is
    ``vlb + lambda_v * rv`` with ``rv`` the batch mean of per-item penalties
    (each scaled by ``psi^2`` when ``rv_weight == "snr"``).
    """
    xt = batch.xt
    eps_hat, acts = dn.forward(params, xt, batch.cond, np.sqrt(batch.psi), record=True)
    vlb = loss_vlb(batch.eps, eps_hat, config.loss_norm)
    rv = 0.0
    lags = effective_lags(config.lags, xt.shape)
    weight = batch.psi ** 2 if config.rv_weight == "snr" else np.ones_like(batch.psi)
    if config.rv_target == "xhat0":
        x0_hat = estimate_x0(xt, eps_hat, batch.psi)
        rv = float(np.mean([weight[b] * variogram_reg(x0_hat[b], batch.x0[b], lags)
                            for b in range(xt.shape[0])]))
    elif config.rv_target == "xt":
        rv = float(np.mean([weight[b] * variogram_reg(xt[b], batch.x0[b], lags)
                            for b in range(xt.shape[0])]))
    total = vlb + config.lambda_v * rv
    if not np.isfinite(total):
        raise TrainingError(
            f"non-finite loss (vlb={vlb}, rv={rv}); noise levels {batch.psi.tolist()}")
    breakdown = LossBreakdown(total, vlb, rv)
    if not with_grad:
        return breakdown, None
    upstream = _loss_vlb_grad(batch.eps, eps_hat, config.loss_norm)
    if config.rv_target == "xhat0" and config.lambda_v > 0:
        B = xt.shape[0]
        scale = -weight * np.sqrt(1.0 - batch.psi) / np.sqrt(batch.psi)
        for b in range(B):
            g = variogram_reg_grad(x0_hat[b], batch.x0[b], lags)
            upstream[b] += (config.lambda_v / B) * scale[b] * g
    return breakdown, dn.backward(params, acts, upstream)


class Adam:
    """Adam with bias correction over a :class:`DenoiserParams` pytree."""

    def __init__(self, width, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = dn.GradientBuffers(width)
        self.v = dn.GradientBuffers(width)
        self.step_count = 0

    def update(self, params, grads):
        """Return new parameters; ``params`` is not modified."""
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        new = {}
        for name, g in grads.items():
            m = self.m.tensors[name]
            v = self.v.tensors[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            new[name] = params[name] - self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return dn.DenoiserParams(params.width, new)


def make_optimizer(config):
    return Adam(config.width, config.learning_rate, config.adam_beta1, config.adam_beta2,
                config.adam_eps)


def train_step(params, batch, schedule, config, rng, optimizer):
    """One optimization step on ``batch = (x0, cond)`` arrays of shape ``(B, H, W)``.

    Returns ``(LossBreakdown, new_params)``.
    """
    x0, cond = batch
    noisy = draw_noise(x0, cond, schedule, rng)
    breakdown, grads = objective(params, noisy, config)
    return breakdown, optimizer.update(params, grads)


@dataclass
class TrainReport:
    """Per-epoch means of the loss terms, wall times and checkpoint location."""

    loss: list = field(default_factory=list)
    vlb: list = field(default_factory=list)
    rv: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    checkpoint: str = None

    def to_csv(self):
        rows = ["epoch,loss,vlb,rv,seconds"]
        for i, (a, b, c, s) in enumerate(zip(self.loss, self.vlb, self.rv, self.seconds), 1):
            rows.append(f"{i},{a!r},{b!r},{c!r},{s:.3f}")
        return "\n".join(rows) + "\n"


def checkpoint_metadata(config, normalizer):
    meta = {k: v for k, v in config.to_dict().items()}
    meta["lags"] = ",".join(str(h) for h in config.lags)
    meta["v_min"] = float(normalizer.v_min)
    meta["v_max"] = float(normalizer.v_max)
    return meta


def prepare_dataset(pairs, config, normalizer=None):
    """Normalize pairs and compute each conditional once.

    Returns ``(x0, cond, normalizer)`` with arrays of shape ``(N, H, W)``.
    Fine grids must be fully observed.
    """
    if not pairs:
        raise ValueError("training needs at least one (coarse, fine) pair")
    if normalizer is None:
        normalizer = fit_normalizer([g for pair in pairs for g in pair])
    conditioner = make_conditioner(config.conditioner, config.factor)
    x0, cond = [], []
    for coarse, fine in pairs:
        if not isinstance(fine, GeoGrid) or not isinstance(coarse, GeoGrid):
            raise TypeError("pairs must hold GeoGrid objects")
        if not fine.fully_observed:
            raise ValueError("fine training grids must be fully observed")
        if fine.shape != (coarse.n_rows * config.factor, coarse.n_cols * config.factor):
            raise ValueError(f"fine shape {fine.shape} does not match coarse {coarse.shape} "
                             f"at factor {config.factor}")
        x0.append(normalizer.normalize(fine.values))
        cond.append(conditioner.transform(normalizer.normalize_grid(coarse)).values)
    return np.stack(x0), np.stack(cond), normalizer


def train(pairs, config, checkpoint_dir=None, normalizer=None, params=None, progress=None):
    """Fit the denoiser on ``(coarse, fine)`` pairs.

    Seeds: parameters from ``derive_seed(seed, 0)``, shuffling from
    ``derive_seed(seed, 1)``, noise draws from ``derive_seed(seed, 2)``.
    When ``checkpoint_dir`` is given, ``epoch_XXXX.ckpt`` is written after
    every epoch and the final weights go to ``model.ckpt``.

    Returns ``(params, TrainReport, normalizer)``.
    """
    x0, cond, normalizer = prepare_dataset(pairs, config, normalizer)
    schedule = config.schedule()
    if params is None:
        params = dn.init_params(config.width, derive_seed(config.seed, 0))
    shuffle_rng = as_generator(derive_seed(config.seed, 1))
    noise_rng = as_generator(derive_seed(config.seed, 2))
    optimizer = make_optimizer(config)
    report = TrainReport()
    meta = checkpoint_metadata(config, normalizer)
    n = x0.shape[0]
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(n)
        sums, weight = np.zeros(3), 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            bd, params = train_step(params, (x0[idx], cond[idx]), schedule, config,
                                    noise_rng, optimizer)
            sums += len(idx) * np.array([bd.total, bd.vlb, bd.rv])
            weight += len(idx)
        means = sums / weight
        report.loss.append(float(means[0]))
        report.vlb.append(float(means[1]))
        report.rv.append(float(means[2]))
        report.seconds.append(time.perf_counter() - start)
        log.info("epoch %d loss %.5f vlb %.5f rv %.5f", epoch, *means)
        if progress is not None:
            progress(epoch, report)
        if checkpoint_dir is not None:
            dn.save_checkpoint(params, os.path.join(checkpoint_dir, f"epoch_{epoch:04d}.ckpt"),
                               meta)
    if checkpoint_dir is not None:
        report.checkpoint = dn.save_checkpoint(
            params, os.path.join(checkpoint_dir, "model.ckpt"), meta)
    return params, report, normalizer
