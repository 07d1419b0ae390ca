"""Estimator front end tying conditioning, training and sampling together."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import denoiser as dn
from .diffusion import run_chains
from .grid import GeoGrid, Normalizer
from .kriging import make_conditioner
from .metrics import Ensemble
from .training import TrainConfig, checkpoint_metadata, train


class KiCDPM(BaseEstimator):
    """Kriging-conditioned diffusion downscaler.

    ``fit(X, y)`` takes coarse grids ``X`` and matching fine grids ``y``;
    ``sample`` draws ensembles and ``predict`` returns ensemble means.
    Every constructor argument except ``n_samples`` and ``sample_seed`` is a
    :class:`~kicdpm.training.TrainConfig` field.
    """

    def __init__(self, factor=4, T=1000, beta_start=1e-4, beta_end=0.02, width=16,
                 lambda_v=0.1, lags=(1, 2, 4, 8), epochs=30, batch_size=8,
                 learning_rate=1e-3, adam_beta1=0.9, adam_beta2=0.999, adam_eps=1e-8,
                 seed=0, loss_norm=2, rv_target="xhat0", rv_weight="flat", conditioner="ukrig",
                 n_samples=8, sample_seed=0):
        self.factor = factor
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.width = width
        self.lambda_v = lambda_v
        self.lags = lags
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.adam_eps = adam_eps
        self.seed = seed
        self.loss_norm = loss_norm
        self.rv_target = rv_target
        self.rv_weight = rv_weight
        self.conditioner = conditioner
        self.n_samples = n_samples
        self.sample_seed = sample_seed

    def train_config(self):
        names = TrainConfig.__dataclass_fields__
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X, y, checkpoint_dir=None):
        if len(X) != len(y):
            raise ValueError(f"{len(X)} coarse grids but {len(y)} fine grids")
        config = self.train_config()
        self.params_, self.report_, self.normalizer_ = train(
            list(zip(X, y)), config, checkpoint_dir=checkpoint_dir)
        self.schedule_ = config.schedule()
        return self

    @classmethod
    def from_checkpoint(cls, path, **overrides):
        """Rebuild a fitted estimator from a checkpoint written by training."""
        params, meta = dn.load_checkpoint(path)
        config = TrainConfig.from_mapping(
            {k: v for k, v in meta.items() if k in TrainConfig.__dataclass_fields__})
        est = cls(**{**config.to_dict(), **overrides})
        est.params_ = params
        est.normalizer_ = Normalizer(float(meta["v_min"]), float(meta["v_max"]))
        est.schedule_ = config.schedule()
        est.report_ = None
        return est

    def save(self, path):
        check_is_fitted(self, "params_")
        return dn.save_checkpoint(self.params_, path,
                                  checkpoint_metadata(self.train_config(), self.normalizer_))

    def conditional(self, coarse):
        """Normalized fine-resolution conditional for one coarse grid."""
        check_is_fitted(self, "normalizer_")
        cond = make_conditioner(self.conditioner, self.factor)
        return cond.transform(self.normalizer_.normalize_grid(coarse))

    def sample(self, X, n_samples=None, seed=None):
        """Ensemble for each coarse grid; chain ``i`` of input ``k`` uses seed ``seed + k * n + i``."""
        check_is_fitted(self, "params_")
        single = isinstance(X, GeoGrid)
        grids = [X] if single else list(X)
        n = self.n_samples if n_samples is None else n_samples
        seed = self.sample_seed if seed is None else seed
        conds = [self.conditional(g) for g in grids]
        denoiser = dn.ConditionalDenoiser(self.params_)
        stack = np.concatenate([c.values[None].repeat(n, axis=0) for c in conds])
        xs = run_chains(stack, self.schedule_, denoiser, seed, n * len(grids))
        out = []
        for k, c in enumerate(conds):
            members = [c.with_values(self.normalizer_.denormalize(x))
                       for x in xs[k * n:(k + 1) * n]]
            out.append(Ensemble(tuple(members)))
        return out[0] if single else out

    def predict(self, X, n_samples=None, seed=None):
        ens = self.sample(X, n_samples=n_samples, seed=seed)
        if isinstance(ens, Ensemble):
            return ens.mean()
        return [e.mean() for e in ens]

