import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from kicdpm import KiCDPM
from kicdpm.metrics import Ensemble
from kicdpm.synthetic import make_dataset
from kicdpm.variogram import MaternModel


def tiny(**kw):
    base = dict(T=10, width=4, epochs=1, batch_size=2, factor=2, lags=(1, 2), n_samples=2)
    base.update(kw)
    return KiCDPM(**base)


@pytest.fixture(scope="module")
def data():
    pairs = make_dataset(4, 16, 2, MaternModel(0.5, 4.0, 1.0, 0.0), seed=2)
    return [c for c, _ in pairs], [f for _, f in pairs]


def test_params_and_clone():
    est = tiny(lambda_v=0.0, conditioner="bicubic")
    assert clone(est).get_params() == est.get_params()
    cfg = est.train_config()
    assert cfg.lambda_v == 0.0 and cfg.conditioner == "bicubic" and cfg.T == 10


def test_unfitted_raises(data):
    with pytest.raises(NotFittedError):
        tiny().sample(data[0][0])


def test_fit_sample_predict(data, tmp_path):
    X, y = data
    est = tiny().fit(X, y, checkpoint_dir=tmp_path)
    ens = est.sample(X[0], seed=5)
    assert isinstance(ens, Ensemble) and len(ens) == 2 and ens.shape == (16, 16)
    again = est.sample(X[0], seed=5)
    assert all(a == b for a, b in zip(ens.members, again.members))
    both = est.sample(X[:2], seed=5)
    assert [m == n for m, n in zip(both[0].members, ens.members)] == [True, True]
    pred = est.predict(X[0], seed=5)
    np.testing.assert_allclose(pred.values, ens.mean().values)
    lo, hi = est.normalizer_.v_min, est.normalizer_.v_max
    assert np.all((pred.values >= lo - 1e-12) & (pred.values <= hi + 1e-12))
    assert len(est.report_.loss) == 1


def test_checkpoint_round_trip(data, tmp_path):
    X, y = data
    est = tiny(lambda_v=0.3).fit(X, y)
    path = est.save(tmp_path / "m.ckpt")
    back = KiCDPM.from_checkpoint(path, n_samples=3)
    assert back.params_ == est.params_ and back.lambda_v == 0.3 and back.n_samples == 3
    assert back.normalizer_ == est.normalizer_
    a, b = est.sample(X[1], n_samples=2, seed=1), back.sample(X[1], n_samples=2, seed=1)
    assert all(m == n for m, n in zip(a.members, b.members))


def test_length_mismatch(data):
    with pytest.raises(ValueError, match="coarse grids"):
        tiny().fit(data[0][:2], data[1][:3])
