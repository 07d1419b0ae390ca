"""Kriging-conditioned diffusion downscaling of gridded fields.

The modules cover raster I/O (:mod:`~kicdpm.grid`), Matern variograms
(:mod:`~kicdpm.variogram`), universal kriging (:mod:`~kicdpm.kriging`),
Gaussian random fields (:mod:`~kicdpm.synthetic`), the diffusion process
(:mod:`~kicdpm.diffusion`), the noise predictor (:mod:`~kicdpm.denoiser`),
training (:mod:`~kicdpm.training`), verification scores
(:mod:`~kicdpm.metrics`) and the command line (:mod:`~kicdpm.cli`).
"""

__version__ = "0.1.0"

from .grid import GeoGrid, MinMaxNormalizer, Normalizer, coarsen, load_grid, save_grid  # noqa: E402
from .kriging import BicubicDownscaler, KrigingDownscaler, UniversalKriging  # noqa: E402
from .metrics import Ensemble, crps_ensemble, mae, pcc, rmse  # noqa: E402
from .model import KiCDPM  # noqa: E402
from .variogram import MaternModel, MaternVariogram  # noqa: E402

__all__ = [
    "GeoGrid", "MinMaxNormalizer", "Normalizer", "coarsen", "load_grid", "save_grid",
    "BicubicDownscaler", "KrigingDownscaler", "UniversalKriging",
    "Ensemble", "crps_ensemble", "mae", "pcc", "rmse",
    "KiCDPM", "MaternModel", "MaternVariogram", "__version__",
]
