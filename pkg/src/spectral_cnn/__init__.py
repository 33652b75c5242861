"""Spectral convolutional networks for LIBS preprocessing and calibration.

A residual 1-D CNN learns to remove the instrument response, distance
attenuation and background from raw shots; per-element regression branches map
preprocessed (or raw, when trained end-to-end) spectra to oxide compositions.
Everything runs on numpy with hand-written forward/backward passes.
"""

from .dataio import (DatasetManifest, load_manifest, load_model, partition_by_target,
                     partition_random, save_manifest, save_model, stack_spectra)
from .estimators import (BandMaskFilter, CompositionRegressor, EndToEndRegressor,
                         SpectralDenoiser, SpectrumNormalizer)
from .evaluate import calib_report, eval_by_distance, eval_calib_rmse, eval_preproc
from .inference import FrozenDenoiser
from .models import OXIDES, CalibHead, EndToEndNet, NetConfig, PreprocNet
from .records import Composition, ShotRecord
from .simulator import make_dataset, make_shot
from .spectra import Spectrum, WavelengthAxis, default_axis
from .train import TrainConfig, fit_calib, fit_e2e, fit_preproc

__version__ = "0.1.0"

__all__ = [
    "BandMaskFilter", "CalibHead", "Composition", "CompositionRegressor",
    "DatasetManifest", "EndToEndNet", "EndToEndRegressor", "FrozenDenoiser",
    "NetConfig", "OXIDES", "PreprocNet", "ShotRecord", "SpectralDenoiser",
    "Spectrum", "SpectrumNormalizer", "TrainConfig", "WavelengthAxis",
    "calib_report", "default_axis", "eval_by_distance", "eval_calib_rmse",
    "eval_preproc", "fit_calib", "fit_e2e", "fit_preproc", "load_manifest",
    "load_model", "make_dataset", "make_shot", "partition_by_target",
    "partition_random", "save_manifest", "save_model", "stack_spectra",
]
