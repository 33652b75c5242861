"""scikit-learn compatible wrappers around the spectral networks.

The estimators take 2-D arrays of spectra (``n_shots x N``) and compositions
(``n_shots x C``), so they drop into ``Pipeline``/``clone``/``GridSearchCV``::

    pipe = make_pipeline(SpectrumNormalizer("max"), SpectralDenoiser(depth=8, width=16))
    pipe.fit(raw, clean)
    cleaned = pipe.transform(raw_test)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted
from threadpoolctl import threadpool_limits

from ._random import substream
from .evaluate import preproc_errors
from .models import OXIDES, CalibHead, EndToEndNet, NetConfig, PreprocNet
from .spectra import CALIB_BAND_MASK, BandMask
from .train import TrainConfig, fit_calib, fit_e2e, fit_preproc

__all__ = [
    "SpectrumNormalizer",
    "BandMaskFilter",
    "SpectralDenoiser",
    "CompositionRegressor",
    "EndToEndRegressor",
]


def _check_spectra(X, n_features=None, name="X"):
    X = check_array(X, dtype=[np.float64, np.float32], ensure_min_samples=1)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"{name} has {X.shape[1]} bins; estimator was fitted with {n_features}")
    return X


def _thread_limit(n_threads):
    # 0 means sequential, bit-reproducible execution
    return threadpool_limits(limits=1 if not n_threads else n_threads)


class SpectrumNormalizer(TransformerMixin, BaseEstimator):
    """Row-wise normalization: ``"max"`` (peak = 1) or ``"l2"`` (unit norm)."""

    def __init__(self, norm="max"):
        self.norm = norm

    def fit(self, X, y=None):
        if self.norm not in ("max", "l2"):
            raise ValueError(f"norm must be 'max' or 'l2', got {self.norm!r}")
        self.n_features_in_ = _check_spectra(X).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = _check_spectra(X, self.n_features_in_)
        if self.norm == "max":
            scale = X.max(axis=1, keepdims=True)
        else:
            scale = np.linalg.norm(X, axis=1, keepdims=True)
        if np.any(scale <= 0):
            raise ValueError("degenerate spectrum: non-positive max or zero norm")
        return X / scale


class BandMaskFilter(TransformerMixin, BaseEstimator):
    """Drop the columns whose wavelength lies in an excluded band."""

    def __init__(self, wavelengths=None, mask=CALIB_BAND_MASK):
        self.wavelengths = wavelengths
        self.mask = mask

    def fit(self, X, y=None):
        X = _check_spectra(X)
        wl = np.asarray(self.wavelengths, dtype=np.float64)
        if wl.shape != (X.shape[1],):
            raise ValueError("wavelengths must have one entry per column of X")
        mask = self.mask if isinstance(self.mask, BandMask) else BandMask(self.mask)
        self.keep_ = mask.keep(wl)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        return _check_spectra(X, self.n_features_in_)[:, self.keep_]

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self)
        wl = np.asarray(self.wavelengths)[self.keep_]
        return np.array([f"{w:.3f}nm" for w in wl], dtype=object)


class _NetEstimator(BaseEstimator):
    def __init__(self, depth=20, width=64, kernel_size=3, batch_size=16, epochs=20,
                 learning_rate=1e-3, precision="double", shuffle=True,
                 random_state=0, n_threads=0):
        self.depth = depth
        self.width = width
        self.kernel_size = kernel_size
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.precision = precision
        self.shuffle = shuffle
        self.random_state = random_state
        self.n_threads = n_threads

    def _train_config(self):
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs,
                           lr=self.learning_rate, seed=self.random_state,
                           shuffle=self.shuffle, precision=self.precision)

    def _init_rng(self):
        return substream(self.random_state, "init")

    def _finish(self, result, n_features):
        self.net_ = result.net
        self.loss_curve_ = result.losses("train").tolist()
        self.n_features_in_ = n_features
        return self

    @classmethod
    def from_net(cls, net, **params):
        """Wrap an already-trained network (e.g. one read with ``load_model``)."""
        est = cls(depth=net.config.depth, width=net.config.width,
                  kernel_size=net.config.kernel_size, **params)
        est.net_ = net.eval()
        est.config_ = net.config
        est.n_features_in_ = net.config.input_length
        est.loss_curve_ = []
        return est

    def _batched(self, fn, X, batch_size=256):
        with _thread_limit(self.n_threads):
            return np.concatenate([fn(X[i:i + batch_size]) for i in range(0, len(X), batch_size)])


class SpectralDenoiser(TransformerMixin, _NetEstimator):
    """Residual CNN mapping raw spectra to preprocessed spectra.

    ``fit(raw, clean)`` trains on paired spectra; ``transform(raw)`` returns
    ``raw - R(raw)``.
    """

    def fit(self, X, y):
        X = _check_spectra(X)
        y = _check_spectra(y, X.shape[1], "y")
        if len(y) != len(X):
            raise ValueError(f"{len(X)} raw spectra but {len(y)} clean spectra")
        self.config_ = NetConfig(input_length=X.shape[1], depth=self.depth,
                                 width=self.width, kernel_size=self.kernel_size)
        net = PreprocNet(self.config_, self._init_rng())
        with _thread_limit(self.n_threads):
            result = fit_preproc(net, X, y, self._train_config())
        return self._finish(result, X.shape[1])

    def transform(self, X):
        check_is_fitted(self, "net_")
        X = _check_spectra(X, self.n_features_in_)
        self.net_.eval()
        return self._batched(self.net_.denoise, X).astype(np.float64)

    def predict_residual(self, X):
        """The estimated corruption ``R(X)``."""
        check_is_fitted(self, "net_")
        X = _check_spectra(X, self.n_features_in_)
        self.net_.eval()
        return self._batched(lambda b: self.net_.forward(b)[0], X).astype(np.float64)

    def score(self, X, y):
        """Negative mean normalized denoising error (higher is better)."""
        return -float(preproc_errors(self.transform(X), _check_spectra(y)).mean())


class _CompositionEstimator(RegressorMixin, _NetEstimator):
    def __init__(self, depth=20, width=64, kernel_size=3, batch_size=16, epochs=20,
                 learning_rate=1e-3, precision="double", shuffle=True,
                 random_state=0, n_threads=0, element_names=OXIDES,
                 head_channels=4, head_hidden=16, head_segments=64,
                 standardize_targets=True):
        super().__init__(depth=depth, width=width, kernel_size=kernel_size,
                         batch_size=batch_size, epochs=epochs,
                         learning_rate=learning_rate, precision=precision,
                         shuffle=shuffle, random_state=random_state, n_threads=n_threads)
        self.element_names = element_names
        self.head_channels = head_channels
        self.head_hidden = head_hidden
        self.head_segments = head_segments
        self.standardize_targets = standardize_targets

    def _config(self, n_features, n_elements):
        names = tuple(self.element_names)
        if len(names) != n_elements:
            names = tuple(f"E{i}" for i in range(n_elements))
        return NetConfig(input_length=n_features, depth=self.depth, width=self.width,
                         kernel_size=self.kernel_size, num_elements=n_elements,
                         head_channels=self.head_channels, head_hidden=self.head_hidden,
                         head_segments=self.head_segments, element_names=names)

    def _check_fit(self, X, y):
        X = _check_spectra(X)
        y = check_array(y, dtype=np.float64, ensure_2d=False)
        if y.ndim == 1:
            y = y[:, None]
        if len(y) != len(X):
            raise ValueError(f"{len(X)} spectra but {len(y)} compositions")
        return X, y

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = _check_spectra(X, self.n_features_in_)
        self.net_.eval()
        return self._batched(self.net_.forward, X).astype(np.float64)


class CompositionRegressor(_CompositionEstimator):
    """Per-element calibration head trained on preprocessed spectra.

    Only the head hyperparameters matter; ``depth``/``width`` are carried for
    symmetry with the end-to-end model.
    """

    def fit(self, X, y):
        X, y = self._check_fit(X, y)
        self.config_ = self._config(X.shape[1], y.shape[1])
        head = CalibHead(self.config_, self._init_rng())
        with _thread_limit(self.n_threads):
            result = fit_calib(head, X, y, self._train_config(),
                               standardize_targets=self.standardize_targets)
        return self._finish(result, X.shape[1])


class EndToEndRegressor(_CompositionEstimator):
    """Denoiser trunk and calibration head trained jointly on raw spectra."""

    def fit(self, X, y):
        X, y = self._check_fit(X, y)
        self.config_ = self._config(X.shape[1], y.shape[1])
        net = EndToEndNet(self.config_, self._init_rng())
        with _thread_limit(self.n_threads):
            result = fit_e2e(net, X, y, self._train_config(),
                             standardize_targets=self.standardize_targets)
        return self._finish(result, X.shape[1])
