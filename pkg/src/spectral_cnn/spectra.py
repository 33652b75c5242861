"""Spectrum containers, band masking and the two normalization conventions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "DegenerateSpectrumError",
    "WavelengthAxis",
    "Spectrum",
    "BandMask",
    "CALIB_BAND_MASK",
    "normalize_max",
    "normalize_l2",
    "apply_band_mask",
    "l2_distance",
    "default_axis",
]


class DegenerateSpectrumError(ValueError):
    """Raised when a spectrum cannot be normalized (zero max or zero norm)."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class WavelengthAxis:
    """Strictly increasing wavelength grid in nm.

    Gaps between detectors are simply absent wavelengths.  ``detector_boundaries``
    optionally labels index ranges ``(start, stop)`` per detector.
    """

    values: np.ndarray
    detector_boundaries: Optional[tuple] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        if values.size > 1 and not np.all(np.diff(values) > 0):
            raise ValueError("wavelength axis must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("wavelength axis contains non-finite values")
        object.__setattr__(self, "values", _frozen(values))
        if self.detector_boundaries is not None:
            bounds = tuple((int(a), int(b)) for a, b in self.detector_boundaries)
            for a, b in bounds:
                if not 0 <= a <= b <= values.size:
                    raise ValueError(f"detector range {(a, b)} outside axis")
            object.__setattr__(self, "detector_boundaries", bounds)

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, WavelengthAxis):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    __hash__ = None

    @property
    def min(self) -> float:
        return float(self.values[0])

    @property
    def max(self) -> float:
        return float(self.values[-1])


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Intensity vector bound to a :class:`WavelengthAxis`."""

    axis: WavelengthAxis
    intensities: np.ndarray

    def __post_init__(self):
        if not isinstance(self.axis, WavelengthAxis):
            object.__setattr__(self, "axis", WavelengthAxis(self.axis))
        vals = np.array(self.intensities, dtype=np.float64).ravel()
        if vals.size != len(self.axis):
            raise ValueError(
                f"intensities length {vals.size} != axis length {len(self.axis)}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("spectrum contains non-finite values")
        object.__setattr__(self, "intensities", _frozen(vals))

    def __len__(self):
        return self.intensities.size

    def __eq__(self, other):
        if not isinstance(other, Spectrum):
            return NotImplemented
        return self.axis == other.axis and np.array_equal(
            self.intensities, other.intensities)

    __hash__ = None

    @property
    def wavelengths(self) -> np.ndarray:
        return self.axis.values

    def with_intensities(self, intensities) -> "Spectrum":
        return Spectrum(self.axis, intensities)


@dataclass(frozen=True)
class BandMask:
    """Closed wavelength intervals ``[lo, hi]`` to drop from every spectrum."""

    excluded: tuple = field(default_factory=tuple)

    def __post_init__(self):
        intervals = tuple((float(lo), float(hi)) for lo, hi in self.excluded)
        for lo, hi in intervals:
            if lo > hi:
                raise ValueError(f"band interval [{lo}, {hi}] has lo > hi")
        object.__setattr__(self, "excluded", intervals)

    def keep(self, wavelengths: np.ndarray) -> np.ndarray:
        """Boolean mask of bins lying outside every excluded interval."""
        wavelengths = np.asarray(wavelengths, dtype=np.float64)
        keep = np.ones(wavelengths.shape, dtype=bool)
        for lo, hi in self.excluded:
            keep &= ~((wavelengths >= lo) & (wavelengths <= hi))
        return keep


# Bands removed from the laboratory calibration data set.
CALIB_BAND_MASK = BandMask((
    (240.811, 246.635),
    (338.457, 340.797),
    (382.13, 387.859),
    (473.184, 492.427),
    (849.0, 905.574),
))


def normalize_max(s: Spectrum) -> Spectrum:
    """Scale ``s`` so its maximum intensity is exactly one."""
    peak = s.intensities.max() if len(s) else 0.0
    if not peak > 0:
        raise DegenerateSpectrumError("degenerate spectrum: maximum intensity <= 0")
    return s.with_intensities(s.intensities / peak)


def normalize_l2(s: Spectrum) -> Spectrum:
    """Scale ``s`` to unit Euclidean norm."""
    norm = np.linalg.norm(s.intensities)
    if not norm > 0:
        raise DegenerateSpectrumError("degenerate spectrum: zero l2 norm")
    return s.with_intensities(s.intensities / norm)


def apply_band_mask(s: Spectrum, m: BandMask) -> Spectrum:
    """Drop every bin whose wavelength falls inside an excluded interval."""
    keep = m.keep(s.wavelengths)
    if keep.all():
        return s
    bounds = None
    if s.axis.detector_boundaries is not None:
        # re-index detector ranges onto the surviving bins
        cum = np.concatenate([[0], np.cumsum(keep)])
        bounds = tuple((int(cum[a]), int(cum[b])) for a, b in s.axis.detector_boundaries)
    axis = WavelengthAxis(s.wavelengths[keep], bounds)
    return Spectrum(axis, s.intensities[keep])


def l2_distance(a: Spectrum, b: Spectrum) -> float:
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if a.axis != b.axis:
        raise ValueError("spectra are bound to different wavelength axes")
    return float(np.linalg.norm(a.intensities - b.intensities))


# Three spectrometer ranges (UV, VIO, VNIR) with the 340-382 nm gap.
DETECTOR_RANGES_NM = ((240.0, 340.0), (382.0, 469.0), (474.0, 905.0))


def default_axis(n_bins: int = 512,
                 ranges: Sequence[tuple] = DETECTOR_RANGES_NM) -> WavelengthAxis:
    """Concatenated multi-detector axis with ``n_bins`` bins split evenly.

    ``n_bins=512`` is the desk-scale default; ``n_bins=5500`` mimics the
    full-resolution instrument after gap removal.
    """
    n_det = len(ranges)
    if n_bins < n_det * 2:
        raise ValueError(f"need at least {2 * n_det} bins, got {n_bins}")
    sizes = [n_bins // n_det + (1 if i < n_bins % n_det else 0) for i in range(n_det)]
    parts, bounds, start = [], [], 0
    for (lo, hi), size in zip(ranges, sizes):
        parts.append(np.linspace(lo, hi, size))
        bounds.append((start, start + size))
        start += size
    return WavelengthAxis(np.concatenate(parts), tuple(bounds))
