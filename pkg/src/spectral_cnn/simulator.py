"""Synthetic LIBS shots: clean line spectra plus additive and multiplicative effects.

A clean spectrum ``x`` is a composition-weighted sum of height-normalized
Gaussian emission lines.  A raw shot is

    y = (irf * x) / d**2 + z,   z = dark + continuum(lambda) + white noise

Level-1a labels remove only ``z``; level-1b labels also undo the instrument
response and the range attenuation.  Both raw and clean are then normalized.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._random import substream
from .models import OXIDES
from .records import Composition, ShotRecord
from .spectra import (Spectrum, WavelengthAxis, default_axis, normalize_l2,
                      normalize_max)

__all__ = [
    "EmissionLineDB",
    "AcquisitionParams",
    "default_line_db",
    "default_irf",
    "synth_clean",
    "synth_noise",
    "apply_irf",
    "apply_distance",
    "make_shot",
    "dirichlet_composition_sampler",
    "default_param_sampler",
    "make_dataset",
]

LEVELS = ("1a", "1b")
NORMALIZATIONS = ("max", "l2", "none")


class EmissionLineDB:
    """Per-element lists of ``(center_nm, width_nm, relative_strength)`` lines."""

    def __init__(self, lines: Dict[str, Sequence[Tuple[float, float, float]]]):
        self.lines: Dict[str, np.ndarray] = {}
        for element, rows in lines.items():
            arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
            if np.any(arr[:, 1] <= 0) or np.any(arr[:, 2] <= 0):
                raise ValueError(f"{element}: line widths and strengths must be > 0")
            self.lines[element] = arr

    @property
    def elements(self) -> Tuple[str, ...]:
        return tuple(self.lines)

    def __contains__(self, element):
        return element in self.lines

    def validate_axis(self, axis: WavelengthAxis) -> None:
        for element, arr in self.lines.items():
            out = (arr[:, 0] < axis.min) | (arr[:, 0] > axis.max)
            if out.any():
                raise ValueError(
                    f"{element}: line centers {arr[out, 0].tolist()} outside "
                    f"axis range [{axis.min}, {axis.max}]")

    def element_spectrum(self, element: str, wavelengths: np.ndarray) -> np.ndarray:
        """Spectrum of ``element`` at 100 wt.% (unit-height Gaussian per line)."""
        arr = self.lines[element]
        lam = np.asarray(wavelengths, dtype=np.float64)[:, None]
        centers, widths, strengths = arr[:, 0], arr[:, 1], arr[:, 2]
        return (strengths * np.exp(-0.5 * ((lam - centers) / widths) ** 2)).sum(axis=1)

    @classmethod
    def from_csv(cls, path_or_buffer) -> "EmissionLineDB":
        if hasattr(path_or_buffer, "read"):
            return cls._parse(path_or_buffer, str(path_or_buffer))
        with open(path_or_buffer, newline="", encoding="utf-8") as fh:
            return cls._parse(fh, str(path_or_buffer))

    @classmethod
    def _parse(cls, fh, source) -> "EmissionLineDB":
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["element", "center_nm", "width_nm", "strength"]
        if header is None or [h.strip() for h in header] != expected:
            raise ValueError(f"{source}: header must be {','.join(expected)}")
        lines: Dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{source}:{lineno}: expected 4 columns, got {len(row)}")
            try:
                vals = tuple(float(v) for v in row[1:])
            except ValueError as exc:
                raise ValueError(f"{source}:{lineno}: {exc}") from None
            lines.setdefault(row[0].strip(), []).append(vals)
        return cls(lines)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["element", "center_nm", "width_nm", "strength"])
            for element, arr in self.lines.items():
                for c, wd, s in arr.tolist():
                    w.writerow([element, repr(c), repr(wd), repr(s)])


def default_line_db() -> EmissionLineDB:
    """Bundled synthetic line table for the eight major oxides."""
    text = resources.files("spectral_cnn").joinpath("data/emission_lines.csv").read_text(
        encoding="utf-8")
    return EmissionLineDB._parse(io.StringIO(text), "emission_lines.csv")


@dataclass(frozen=True, eq=False)
class AcquisitionParams:
    irf: np.ndarray
    dark_level: float = 0.0
    continuum_amplitude: float = 0.0
    continuum_decay_nm: float = 100.0
    noise_sigma: float = 0.0
    distance_m: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        irf = np.array(self.irf, dtype=np.float64).ravel()
        if not np.all(irf > 0):
            raise ValueError("instrument response must be strictly positive")
        irf.setflags(write=False)
        object.__setattr__(self, "irf", irf)
        for name in ("dark_level", "continuum_amplitude", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.continuum_decay_nm > 0:
            raise ValueError("continuum_decay_nm must be positive")
        if not 1.0 <= self.distance_m <= 7.0:
            raise ValueError(f"distance_m must lie in [1, 7], got {self.distance_m}")


def default_irf(axis: WavelengthAxis, depth: float = 0.1) -> np.ndarray:
    """Smooth per-detector gain curve within ``1 +- depth``.

    Each detector segment gets a different low-order shape so the response
    is not a global scale factor.
    """
    lam = axis.values
    bounds = axis.detector_boundaries or ((0, len(axis)),)
    irf = np.ones(len(axis))
    for k, (a, b) in enumerate(bounds):
        if b - a < 2:
            continue
        t = np.linspace(-1.0, 1.0, b - a)
        shape = (1 - 2 * t ** 2, t, np.sin(np.pi * t))[k % 3]
        irf[a:b] = 1.0 + depth * shape
    if not np.all(irf > 0):
        raise ValueError("depth too large: response not positive")
    return irf


def synth_clean(c: Composition, db: EmissionLineDB, axis: WavelengthAxis) -> Spectrum:
    missing = [e for e in c.element_names if e not in db]
    if missing:
        raise KeyError(f"elements {missing} missing from emission line database")
    out = np.zeros(len(axis))
    for element, pct in zip(c.element_names, c.oxide_wt_pct):
        if pct:
            out += (pct / 100.0) * db.element_spectrum(element, axis.values)
    return Spectrum(axis, out)


def synth_noise(p: AcquisitionParams, axis: WavelengthAxis,
                rng: Optional[np.random.Generator] = None) -> Spectrum:
    """Dark offset + exponentially decaying continuum + white Gaussian noise."""
    rng = np.random.default_rng(p.rng_seed) if rng is None else rng
    lam = axis.values
    z = np.full(len(axis), float(p.dark_level))
    if p.continuum_amplitude:
        z += p.continuum_amplitude * np.exp(-(lam - axis.min) / p.continuum_decay_nm)
    if p.noise_sigma:
        z += rng.normal(0.0, p.noise_sigma, size=len(axis))
    return Spectrum(axis, z)


def apply_irf(s: Spectrum, p: AcquisitionParams) -> Spectrum:
    if p.irf.size != len(s):
        raise ValueError(f"irf length {p.irf.size} != spectrum length {len(s)}")
    return s.with_intensities(s.intensities * p.irf)


def apply_distance(s: Spectrum, d: float) -> Spectrum:
    """Inverse-square range attenuation."""
    if not d > 0:
        raise ValueError(f"distance must be > 0, got {d}")
    return s.with_intensities(s.intensities / (d * d))


def _normalize(s: Spectrum, normalization: str) -> Spectrum:
    if normalization == "max":
        return normalize_max(s)
    if normalization == "l2":
        return normalize_l2(s)
    if normalization == "none":
        return s
    raise ValueError(f"normalization must be one of {NORMALIZATIONS}")


def _shot_spectra(c, p, db, axis):
    x = synth_clean(c, db, axis)
    attenuated = apply_distance(apply_irf(x, p), p.distance_m)
    z = synth_noise(p, axis)
    raw = Spectrum(axis, attenuated.intensities + z.intensities)
    return x, attenuated, raw


def make_shot(c: Composition, p: AcquisitionParams, db: EmissionLineDB,
              axis: WavelengthAxis, level: str = "1b", normalization: str = "max"):
    """Return ``(raw, clean, c)`` for one shot at the given preprocessing level."""
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}, got {level!r}")
    x, attenuated, raw = _shot_spectra(c, p, db, axis)
    clean = attenuated if level == "1a" else x
    return _normalize(raw, normalization), _normalize(clean, normalization), c


# Typical major-oxide fractions of a basaltic rock; the remainder is "other".
_OXIDE_MEANS = {"SiO2": 0.50, "TiO2": 0.012, "Al2O3": 0.14, "FeOT": 0.11,
                "MgO": 0.07, "CaO": 0.075, "Na2O": 0.03, "K2O": 0.015}


def dirichlet_composition_sampler(concentration: float = 30.0,
                                  means: Optional[Dict[str, float]] = None):
    """Sampler drawing oxide fractions from a Dirichlet with an "other" slot.

    The extra slot absorbs the remainder so oxide totals stay below 100 wt.%.
    Unknown elements get an equal share of 0.9 / C.
    """
    def sample(rng: np.random.Generator, element_names: Sequence[str]) -> Composition:
        table = _OXIDE_MEANS if means is None else means
        names = tuple(element_names)
        mu = np.array([table.get(n, 0.9 / len(names)) for n in names])
        other = max(1.0 - mu.sum(), 0.02)
        alpha = concentration * np.append(mu, other) / (mu.sum() + other)
        frac = rng.dirichlet(alpha)[:-1]
        return Composition(100.0 * frac, names)

    return sample


def default_param_sampler(rng: np.random.Generator, axis: WavelengthAxis,
                          distance_range=(1.0, 7.0)) -> AcquisitionParams:
    """Acquisition conditions for one shot.

    The plasma continuum is emitted alongside the lines, so it is attenuated by
    range like the signal; dark current and read noise are detector properties
    and are not.
    """
    d = float(rng.uniform(*distance_range))
    return AcquisitionParams(
        irf=default_irf(axis),
        dark_level=float(rng.uniform(0.0, 0.004)),
        continuum_amplitude=float(rng.uniform(0.1, 0.5)) / (d * d),
        continuum_decay_nm=float(rng.uniform(80.0, 300.0)),
        noise_sigma=float(rng.uniform(5e-5, 2e-4)),
        distance_m=d,
        rng_seed=int(rng.integers(0, 2 ** 63 - 1)),
    )


def make_dataset(n_shots: int,
                 composition_sampler: Optional[Callable] = None,
                 param_sampler: Optional[Callable] = None,
                 db: Optional[EmissionLineDB] = None,
                 axis: Optional[WavelengthAxis] = None,
                 level: str = "both",
                 seed: int = 0,
                 normalization: str = "max",
                 shots_per_target: int = 1,
                 element_names: Sequence[str] = OXIDES) -> List[ShotRecord]:
    """Generate ``n_shots`` labeled shots, reproducible under ``seed``.

    Shots are grouped into targets of ``shots_per_target`` shots sharing one
    composition.  Every shot draws from its own ``(seed, index)`` substream, so
    the result does not depend on generation order.  ``level`` selects which
    clean labels are stored: ``"1a"``, ``"1b"`` or ``"both"``.
    """
    if n_shots <= 0:
        raise ValueError("empty dataset: n_shots must be positive")
    if level not in LEVELS + ("both",):
        raise ValueError(f"level must be '1a', '1b' or 'both', got {level!r}")
    if shots_per_target < 1:
        raise ValueError("shots_per_target must be >= 1")
    db = default_line_db() if db is None else db
    axis = default_axis() if axis is None else axis
    db.validate_axis(axis)
    composition_sampler = composition_sampler or dirichlet_composition_sampler()
    param_sampler = param_sampler or default_param_sampler

    records = []
    comp = None
    for i in range(n_shots):
        target = i // shots_per_target
        if i % shots_per_target == 0:
            comp = composition_sampler(substream(seed, "composition", target), element_names)
        p = param_sampler(substream(seed, "acquisition", i), axis)
        x, attenuated, raw = _shot_spectra(comp, p, db, axis)
        clean_1a = _normalize(attenuated, normalization) if level in ("1a", "both") else None
        clean_1b = _normalize(x, normalization) if level in ("1b", "both") else None
        records.append(ShotRecord(
            shot_id=f"shot{i:06d}",
            target_id=f"target{target:05d}",
            session=f"synthetic-seed{seed}",
            distance_m=p.distance_m,
            raw=_normalize(raw, normalization),
            clean_1a=clean_1a,
            clean_1b=clean_1b,
            composition=comp,
        ))
    return records
