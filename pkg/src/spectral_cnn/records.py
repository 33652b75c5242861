"""Composition vectors and per-shot records shared by the simulator and I/O."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .models import OXIDES
from .spectra import Spectrum

__all__ = ["Composition", "ShotRecord"]


@dataclass(frozen=True, eq=False)
class Composition:
    """Oxide weight percentages; each in [0, 100] and summing to at most 100."""

    oxide_wt_pct: np.ndarray
    element_names: tuple = OXIDES

    def __post_init__(self):
        v = np.array(self.oxide_wt_pct, dtype=np.float64).ravel()
        names = tuple(self.element_names)
        if v.size != len(names):
            raise ValueError(f"{v.size} values for {len(names)} element names")
        if not np.all(np.isfinite(v)):
            raise ValueError("composition contains non-finite values")
        if np.any(v < 0) or np.any(v > 100):
            raise ValueError("oxide wt.% entries must lie in [0, 100]")
        # tolerate round-off from sampling/rescaling
        if v.sum() > 100 + 1e-9:
            raise ValueError(f"oxide wt.% sum {v.sum():.6g} exceeds 100")
        v.setflags(write=False)
        object.__setattr__(self, "oxide_wt_pct", v)
        object.__setattr__(self, "element_names", names)

    def __eq__(self, other):
        if not isinstance(other, Composition):
            return NotImplemented
        return (self.element_names == other.element_names
                and np.array_equal(self.oxide_wt_pct, other.oxide_wt_pct))

    __hash__ = None

    def __len__(self):
        return self.oxide_wt_pct.size

    def as_dict(self) -> dict:
        return {n: float(v) for n, v in zip(self.element_names, self.oxide_wt_pct)}

    @classmethod
    def from_dict(cls, d: dict, element_names: Optional[Sequence[str]] = None):
        names = tuple(element_names) if element_names is not None else tuple(d)
        missing = [n for n in names if n not in d]
        if missing:
            raise KeyError(f"composition missing elements {missing}")
        return cls(np.array([d[n] for n in names], dtype=np.float64), names)


@dataclass(eq=False)
class ShotRecord:
    """One laser shot: raw spectrum, optional clean labels and composition."""

    shot_id: str
    target_id: str
    session: str
    distance_m: float
    raw: Spectrum
    clean_1a: Optional[Spectrum] = None
    clean_1b: Optional[Spectrum] = None
    composition: Optional[Composition] = None

    def __post_init__(self):
        if not self.distance_m > 0:
            raise ValueError(f"shot {self.shot_id}: distance must be > 0")
        for label in ("clean_1a", "clean_1b"):
            s = getattr(self, label)
            if s is not None and s.axis != self.raw.axis:
                raise ValueError(f"shot {self.shot_id}: {label} axis differs from raw axis")

    def clean(self, level: str) -> Optional[Spectrum]:
        if level not in ("1a", "1b"):
            raise ValueError(f"level must be '1a' or '1b', got {level!r}")
        return self.clean_1a if level == "1a" else self.clean_1b

    def __eq__(self, other):
        if not isinstance(other, ShotRecord):
            return NotImplemented
        return (self.shot_id == other.shot_id and self.target_id == other.target_id
                and self.session == other.session
                and self.distance_m == other.distance_m and self.raw == other.raw
                and self.clean_1a == other.clean_1a and self.clean_1b == other.clean_1b
                and self.composition == other.composition)

    __hash__ = None
