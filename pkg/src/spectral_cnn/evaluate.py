"""Report metrics: denoising error, per-element RMSE, distance bins, scatter exports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .dataio import DataFormatError, stack_spectra
from .models import PreprocNet

__all__ = [
    "PreprocReport",
    "CalibReport",
    "DistanceBinReport",
    "unit_l2_rows",
    "preproc_errors",
    "eval_preproc",
    "eval_calib_rmse",
    "calib_report",
    "eval_by_distance",
    "fit_line",
    "scatter_export",
    "write_report_csv",
    "DISTANCE_BINS",
]

REPORT_HEADER = ["metric", "split", "element_or_bin", "value", "count"]
DISTANCE_BINS = tuple((k, k + 1) for k in range(1, 7))


def unit_l2_rows(a: np.ndarray) -> np.ndarray:
    """Scale each row to unit l2 norm; all-zero rows stay zero."""
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    return a / np.where(norms > 0, norms, 1.0)


@dataclass
class PreprocReport:
    value: float
    count: int
    errors: np.ndarray = field(repr=False)
    split: str = "test"

    def rows(self, metric="preproc_rmse"):
        return [(metric, self.split, "all", self.value, self.count)]


def preproc_errors(denoised, clean) -> np.ndarray:
    """Per-shot ``|| l2n(denoised) - l2n(clean) ||``.

    With ``denoised = y - R(y)`` this is the residual error
    ``||(y - x) - R(y)||`` evaluated on unit-l2-normalized spectra.
    """
    denoised = np.atleast_2d(denoised)
    clean = np.atleast_2d(clean)
    if denoised.shape != clean.shape:
        raise ValueError(f"shape mismatch {denoised.shape} vs {clean.shape}")
    return np.linalg.norm(unit_l2_rows(denoised) - unit_l2_rows(clean), axis=1)


def _labels(test_set, level):
    field_name = f"clean_{level}"
    missing = [r.shot_id for r in test_set if getattr(r, field_name) is None]
    if missing:
        raise DataFormatError(
            f"{len(missing)} shots lack level-{level} labels (first: {missing[0]})")
    return stack_spectra(test_set, "raw"), stack_spectra(test_set, field_name)


def _denoise(net: Optional[PreprocNet], raw: np.ndarray, batch_size=256) -> np.ndarray:
    if net is None:
        return raw
    net.eval()
    return np.concatenate([net.denoise(raw[i:i + batch_size])
                           for i in range(0, len(raw), batch_size)])


def eval_preproc(net: Optional[PreprocNet], test_set, level: str = "1b",
                 split: str = "test") -> PreprocReport:
    """Mean normalized denoising error over ``test_set``.

    ``net=None`` evaluates the identity (zero-residual) baseline.
    """
    if len(test_set) == 0:
        raise ValueError("empty test set")
    raw, clean = _labels(test_set, level)
    errors = preproc_errors(_denoise(net, raw), clean)
    return PreprocReport(float(errors.mean()), len(errors), errors, split)


def eval_calib_rmse(preds, truths) -> np.ndarray:
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if preds.shape != truths.shape:
        raise ValueError(f"count/element mismatch: {preds.shape} vs {truths.shape}")
    if len(preds) == 0:
        raise ValueError("no predictions")
    return np.sqrt(np.mean((preds - truths) ** 2, axis=0))


def fit_line(truth, pred):
    """Ordinary least-squares ``pred ~ slope * truth + intercept``.

    Returns ``(slope, intercept)``, or ``(nan, nan)`` when the truths have zero
    variance and the line is undefined.
    """
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    tc = truth - truth.mean()
    denom = np.dot(tc, tc)
    if denom == 0:
        return float("nan"), float("nan")
    slope = np.dot(tc, pred - pred.mean()) / denom
    return float(slope), float(pred.mean() - slope * truth.mean())


@dataclass
class CalibReport:
    element_names: Sequence[str]
    rmse: np.ndarray
    baseline_rmse: np.ndarray
    preds: np.ndarray = field(repr=False)
    truths: np.ndarray = field(repr=False)
    split: str = "test"

    @property
    def lines(self) -> Dict[str, tuple]:
        return {n: fit_line(self.truths[:, k], self.preds[:, k])
                for k, n in enumerate(self.element_names)}

    @property
    def total_rmse(self) -> float:
        """sqrt(mean over shots of the squared composition-error norm)."""
        return float(np.sqrt(np.sum(self.rmse ** 2)))

    def rows(self, metric="calib_rmse"):
        n = len(self.preds)
        out = [(metric, self.split, e, float(v), n)
               for e, v in zip(self.element_names, self.rmse)]
        out += [("mean_predictor_rmse", self.split, e, float(v), n)
                for e, v in zip(self.element_names, self.baseline_rmse)]
        return out


def calib_report(preds, truths, train_truths, element_names,
                 split: str = "test") -> CalibReport:
    """Per-element RMSE plus the mean-predictor baseline from ``train_truths``."""
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    mean = np.asarray(train_truths, dtype=np.float64).mean(axis=0)
    baseline = eval_calib_rmse(np.broadcast_to(mean, truths.shape), truths)
    return CalibReport(tuple(element_names), eval_calib_rmse(preds, truths), baseline,
                       preds, truths, split)


def _bin_label(lo, hi, last):
    return f"[{lo},{hi}]" if last else f"[{lo},{hi})"


@dataclass
class DistanceBinReport:
    labels: List[str]
    counts: np.ndarray
    rmse: np.ndarray
    split: str = "test"

    @property
    def spread(self) -> float:
        """Max minus min RMSE over non-empty in-range bins."""
        vals = self.rmse[:-1][self.counts[:-1] > 0]
        return float(vals.max() - vals.min()) if vals.size else float("nan")

    @property
    def ratio(self) -> float:
        """Max over min RMSE; equal bins (including all-zero) give 1."""
        vals = self.rmse[:-1][self.counts[:-1] > 0]
        if not vals.size:
            return float("nan")
        if vals.max() == vals.min():
            return 1.0
        return float(vals.max() / vals.min()) if vals.min() > 0 else float("inf")

    def rows(self, metric="preproc_rmse_by_distance"):
        return [(metric, self.split, lab, float(v), int(c))
                for lab, v, c in zip(self.labels, self.rmse, self.counts)]


def distance_bin_index(d: float) -> int:
    """Index into ``DISTANCE_BINS``; 6 denotes the overflow bin (outside [1, 7])."""
    if 1.0 <= d < 7.0:
        return int(np.floor(d)) - 1
    if d == 7.0:
        return 5
    return len(DISTANCE_BINS)


def eval_by_distance(net: Optional[PreprocNet], test_set, level: str = "1b",
                     split: str = "test") -> DistanceBinReport:
    """Denoising error per integer-meter distance bin.

    Bins are ``[1,2), ..., [5,6), [6,7]``; shots outside [1, 7] m land in a
    trailing ``overflow`` bin.  Empty bins report NaN.
    """
    if len(test_set) == 0:
        raise ValueError("empty test set")
    raw, clean = _labels(test_set, level)
    errors = preproc_errors(_denoise(net, raw), clean)
    idx = np.array([distance_bin_index(r.distance_m) for r in test_set])
    n_bins = len(DISTANCE_BINS) + 1
    counts = np.bincount(idx, minlength=n_bins)
    rmse = np.full(n_bins, np.nan)
    for b in range(n_bins):
        if counts[b]:
            rmse[b] = errors[idx == b].mean()
    labels = [_bin_label(lo, hi, i == len(DISTANCE_BINS) - 1)
              for i, (lo, hi) in enumerate(DISTANCE_BINS)] + ["overflow"]
    return DistanceBinReport(labels, counts, rmse, split)


def scatter_export(preds, truths, path, element_names) -> Dict[str, dict]:
    """Write ``element,truth,pred`` rows and return the OLS line per element.

    Each entry is ``{"slope", "intercept", "defined"}``; ``defined`` is False
    when the truths for that element have zero variance.
    """
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if preds.shape != truths.shape or len(preds) == 0:
        raise ValueError("scatter export needs equal, non-empty prediction/truth arrays")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["element", "truth", "pred"])
        for k, name in enumerate(element_names):
            for t, p in zip(truths[:, k].tolist(), preds[:, k].tolist()):
                w.writerow([name, repr(t), repr(p)])
    lines = {}
    for k, name in enumerate(element_names):
        slope, intercept = fit_line(truths[:, k], preds[:, k])
        lines[name] = {"slope": slope, "intercept": intercept,
                       "defined": not np.isnan(slope)}
    return lines


def write_report_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for metric, split, key, value, count in rows:
            w.writerow([metric, split, key, repr(float(value)), int(count)])


def read_report_csv(path) -> List[tuple]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != REPORT_HEADER:
            raise DataFormatError(f"{path}: header must be {','.join(REPORT_HEADER)}")
        return [(m, s, k, float(v), int(c)) for m, s, k, v, c in reader]
