"""Spectrum CSVs, JSON-lines dataset manifests, train/test partitions, model files."""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ._random import substream
from .models import CalibHead, EndToEndNet, NetConfig, PreprocNet
from .nn import Module
from .records import Composition, ShotRecord
from .spectra import Spectrum, WavelengthAxis

__all__ = [
    "DataFormatError",
    "ModelFormatError",
    "DatasetManifest",
    "read_spectrum_csv",
    "write_spectrum_csv",
    "load_manifest",
    "save_manifest",
    "partition_random",
    "partition_by_target",
    "save_model",
    "load_model",
    "stack_spectra",
]

PathLike = Union[str, os.PathLike]


class DataFormatError(ValueError):
    """Malformed or inconsistent dataset file."""


class ModelFormatError(ValueError):
    """Unreadable, truncated or mismatched model file."""


# ---------------------------------------------------------------------------
# spectrum CSV
# ---------------------------------------------------------------------------

SPECTRUM_HEADER = ["wavelength_nm", "intensity"]


def read_spectrum_csv(path: PathLike) -> Spectrum:
    wl, vals = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != SPECTRUM_HEADER:
            raise DataFormatError(f"{path}:1: header must be {','.join(SPECTRUM_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                wl.append(float(row[0]))
                vals.append(float(row[1]))
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric value in {row}") from None
    try:
        return Spectrum(WavelengthAxis(np.array(wl)), np.array(vals))
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def write_spectrum_csv(s: Spectrum, path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPECTRUM_HEADER)
        for lam, v in zip(s.wavelengths.tolist(), s.intensities.tolist()):
            w.writerow([repr(lam), repr(v)])


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    """Ordered shot records plus the shared axis and a provenance note."""

    records: List[ShotRecord] = field(default_factory=list)
    axis: Optional[WavelengthAxis] = None
    provenance: str = ""

    def __post_init__(self):
        self.records = list(self.records)
        ids = [r.shot_id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataFormatError(f"duplicate shot ids: {dup[:5]}")
        if self.axis is None and self.records:
            self.axis = self.records[0].raw.axis
        for r in self.records:
            if self.axis is not None and r.raw.axis != self.axis:
                raise DataFormatError(f"shot {r.shot_id}: axis differs from dataset axis")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.records == other.records and self.provenance == other.provenance

    def subset(self, records: Iterable[ShotRecord]) -> "DatasetManifest":
        return DatasetManifest(list(records), self.axis, self.provenance)

    @property
    def target_ids(self) -> List[str]:
        return sorted({r.target_id for r in self.records})


def _rel(path: Path, root: Path) -> str:
    return path.relative_to(root).as_posix()


def save_manifest(manifest: DatasetManifest, path: PathLike) -> Path:
    """Write ``path`` (JSON-lines) plus spectrum CSVs under ``<dir>/spectra``.

    A ``dataset.json`` sidecar records the provenance note and the axis file.
    Output is byte-identical for identical manifests.
    """
    path = Path(path)
    root = path.parent
    spectra_dir = root / "spectra"
    spectra_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for r in manifest.records:
        entry = {
            "shot_id": r.shot_id,
            "target_id": r.target_id,
            "session": r.session,
            "distance_m": r.distance_m,
        }
        for key, spec in (("raw", r.raw), ("clean_1a", r.clean_1a), ("clean_1b", r.clean_1b)):
            if spec is None:
                continue
            p = spectra_dir / f"{r.shot_id}_{key}.csv"
            write_spectrum_csv(spec, p)
            entry[f"{key}_path"] = _rel(p, root)
        if r.composition is not None:
            entry["composition"] = r.composition.as_dict()
        lines.append(json.dumps(entry))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(line + "\n" for line in lines))
    meta = {"manifest": path.name, "provenance": manifest.provenance,
            "n_shots": len(manifest.records)}
    if manifest.axis is not None:
        axis_path = root / "axis.csv"
        with open(axis_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["wavelength_nm"])
            for lam in manifest.axis.values.tolist():
                w.writerow([repr(lam)])
        meta["axis_file"] = axis_path.name
        if manifest.axis.detector_boundaries is not None:
            meta["detector_boundaries"] = [list(b) for b in manifest.axis.detector_boundaries]
    with open(root / "dataset.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _read_axis(path: Path, bounds) -> WavelengthAxis:
    vals = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["wavelength_nm"]:
            raise DataFormatError(f"{path}:1: header must be wavelength_nm")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 1:
                raise DataFormatError(f"{path}:{lineno}: expected 1 column, got {len(row)}")
            vals.append(float(row[0]))
    return WavelengthAxis(np.array(vals), bounds)


_REQUIRED_KEYS = ("shot_id", "target_id", "session", "distance_m", "raw_path")


def load_manifest(path: PathLike) -> DatasetManifest:
    """Read a JSON-lines manifest (or a directory containing ``manifest.jsonl``)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    axis, provenance = None, ""
    meta_path = root / "dataset.json"
    if meta_path.exists():
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        provenance = meta.get("provenance", "")
        if meta.get("axis_file"):
            bounds = meta.get("detector_boundaries")
            axis = _read_axis(root / meta["axis_file"], bounds)

    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{where}: invalid JSON ({exc.msg})") from None
            if not isinstance(entry, dict):
                raise DataFormatError(f"{where}: record must be a JSON object")
            missing = [k for k in _REQUIRED_KEYS if k not in entry]
            if missing:
                raise DataFormatError(f"{where}: missing keys {missing}")

            def spectrum(key):
                rel = entry.get(key)
                if rel is None:
                    return None
                p = root / rel
                if not p.exists():
                    raise DataFormatError(f"{where}: {key} file not found: {p}")
                s = read_spectrum_csv(p)
                if axis is not None:
                    if s.axis != axis:
                        raise DataFormatError(f"{where}: {key} axis differs from dataset axis")
                    s = Spectrum(axis, s.intensities)
                return s

            comp = entry.get("composition")
            try:
                composition = Composition.from_dict(comp) if comp is not None else None
                raw = spectrum("raw_path")
                if axis is None:
                    axis = raw.axis
                records.append(ShotRecord(
                    shot_id=str(entry["shot_id"]),
                    target_id=str(entry["target_id"]),
                    session=str(entry["session"]),
                    distance_m=float(entry["distance_m"]),
                    raw=raw,
                    clean_1a=spectrum("clean_1a_path"),
                    clean_1b=spectrum("clean_1b_path"),
                    composition=composition,
                ))
            except DataFormatError:
                raise
            except (ValueError, KeyError, TypeError) as exc:
                raise DataFormatError(f"{where}: {exc}") from None
    return DatasetManifest(records, axis, provenance)


def stack_spectra(records: Sequence[ShotRecord], field_name: str = "raw") -> np.ndarray:
    """(n_shots, N) array of one spectrum field; raises if any shot lacks it."""
    rows = []
    for r in records:
        s = getattr(r, field_name)
        if s is None:
            raise DataFormatError(f"shot {r.shot_id} has no {field_name} spectrum")
        rows.append(s.intensities)
    return np.array(rows)


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------

def _records(manifest) -> Tuple[List[ShotRecord], Optional[DatasetManifest]]:
    if isinstance(manifest, DatasetManifest):
        return manifest.records, manifest
    return list(manifest), None


def _wrap(template, records):
    if template is None:
        return DatasetManifest(records)
    return template.subset(records)


def partition_random(manifest, train_frac: float, seed: int = 0):
    """Shot-level random split; ``floor(train_frac * n)`` shots go to train."""
    records, template = _records(manifest)
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must lie in (0, 1)")
    if len(records) < 2:
        raise ValueError("need at least 2 shots to partition")
    order = substream(seed, "partition").permutation(len(records))
    n_train = math.floor(train_frac * len(records))
    train_idx = np.sort(order[:n_train])
    test_idx = np.sort(order[n_train:])
    return (_wrap(template, [records[i] for i in train_idx]),
            _wrap(template, [records[i] for i in test_idx]))


def partition_by_target(manifest, train_frac: float, seed: int = 0):
    """Target-level split: no target contributes shots to both sides.

    Targets are shuffled by ``seed``; among all proper subsets of targets the
    one whose train shot count is closest to ``train_frac * n`` is chosen
    (exact subset-sum over shot counts), ties broken toward fewer train shots.
    """
    records, template = _records(manifest)
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must lie in (0, 1)")
    targets: dict = {}
    for i, r in enumerate(records):
        targets.setdefault(r.target_id, []).append(i)
    if len(targets) < 2:
        raise ValueError("cannot split by target: need at least 2 distinct targets")
    names = sorted(targets)
    order = [names[i] for i in substream(seed, "partition").permutation(len(names))]
    counts = [len(targets[t]) for t in order]
    n = len(records)

    # reach[i] has bit s set iff some subset of the first i targets sums to s
    reach = [1]
    for c in counts:
        reach.append(reach[-1] | (reach[-1] << c))
    goal = train_frac * n
    best = None
    for s in range(1, n):
        if (reach[-1] >> s) & 1:
            key = (abs(s - goal), s)
            if best is None or key < best:
                best = key
    s = best[1]
    train_targets = set()
    for i in range(len(order), 0, -1):
        if (reach[i - 1] >> s) & 1:
            continue
        train_targets.add(order[i - 1])
        s -= counts[i - 1]
    train = [r for r in records if r.target_id in train_targets]
    test = [r for r in records if r.target_id not in train_targets]
    return _wrap(template, train), _wrap(template, test)


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

MAGIC = b"SPECCNN\x00"
FORMAT_VERSION = 1
_KINDS = {"preproc": PreprocNet, "calib": CalibHead, "e2e": EndToEndNet}


def _kind_of(net: Module) -> str:
    for kind, cls in _KINDS.items():
        if type(net) is cls:
            return kind
    raise TypeError(f"cannot serialize {type(net).__name__}")


def _state(net: Module):
    return [(n, a, "param") for n, a in net.parameters()] + \
           [(n, a, "buffer") for n, a in net.buffers()]


def save_model(net: Module, path: PathLike) -> Path:
    """Write ``MAGIC | u64 header length | JSON header | float64 LE arrays``."""
    path = Path(path)
    state = _state(net)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": _kind_of(net),
        "precision": "single" if net.dtype == np.float32 else "double",
        "config": net.config.to_dict(),
        "blocks": [{"name": n, "shape": list(a.shape), "role": role}
                   for n, a, role in state],
    }
    blob = json.dumps(header, sort_keys=True).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a, _ in state:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def read_model_header(path: PathLike) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic bytes)")
    raw_len = fh.read(8)
    if len(raw_len) != 8:
        raise ModelFormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw_len)
    blob = fh.read(n)
    if len(blob) != n:
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: unsupported format version {header.get('format_version')!r}")
    if header.get("kind") not in _KINDS:
        raise ModelFormatError(f"{path}: unknown model kind {header.get('kind')!r}")
    return header


def load_model(path: PathLike, expected_config: Optional[NetConfig] = None,
               expected_kind: Optional[str] = None) -> Module:
    """Rebuild a network from a model file; outputs match the saved net bitwise."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        data = fh.read()
    config = NetConfig.from_dict(header["config"])
    if expected_config is not None and config != expected_config:
        raise ModelFormatError(
            f"{path}: config mismatch\n  file:     {config}\n  expected: {expected_config}")
    if expected_kind is not None and header["kind"] != expected_kind:
        raise ModelFormatError(
            f"{path}: model kind {header['kind']!r}, expected {expected_kind!r}")
    net = _KINDS[header["kind"]](config, np.random.default_rng(0))
    state = _state(net)
    blocks = header["blocks"]
    if [(b["name"], tuple(b["shape"]), b["role"]) for b in blocks] != \
            [(n, a.shape, role) for n, a, role in state]:
        raise ModelFormatError(f"{path}: parameter table does not match the config")
    total = sum(a.size for _, a, _ in state) * 8
    if len(data) < total:
        raise ModelFormatError(f"{path}: truncated parameter data "
                               f"({len(data)} of {total} bytes)")
    if len(data) > total:
        raise ModelFormatError(f"{path}: {len(data) - total} trailing bytes")
    values = np.frombuffer(data, dtype="<f8")
    offset = 0
    loaded = {}
    for name, a, role in state:
        loaded[(name, role)] = values[offset:offset + a.size].reshape(a.shape)
        offset += a.size
    _assign(net, loaded)
    if header.get("precision") == "single":
        net.astype(np.float32)
    net.eval()
    return net


def _assign(net: Module, loaded) -> None:
    for name, a in net.parameters():
        a[...] = loaded[(name, "param")]
    # buffers may be rebound attributes (running stats, output affine)
    for name, _ in list(net.buffers()):
        owner, attr = _resolve(net, name)
        setattr(owner, attr, np.array(loaded[(name, "buffer")], dtype=np.float64))


def _resolve(net: Module, dotted: str):
    parts = dotted.split(".")
    owner = net
    for p in parts[:-1]:
        owner = owner._child_by_name(p)
    return owner, parts[-1]
