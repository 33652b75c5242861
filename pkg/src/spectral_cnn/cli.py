"""Command-line entry point: ``spectral-cnn <subcommand> [options]``.

Subcommands: synth, train {preproc|calib|e2e}, preprocess, calibrate,
evaluate, gradcheck, bench.  Any option may also come from a JSON file given
with ``--config``; flags on the command line win.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import tempfile
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from ._random import substream
from .dataio import (DataFormatError, DatasetManifest, ModelFormatError, load_manifest,
                     load_model, read_model_header, save_manifest, save_model,
                     stack_spectra, write_spectrum_csv)
from .evaluate import (calib_report, eval_by_distance, eval_preproc, scatter_export,
                       write_report_csv)
from .gradcheck import COMPONENTS, run_suite
from .inference import FrozenDenoiser
from .models import CalibHead, EndToEndNet, NetConfig, PreprocNet, param_count
from .nn import NonFiniteError
from .simulator import default_param_sampler, make_dataset
from .spectra import DegenerateSpectrumError, default_axis
from .train import TrainConfig, fit_calib, fit_e2e, fit_preproc, write_trace

logger = logging.getLogger("spectral_cnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3, 4

# figures quoted for the original architecture, printed next to measured values
CLAIMED_PARAMS = "~4K"
CLAIMED_SIZE = "~1MB"
CLAIMED_RATE_HZ = 50.0


class UsageError(Exception):
    pass


class VerificationError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _manifest(path) -> DatasetManifest:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"dataset not found: {p}")
    return load_manifest(p)


def _require_field(manifest: DatasetManifest, field_name: str, why: str) -> np.ndarray:
    missing = [r.shot_id for r in manifest if getattr(r, field_name) is None]
    if missing:
        raise DataFormatError(
            f"{why} needs '{field_name}' on every shot; {len(missing)} shots lack it "
            f"(first: {missing[0]})")
    return stack_spectra(manifest.records, field_name)


def _compositions(manifest: DatasetManifest) -> np.ndarray:
    missing = [r.shot_id for r in manifest if r.composition is None]
    if missing:
        raise DataFormatError(
            f"composition labels missing on {len(missing)} shots (first: {missing[0]})")
    return np.stack([r.composition.oxide_wt_pct for r in manifest])


def _element_names(manifest: DatasetManifest):
    return manifest[0].composition.element_names


def _load(path, kind=None):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"model file not found: {p}")
    net = load_model(p)
    if kind is not None:
        kinds = (kind,) if isinstance(kind, str) else kind
        actual = read_model_header(p)["kind"]
        if actual not in kinds:
            raise UsageError(f"{p}: model kind {actual!r}, expected one of {kinds}")
    return net


def _check_length(net, manifest: DatasetManifest, what="model"):
    n = len(manifest.axis)
    if net.config.input_length != n:
        raise DataFormatError(
            f"{what} expects spectra of length {net.config.input_length}, data has {n}")


def _batched(fn, x, batch_size=256):
    return np.concatenate([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def _out_path(path, create_parent=True) -> Path:
    p = Path(path)
    if create_parent:
        try:
            p.parent.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create {p.parent}: {exc}") from None
    return p


def _net_config(args, n, num_elements=8, element_names=None) -> NetConfig:
    kw = dict(input_length=n, depth=args.depth, width=args.width,
              kernel_size=args.kernel_size, num_elements=num_elements)
    if element_names is not None:
        kw["element_names"] = tuple(element_names)
    return NetConfig(**kw)


def _train_config(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch, epochs=args.epochs, lr=args.lr,
                       seed=args.seed, precision=args.precision)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.shots <= 0:
        raise UsageError("--shots must be positive")
    if args.bins < 32:
        raise UsageError("--bins must be at least 32")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    axis = default_axis(args.bins)
    lo, hi = args.distance_min, args.distance_max

    def sampler(rng, ax):
        return default_param_sampler(rng, ax, distance_range=(lo, hi))

    records = make_dataset(args.shots, param_sampler=sampler, axis=axis, level=args.level,
                           seed=args.seed, normalization=args.normalization,
                           shots_per_target=args.shots_per_target)
    manifest = DatasetManifest(records, axis,
                               provenance=f"synthetic seed={args.seed} level={args.level}")
    path = save_manifest(manifest, out / "manifest.jsonl")
    print(f"wrote {len(records)} shots to {path} (level {args.level}, seed {args.seed}, "
          f"N={len(axis)}, targets={len(manifest.target_ids)})")
    return EXIT_OK


def _calib_inputs(args, manifest, why):
    """Spectra fed to a calibration head: denoised raw or reference clean labels."""
    if args.preproc_model and args.use_reference_clean:
        raise UsageError("give only one of --preproc-model / --use-reference-clean")
    if args.preproc_model:
        pre = _load(args.preproc_model, "preproc")
        _check_length(pre, manifest, "preprocessing model")
        raw = _require_field(manifest, "raw", why)
        return _batched(pre.denoise, raw.astype(pre.dtype)).astype(np.float64)
    if args.use_reference_clean:
        return _require_field(manifest, f"clean_{args.level}", why)
    return None


def cmd_train(args) -> int:
    manifest = _manifest(args.data)
    n = len(manifest.axis)
    val = _manifest(args.val_data) if args.val_data else None
    cfg = _train_config(args)
    init = substream(args.seed, "init")
    if args.mode == "preproc":
        field_name = f"clean_{args.level}"
        raw = _require_field(manifest, "raw", "train preproc")
        clean = _require_field(manifest, field_name, "train preproc")
        validation = None
        if val is not None:
            validation = (_require_field(val, "raw", "validation"),
                          _require_field(val, field_name, "validation"))
        net = PreprocNet(_net_config(args, n), init)
        result = fit_preproc(net, raw, clean, cfg, validation)
    else:
        v = _compositions(manifest)
        names = _element_names(manifest)
        config = _net_config(args, n, v.shape[1], names)
        validation = None
        if args.mode == "calib":
            x = _calib_inputs(args, manifest, "train calib")
            if x is None:
                raise UsageError("train calib needs a clean source: --preproc-model "
                                 "or --use-reference-clean")
            if val is not None:
                validation = (_calib_inputs(args, val, "validation"), _compositions(val))
            net = CalibHead(config, init)
            result = fit_calib(net, x, v, cfg, validation)
        else:
            raw = _require_field(manifest, "raw", "train e2e")
            if val is not None:
                validation = (_require_field(val, "raw", "validation"), _compositions(val))
            net = EndToEndNet(config, init)
            result = fit_e2e(net, raw, v, cfg, validation)
    out = _out_path(args.out)
    save_model(result.net, out)
    trace = _out_path(args.trace) if args.trace else out.with_suffix(".trace.csv")
    write_trace(result.trace, trace)
    final = result.losses("train")
    last = f"{final[-1]:.6g}" if final.size else "n/a (0 epochs)"
    print(f"trained {args.mode} model ({param_count(result.net)} parameters) -> {out}; "
          f"trace -> {trace}; final train loss {last}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    net = _load(args.model, "preproc")
    manifest = _manifest(args.data)
    _check_length(net, manifest)
    raw = _require_field(manifest, "raw", "preprocess")
    cleaned = _batched(net.denoise, raw.astype(net.dtype)).astype(np.float64)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r, x in zip(manifest, cleaned):
        write_spectrum_csv(r.raw.with_intensities(x), out / f"{r.shot_id}_preprocessed.csv")
    print(f"wrote {len(cleaned)} preprocessed spectra to {out}")
    return EXIT_OK


def _predict_compositions(args, manifest):
    net = _load(args.model, ("calib", "e2e"))
    _check_length(net, manifest)
    if isinstance(net, CalibHead):
        x = _calib_inputs(args, manifest, "calibrate")
        if x is None:
            x = _require_field(manifest, "raw", "calibrate")
    else:
        if args.preproc_model or args.use_reference_clean:
            raise UsageError("an end-to-end model takes raw spectra; drop the clean-source flag")
        x = _require_field(manifest, "raw", "calibrate")
    preds = _batched(net.forward, x.astype(net.dtype)).astype(np.float64)
    if args.clamp:
        # reporting-only: training never sees clamped outputs
        preds = np.clip(preds, 0.0, 100.0)
    return net, preds


def cmd_calibrate(args) -> int:
    manifest = _manifest(args.data)
    net, preds = _predict_compositions(args, manifest)
    out = _out_path(args.out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["shot_id", *net.config.element_names])
        for r, p in zip(manifest, preds):
            w.writerow([r.shot_id, *[repr(float(v)) for v in p]])
    print(f"wrote {len(preds)} x {preds.shape[1]} predictions to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = _manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kind = read_model_header(args.model)["kind"] if Path(args.model).exists() else None
    if kind is None:
        raise UsageError(f"model file not found: {args.model}")
    if kind == "preproc":
        net = _load(args.model)
        _check_length(net, manifest)
        report = eval_preproc(net, manifest, args.level)
        baseline = eval_preproc(None, manifest, args.level)
        bins = eval_by_distance(net, manifest, args.level)
        rows = report.rows() + baseline.rows("identity_baseline_rmse")
        write_report_csv(rows, out / "preproc_report.csv")
        write_report_csv(bins.rows(), out / "distance_report.csv")
        print(f"preprocessing error {report.value:.6g} over {report.count} shots "
              f"(identity baseline {baseline.value:.6g})")
        for lab, c, v in zip(bins.labels, bins.counts, bins.rmse):
            print(f"  {lab:>9}  n={c:<5d} {v:.6g}")
        print(f"  spread (max-min) {bins.spread:.6g}, ratio {bins.ratio:.4g}")
        return EXIT_OK
    if not args.train_data:
        raise UsageError("evaluating a composition model needs --train-data "
                         "for the mean-predictor baseline")
    train = _manifest(args.train_data)
    net, preds = _predict_compositions(args, manifest)
    report = calib_report(preds, _compositions(manifest), _compositions(train),
                          net.config.element_names)
    write_report_csv(report.rows(), out / "calib_report.csv")
    lines = scatter_export(preds, report.truths, out / "scatter.csv", net.config.element_names)
    with open(out / "regression_lines.json", "w", encoding="utf-8") as fh:
        json.dump(lines, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{'element':>8} {'rmse':>10} {'mean-pred':>10} {'slope':>8} {'intercept':>10}")
    for k, e in enumerate(net.config.element_names):
        ln = lines[e]
        print(f"{e:>8} {report.rmse[k]:10.4f} {report.baseline_rmse[k]:10.4f} "
              f"{ln['slope']:8.4f} {ln['intercept']:10.4f}")
    print(f"total rmse {report.total_rmse:.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    comps = args.component or None
    unknown = [c for c in (comps or []) if c not in COMPONENTS]
    if unknown:
        raise UsageError(f"unknown component(s) {unknown}; choose from {', '.join(COMPONENTS)}")
    # finite differences are only meaningful in double precision, whatever the flag says
    rows = run_suite(comps, seed=args.seed)
    print(f"{'component':<14} {'max rel err':>12}  status")
    for name, err, ok in rows:
        print(f"{name:<14} {err:12.3e}  {'PASS' if ok else 'FAIL'}")
    if not all(ok for _, _, ok in rows):
        raise VerificationError("gradient check failed")
    return EXIT_OK


def bench_net(net: PreprocNet, iterations=1000, warmup=50, dtype=np.float32, seed=0) -> dict:
    """Single-shot latency statistics of the frozen feed-forward path."""
    frozen = FrozenDenoiser(net, dtype)
    rng = substream(seed, "bench")
    y = rng.random(net.config.input_length).astype(dtype)
    for _ in range(warmup):
        frozen(y)
    times = np.empty(iterations)
    for i in range(iterations):
        t0 = time.perf_counter()
        frozen(y)
        times[i] = time.perf_counter() - t0
    return {"hz": float(1.0 / times.mean()), "p50_ms": float(np.percentile(times, 50) * 1e3),
            "p99_ms": float(np.percentile(times, 99) * 1e3), "iterations": iterations}


def cmd_bench(args) -> int:
    if args.iterations < 1000:
        raise UsageError("--iterations must be at least 1000")
    if args.model:
        net = _load(args.model, "preproc")
        size = Path(args.model).stat().st_size
    else:
        cfg = NetConfig(input_length=args.length, depth=args.depth, width=args.width,
                        kernel_size=args.kernel_size)
        net = PreprocNet(cfg, substream(args.seed, "init")).eval()
        with tempfile.TemporaryDirectory() as tmp:
            size = save_model(net, Path(tmp) / "bench.model").stat().st_size
    dtype = np.float32 if args.precision == "single" else np.float64
    stats = bench_net(net, args.iterations, args.warmup, dtype, args.seed)
    c = net.config
    n_params = param_count(net)
    print(f"config: N={c.input_length} depth={c.depth} width={c.width} k={c.kernel_size} "
          f"precision={args.precision} threads={args.threads or 1}")
    print(f"throughput: {stats['hz']:.2f} shots/s over {stats['iterations']} shots "
          f"(p50 {stats['p50_ms']:.3f} ms, p99 {stats['p99_ms']:.3f} ms); "
          f"reference rate ~{CLAIMED_RATE_HZ:g} Hz")
    print(f"parameters: {n_params} (claimed {CLAIMED_PARAMS})")
    print(f"serialized size: {size} bytes = {size / 2**20:.3f} MiB "
          f"(claimed {CLAIMED_SIZE}; file stores float64)")
    print("note: the claimed ~4K parameter count is inconsistent with 20 layers of "
          "64x64x3 kernels (~220K weights); the true count is reported, not the claim")
    if args.json:
        with open(_out_path(args.json), "w", encoding="utf-8") as fh:
            json.dump({**stats, "parameters": n_params, "serialized_bytes": size,
                       "config": c.to_dict(), "precision": args.precision}, fh, indent=2)
            fh.write("\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file supplying default values for any option")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=0,
                   help="BLAS threads; 0 = sequential, bit-reproducible mode")
    p.add_argument("--precision", choices=("single", "double"), default="double")
    p.add_argument("-v", "--verbose", action="store_true")


def _arch(p, depth=20, width=64):
    p.add_argument("--depth", type=int, default=depth)
    p.add_argument("--width", type=int, default=width)
    p.add_argument("--kernel-size", type=int, default=3)


def _clean_source(p):
    p.add_argument("--preproc-model", help="denoise raw spectra with this model first")
    p.add_argument("--use-reference-clean", action="store_true",
                   help="use the dataset's clean labels as the head's input")
    p.add_argument("--level", choices=("1a", "1b"), default="1b")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="spectral-cnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    p = subs["synth"] = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    _common(p)
    p.add_argument("--shots", type=int, required=True)
    p.add_argument("--level", choices=("1a", "1b", "both"), default="both")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bins", type=int, default=512, help="spectral bins per shot")
    p.add_argument("--distance-min", type=float, default=1.0)
    p.add_argument("--distance-max", type=float, default=7.0)
    p.add_argument("--shots-per-target", type=int, default=1)
    p.add_argument("--normalization", choices=("max", "l2", "none"), default="max")
    p.set_defaults(func=cmd_synth)

    p = subs["train"] = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("mode", choices=("preproc", "calib", "e2e"))
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--trace", help="loss trace CSV (default: <out>.trace.csv)")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    _arch(p)
    _clean_source(p)
    p.set_defaults(func=cmd_train)

    p = subs["preprocess"] = sub.add_parser("preprocess", help="denoise spectra")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory for spectrum CSVs")
    p.set_defaults(func=cmd_preprocess)

    p = subs["calibrate"] = sub.add_parser("calibrate", help="predict compositions")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="predictions CSV")
    p.add_argument("--clamp", action="store_true", help="clip predictions to [0, 100] wt.%%")
    _clean_source(p)
    p.set_defaults(func=cmd_calibrate)

    p = subs["evaluate"] = sub.add_parser("evaluate", help="write report CSVs")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="labeled test set")
    p.add_argument("--train-data", help="training set (mean-predictor baseline)")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--clamp", action="store_true", help="clip predictions to [0, 100] wt.%%")
    _clean_source(p)
    p.set_defaults(func=cmd_evaluate)

    p = subs["gradcheck"] = sub.add_parser("gradcheck", help="finite-difference suite")
    _common(p)
    p.add_argument("--component", action="append", choices=COMPONENTS)
    p.set_defaults(func=cmd_gradcheck)

    p = subs["bench"] = sub.add_parser("bench", help="single-shot throughput")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--length", type=int, default=5500)
    _arch(p)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--json", help="also write the measurements to this JSON file")
    p.set_defaults(func=cmd_bench, precision="single")
    return parser, subs


def parse_args(argv: Optional[List[str]] = None):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                overrides = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(overrides, dict):
            raise UsageError("config file must hold a JSON object")
        overrides = {k.replace("-", "_"): v for k, v in overrides.items()}
        sub = subs[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise UsageError(f"config keys not valid for '{args.command}': {unknown}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 0:
        print("error: --threads must be >= 0", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads or 1):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, ModelFormatError, DegenerateSpectrumError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
