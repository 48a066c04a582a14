"""``rocksr`` command line: prepare, train, validate, sr, metrics, diffmap, hist.

Exit codes: 0 success, 2 usage/configuration error, 3 I/O or checkpoint
error, 4 numerical failure (diverged training, non-finite values).

Thread count for BLAS comes from ``ROCKSR_NUM_THREADS`` (default: all
cores); ``--sequential`` forces one thread for bit-reproducible runs.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checkpoint import CheckpointError, load_checkpoint, read_header
from .imaging import AugmentSpec, BicubicUpsampler, augment, make_lr
from .io import (SPLITS, UnsupportedImageError, list_images, load_split, lr_dirname, read_image,
                 write_image, write_manifest)
from .metrics import MetricsReport, difference_map, histogram, write_histogram_csv, write_reports
from .models import FAMILIES, ModelSpec, build_model, canonical_family
from .seeding import substream
from .tensor import THREADS_ENV, sequential, threads
from .trainer import TrainConfig, TrainingDivergedError, fit, validate

log = logging.getLogger("rocksr")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _print_config(command, d):
    print(f"# rocksr {command}")
    for k, v in d.items():
        print(f"{k}={'none' if v is None else v}")
    sys.stdout.flush()


def _family(name):
    try:
        return canonical_family(name)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"unknown model {name!r}; choose from {{{', '.join(FAMILIES)}}}") from None


# --------------------------------------------------------------------------
# prepare
# --------------------------------------------------------------------------

def cmd_prepare(args):
    hr_dir = Path(args.hr_dir)
    if not hr_dir.is_dir():
        raise OSError(f"--hr-dir {hr_dir} is not a directory")
    sources = list_images(hr_dir)
    if not sources:
        raise OSError(f"no images found in {hr_dir}")
    if args.valid_frac < 0 or args.test_frac < 0 or args.valid_frac + args.test_frac >= 1:
        raise UsageError("--valid-frac and --test-frac must be >= 0 and sum to < 1")
    modes = ("bicubic", "unknown") if args.mode == "both" else (args.mode,)
    _print_config("prepare", {"hr_dir": hr_dir, "out_dir": args.out_dir, "scale": args.scale,
                              "mode": args.mode, "augment": args.augment, "seed": args.seed,
                              "valid_frac": args.valid_frac, "test_frac": args.test_frac,
                              "format": args.format, "bit_depth": args.bit_depth})

    split_rng = substream(args.seed, "split")
    order = split_rng.permutation(len(sources))
    n_valid = int(round(args.valid_frac * len(sources)))
    n_test = int(round(args.test_frac * len(sources)))
    assignment = {}
    for rank, idx in enumerate(order):
        assignment[idx] = "valid" if rank < n_valid else "test" if rank < n_valid + n_test else "train"

    root = Path(args.out_dir)
    # one stream per mode so adding a mode does not perturb the other's draws
    kernel_rngs = {m: substream(args.seed, f"prepare/{m}") for m in modes}
    aug_rngs = {m: substream(args.seed, f"augment/{m}") for m in modes}
    aug_spec = AugmentSpec(tuple(args.blur_range), tuple(args.noise_var_range))
    manifest = []
    suffix = f".{args.format}"
    for idx, src in enumerate(sources):
        split = assignment[idx]
        hr = read_image(src)
        name = src.stem + suffix
        hr_out = root / split / "HR"
        hr_out.mkdir(parents=True, exist_ok=True)
        stored_hr = None
        for mode in modes:
            pair = make_lr(hr, args.scale, mode, kernel_rngs[mode], source=str(src))
            lr = pair.lr
            prov = dict(pair.provenance)
            if args.augment:
                lr, draws = augment(lr, aug_spec, aug_rngs[mode])
                prov["augment"] = draws
            if stored_hr is None:
                stored_hr = pair.hr
                write_image(stored_hr, hr_out / name, bit_depth=args.bit_depth)
            lr_out = root / split / lr_dirname(mode)
            lr_out.mkdir(parents=True, exist_ok=True)
            write_image(lr, lr_out / name, bit_depth=args.bit_depth)
            prov["split"] = split
            prov["hr_shape"] = list(pair.hr.shape)
            prov["lr_shape"] = list(lr.shape)
            (lr_out / f"{src.stem}.json").write_text(json.dumps(prov, indent=2) + "\n")
        manifest.append(f"{split}/HR/{name}")
    manifest.sort(key=lambda p: (SPLITS.index(p.split("/")[0]), p))
    write_manifest(root, manifest)
    counts = {s: sum(1 for p in manifest if p.startswith(s + "/")) for s in SPLITS}
    print(f"wrote {len(manifest)} images to {root} " + " ".join(f"{s}={n}" for s, n in counts.items()))
    return EXIT_OK


# --------------------------------------------------------------------------
# train / validate
# --------------------------------------------------------------------------

_TRAIN_FLAGS = [
    # (flag, config key, type, help)
    ("--model", "model", _family, "model family: " + ", ".join(FAMILIES)),
    ("--blocks", "blocks", int, "number of residual blocks"),
    ("--filters", "filters", int, "base filter count"),
    ("--scale", "scale", int, "upscale factor"),
    ("--final-kernel", "final_kernel", int, "SR-Resnet/EDSR tail kernel size"),
    ("--expansion", "expansion", int, "WDSR block expansion"),
    ("--linear-ratio", "linear_ratio", float, "WDSR-B linear low-rank ratio"),
    ("--prelu-init", "prelu_init", float, "initial PReLU slope"),
    ("--lr", "lr", float, "initial learning rate (default per family)"),
    ("--step", "step", float, "learning-rate half-life in epochs"),
    ("--iterations", "iterations", int, "iterations per epoch"),
    ("--batch", "batch", int, "crops per batch"),
    ("--crop", "crop", int, "LR crop size"),
    ("--epochs", "epochs", int, "number of epochs"),
    ("--seed", "seed", int, "master seed"),
    ("--subset", "subset", str, "LR subset: bicubic or unknown"),
    ("--blur-min", "blur_min", float, "augmentation blur sigma lower bound"),
    ("--blur-max", "blur_max", float, "augmentation blur sigma upper bound"),
    ("--noise-var-min", "noise_var_min", float, "augmentation noise variance lower bound"),
    ("--noise-var-max", "noise_var_max", float, "augmentation noise variance upper bound"),
    ("--dtype", "dtype", str, "float32 or float64"),
]


def _resolve_run(args):
    d = cfgmod.load_kv(args.config) if args.config else {}
    for _, key, _, _ in _TRAIN_FLAGS:
        v = getattr(args, key)
        if v is not None:
            d[key] = v
    if args.augment is not None:
        d["augment"] = args.augment
    if "model" in d:
        try:
            d["model"] = _family(str(d["model"]))
        except argparse.ArgumentTypeError as exc:
            raise UsageError(str(exc)) from None
    spec, config = cfgmod.build_run(d)
    if config.subset not in ("bicubic", "unknown"):
        raise UsageError(f"--subset must be bicubic or unknown, got {config.subset!r}")
    if config.dtype not in ("float32", "float64"):
        raise UsageError(f"--dtype must be float32 or float64, got {config.dtype!r}")
    return spec, config.for_family(spec.family)


def cmd_train(args):
    if args.checkpoint:
        header, _ = read_header(args.checkpoint)
        saved = (header.get("extra") or {}).get("config")
        if saved is None:
            raise CheckpointError(f"{args.checkpoint} carries no training state to resume")
        base = cfgmod.run_kv(ModelSpec.from_dict(header["spec"]), TrainConfig.from_dict(saved))
        merged = {**base, **(cfgmod.load_kv(args.config) if args.config else {})}
        for _, key, _, _ in _TRAIN_FLAGS:
            if getattr(args, key) is not None:
                merged[key] = getattr(args, key)
        spec, config = cfgmod.build_run(merged)
        config = config.for_family(spec.family)
    else:
        spec, config = _resolve_run(args)
    _print_config("train", {"data": args.data, "out": args.out, "checkpoint": args.checkpoint,
                            **cfgmod.run_kv(spec, config)})
    train = load_split(args.data, "train", config.subset, limit=args.train_limit)
    valid = load_split(args.data, "valid", config.subset, limit=args.valid_limit)
    if not train:
        raise OSError(f"{args.data}: training split is empty")
    if not valid:
        raise OSError(f"{args.data}: validation split is empty")
    model = None
    if not args.checkpoint:
        model = build_model(spec, rng=substream(config.seed, "init"), dtype=np.dtype(config.dtype))

    def report(trainer):
        e = trainer.log.epochs[-1]
        print(f"epoch {e['epoch']}: loss {np.mean(trainer.log.losses[-config.iterations_per_epoch:]):.6g} "
              f"val_psnr {e['val_psnr']:.4f} dB lr {e['lr']:.4g} ({e['seconds']:.1f}s)", flush=True)

    best, tlog = fit(model, train, valid, config, args.out, resume_from=args.checkpoint, on_epoch=report)
    print(f"best epoch {tlog.best_epoch + 1}: {tlog.best_psnr:.4f} dB -> {best}")
    return EXIT_OK


def cmd_validate(args):
    ck = load_checkpoint(args.checkpoint)
    model = ck.model
    pairs = load_split(args.data, args.split, args.subset, limit=args.limit)
    if not pairs:
        raise OSError(f"{args.data}: split {args.split!r} is empty")
    _print_config("validate", {"checkpoint": args.checkpoint, "data": args.data, "split": args.split,
                               "subset": args.subset, "quantize": args.quantize, **model.spec.to_dict()})
    sr = validate(model, pairs, quantize_bits=args.quantize)
    bic = validate(BicubicUpsampler(model.spec.scale), pairs, quantize_bits=args.quantize)
    print(f"images {len(pairs)}")
    print(f"model_psnr {sr!r}")
    print(f"bicubic_psnr {bic!r}")
    return EXIT_OK


# --------------------------------------------------------------------------
# sr
# --------------------------------------------------------------------------

def cmd_sr(args):
    ck = load_checkpoint(args.checkpoint)
    model = ck.model
    inp, out = Path(args.input), Path(args.output)
    _print_config("sr", {"checkpoint": args.checkpoint, "input": inp, "output": out,
                         "twice": args.twice, "tile": args.tile, "bit_depth": args.bit_depth,
                         **model.spec.to_dict()})
    if inp.is_dir():
        jobs = [(p, out / (p.stem + (args.suffix or p.suffix))) for p in list_images(inp)]
        if not jobs:
            raise OSError(f"no images found in {inp}")
        out.mkdir(parents=True, exist_ok=True)
    else:
        jobs = [(inp, out)]
    for src, dst in jobs:
        img = read_image(src)
        if img.ndim != 2:
            raise UnsupportedImageError(f"{src}: expected a grayscale image")
        sr = model.upscale(img, tile=args.tile, clamp=True)
        if args.twice:
            sr = model.upscale(sr, tile=args.tile, clamp=True)
        if not np.all(np.isfinite(sr)):
            raise FloatingPointError(f"{src}: model produced non-finite values")
        write_image(sr, dst, bit_depth=args.bit_depth)
        print(f"{src} {img.shape[0]}x{img.shape[1]} -> {dst} {sr.shape[0]}x{sr.shape[1]}")
    return EXIT_OK


# --------------------------------------------------------------------------
# metrics / diffmap / hist
# --------------------------------------------------------------------------

def _pairs_for(ref, test):
    """``[(ref_path, test_path)]``; directories are matched by file stem."""
    ref, test = Path(ref), Path(test)
    if ref.is_dir() != test.is_dir():
        raise UsageError(f"--ref {ref} and --test {test} must both be files or both be directories")
    if not ref.is_dir():
        return [(ref, test)]
    tests = {p.stem: p for p in list_images(test)}
    pairs = [(r, tests[r.stem]) for r in list_images(ref) if r.stem in tests]
    if not pairs:
        raise OSError(f"no images in {test} share a name with {ref}")
    return pairs


def _load_pair(r, t):
    a, b = read_image(r), read_image(t)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {r} is {a.shape[0]}x{a.shape[1]}, "
                         f"{t} is {b.shape[0]}x{b.shape[1]}")
    return a, b


def cmd_metrics(args):
    tests = []
    for item in args.test:
        label, sep, path = item.partition("=")
        tests.append((label, path) if sep else (Path(item).stem or item, item))
    _print_config("metrics", {"ref": args.ref, "test": ",".join(f"{l}={p}" for l, p in tests),
                              "out": args.out, "fixed_range": args.fixed_range})
    data_range = 1.0 if args.fixed_range else None
    reports = []
    for label, path in tests:
        rep = MetricsReport(label)
        for r, t in _pairs_for(args.ref, path):
            a, b = _load_pair(r, t)
            rep.add(t, b, a, data_range=data_range)
        reports.append(rep)
    for rep in reports:
        s = rep.summary()
        inf_note = f" ({s['infinite']} infinite excluded)" if s["infinite"] else ""
        print(f"{rep.method}: n={s['count']} mean_psnr={s['mean_psnr']!r} var_psnr={s['var_psnr']!r}{inf_note}")
        for path, m, p in rep.rows:
            flag = " [identical]" if math.isinf(p) and p > 0 else ""
            print(f"  {path} mse={m!r} psnr={p!r}{flag}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_reports(reports, out.with_suffix(".csv"), out.with_suffix(".json"))
        print(f"wrote {out.with_suffix('.csv')} and {out.with_suffix('.json')}")
    return EXIT_OK


def cmd_diffmap(args):
    _print_config("diffmap", {"ref": args.ref, "test": args.test, "out": args.out, "raw": args.raw})
    pairs = _pairs_for(args.ref, args.test)
    out = Path(args.out)
    if len(pairs) > 1 or Path(args.ref).is_dir():
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / f"{t.stem}_diff.png" for _, t in pairs]
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        targets = [out]
    for (r, t), dst in zip(pairs, targets):
        a, b = _load_pair(r, t)
        dm = difference_map(a, b)
        write_image(dm.display, dst, bit_depth=args.bit_depth)
        if args.raw:
            np.save(dst.with_suffix(".npy"), dm.raw)
        print(f"{t}: peak |diff| {dm.peak!r} mean |diff| {float(dm.raw.mean())!r} -> {dst}")
    return EXIT_OK


def cmd_hist(args):
    _print_config("hist", {"inputs": ",".join(args.inputs), "out": args.out, "bins": args.bins})
    paths = []
    for item in args.inputs:
        p = Path(item)
        paths.extend(list_images(p) if p.is_dir() else [p])
    out = Path(args.out)
    if len(paths) > 1:
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / f"{p.stem}_hist.csv" for p in paths]
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        targets = [out]
    for p, dst in zip(paths, targets):
        counts = histogram(read_image(p), bins=args.bins)
        write_histogram_csv(counts, dst)
        print(f"{p}: {int(counts.sum())} pixels in {args.bins} bins -> {dst}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _pair_of_floats(text):
    try:
        lo, hi = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


def build_parser():
    p = argparse.ArgumentParser(prog="rocksr", description=__doc__.split("\n\n")[0],
                                epilog=f"Environment: {THREADS_ENV} sets the BLAS thread count "
                                       "(default: all cores).")
    p.add_argument("--sequential", action="store_true",
                   help="single-threaded BLAS for bit-reproducible results")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("prepare", help="build an HR/LR dataset from a directory of HR slices")
    q.add_argument("--hr-dir", required=True)
    q.add_argument("--out-dir", required=True)
    q.add_argument("--scale", type=int, default=4)
    q.add_argument("--mode", choices=("bicubic", "unknown", "both"), default="bicubic")
    q.add_argument("--augment", action="store_true", help="blur and noise the LR images")
    q.add_argument("--blur-range", type=_pair_of_floats, default=(0.0, 1.0), metavar="LO,HI")
    q.add_argument("--noise-var-range", type=_pair_of_floats, default=(0.0, 0.005), metavar="LO,HI")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--valid-frac", type=float, default=0.1)
    q.add_argument("--test-frac", type=float, default=0.0)
    q.add_argument("--format", choices=("png", "pgm", "npy"), default="png")
    q.add_argument("--bit-depth", type=int, choices=(8, 16), default=16)
    q.set_defaults(func=cmd_prepare)

    q = sub.add_parser("train", help="train a model on a prepared dataset")
    q.add_argument("--data", required=True, help="dataset root written by 'prepare'")
    q.add_argument("--out", required=True, help="run directory (checkpoints, CSV logs, config.txt)")
    q.add_argument("--config", help="key=value file; flags override it")
    q.add_argument("--checkpoint", help="resume from a training checkpoint")
    for flag, key, typ, hlp in _TRAIN_FLAGS:
        q.add_argument(flag, dest=key, type=typ, default=None, help=hlp)
    q.add_argument("--augment", dest="augment", action="store_true", default=None,
                   help="blur/noise augmentation of LR crops")
    q.add_argument("--no-augment", dest="augment", action="store_false")
    q.add_argument("--train-limit", type=int, help="use only the first N training images")
    q.add_argument("--valid-limit", type=int, help="use only the first N validation images")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("validate", help="mean PSNR of a checkpoint and of bicubic on a split")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--split", choices=SPLITS, default="valid")
    q.add_argument("--subset", choices=("bicubic", "unknown"), default="bicubic")
    q.add_argument("--quantize", type=int, choices=(8, 16), help="quantize SR output before scoring")
    q.add_argument("--limit", type=int)
    q.set_defaults(func=cmd_validate)

    q = sub.add_parser("sr", help="super-resolve an image or a directory of images")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--input", required=True)
    q.add_argument("--output", required=True)
    q.add_argument("--twice", action="store_true", help="apply the model twice (scale n*n)")
    q.add_argument("--tile", type=int, default=96, help="LR tile size for inference")
    q.add_argument("--bit-depth", type=int, choices=(8, 16), default=16)
    q.add_argument("--suffix", help="output suffix in directory mode (default: same as input)")
    q.set_defaults(func=cmd_sr)

    q = sub.add_parser("metrics", help="MSE/PSNR of test images against references")
    q.add_argument("--ref", required=True, help="reference image or directory")
    q.add_argument("--test", required=True, action="append",
                   help="[LABEL=]image or directory; repeat for several methods")
    q.add_argument("--out", help="report path stem; writes STEM.csv and STEM.json")
    q.add_argument("--fixed-range", action="store_true", help="use data range 1.0 instead of the joint range")
    q.set_defaults(func=cmd_metrics)

    q = sub.add_parser("diffmap", help="absolute difference maps")
    q.add_argument("--ref", required=True)
    q.add_argument("--test", required=True)
    q.add_argument("--out", required=True, help="output PNG, or directory in batch mode")
    q.add_argument("--raw", action="store_true", help="also save the unscaled map as .npy")
    q.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    q.set_defaults(func=cmd_diffmap)

    q = sub.add_parser("hist", help="intensity histograms as CSV")
    q.add_argument("--inputs", required=True, nargs="+")
    q.add_argument("--out", required=True, help="output CSV, or directory for several inputs")
    q.add_argument("--bins", type=int, default=256)
    q.set_defaults(func=cmd_hist)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with sequential() if args.sequential else threads():
            return args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        parser.error(str(exc))
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"rocksr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, UnsupportedImageError) as exc:
        print(f"rocksr: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"rocksr: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
