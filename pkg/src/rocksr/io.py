"""Grayscale image files and the on-disk dataset layout.

Supported formats: 8/16-bit grayscale PNG, binary PGM (P5, any maxval up to
65535) and ``.npy`` float arrays (lossless, used for exact pipeline checks).

Dataset layout::

    <root>/manifest.txt                       one HR path per line, relative to root
    <root>/{train,valid,test}/HR/<name>.png
    <root>/{train,valid,test}/LR_bicubic/<name>.png  (+ <name>.json provenance)
    <root>/{train,valid,test}/LR_unknown/<name>.png  (+ <name>.json provenance)
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .imaging import SamplePair

SPLITS = ("train", "valid", "test")
IMAGE_SUFFIXES = (".png", ".pgm", ".npy")
SUPPORTED = "8-bit or 16-bit grayscale PNG, binary PGM (P5), or 2-D .npy"


class UnsupportedImageError(ValueError):
    pass


def _read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise UnsupportedImageError(f"{path}: PGM type {tokens[0]!r}; only binary P5 is supported ({SUPPORTED})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if not 0 < maxval <= 65535:
        raise UnsupportedImageError(f"{path}: PGM maxval {maxval} out of range")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return arr.astype(np.float64) / maxval


def _write_pgm(path, q, maxval):
    h, w = q.shape
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.astype(dtype).tobytes())


def read_image(path, average_rgb=False):
    """Read a grayscale image as float64 in ``[0, 1]``.

    Integer sources are divided by their type maximum (255, 65535, or the
    PGM maxval). Colour images raise unless ``average_rgb`` is set.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        arr = np.load(path)
        if arr.ndim != 2:
            raise UnsupportedImageError(f"{path}: expected a 2-D array, got shape {arr.shape}")
        return arr.astype(np.float64)
    if suffix == ".pgm":
        return _read_pgm(path)
    with Image.open(path) as im:
        mode = im.mode
        if mode == "L":
            return np.asarray(im, dtype=np.float64) / 255.0
        if mode in ("I;16", "I;16B", "I;16L", "I"):
            return np.asarray(im).astype(np.float64) / 65535.0
        if mode == "1":
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        if mode in ("RGB", "RGBA") and average_rgb:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            return rgb.mean(axis=2)
        raise UnsupportedImageError(
            f"{path}: image mode {mode!r} is not grayscale; expected {SUPPORTED}"
            + (" (pass average_rgb=True to average colour channels)" if mode in ("RGB", "RGBA") else ""))


def quantize(img, bit_depth):
    maxval = (1 << bit_depth) - 1
    return np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(np.uint16 if bit_depth > 8 else np.uint8)


def write_image(img, path, bit_depth=8):
    """Write a ``[0, 1]`` image (clamped) as PNG/PGM at ``bit_depth`` or as ``.npy``."""
    path = Path(path)
    suffix = path.suffix.lower()
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise UnsupportedImageError(f"expected a 2-D image, got shape {img.shape}")
    if suffix == ".npy":
        np.save(path, img)
        return path
    if bit_depth not in (8, 16):
        raise UnsupportedImageError(f"bit depth {bit_depth} unsupported; use 8 or 16")
    q = quantize(img, bit_depth)
    if suffix == ".pgm":
        _write_pgm(path, q, (1 << bit_depth) - 1)
    elif suffix == ".png":
        Image.fromarray(q).save(path)
    else:
        raise UnsupportedImageError(f"{path}: unknown suffix; expected {SUPPORTED}")
    return path


def list_images(directory):
    d = Path(directory)
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


# --------------------------------------------------------------------------
# dataset layout
# --------------------------------------------------------------------------

def lr_dirname(mode):
    return f"LR_{mode}"


def write_manifest(root, rel_paths):
    root = Path(root)
    with open(root / "manifest.txt", "w") as fh:
        for p in rel_paths:
            fh.write(f"{p}\n")


def read_manifest(root):
    path = Path(root) / "manifest.txt"
    if not path.exists():
        return None
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def split_names(root, split):
    """HR file names of ``split`` in manifest order (sorted if no manifest)."""
    root = Path(root)
    manifest = read_manifest(root)
    if manifest is not None:
        prefix = f"{split}/HR/"
        return [p[len(prefix):] for p in manifest if p.startswith(prefix)]
    hr_dir = root / split / "HR"
    return [p.name for p in list_images(hr_dir)] if hr_dir.is_dir() else []


def load_split(root, split, mode, limit=None):
    """Load ``(lr, hr)`` pairs of one split/subset from a prepared dataset."""
    root = Path(root)
    pairs = []
    names = split_names(root, split)
    if limit is not None:
        names = names[:limit]
    for name in names:
        stem = Path(name).stem
        lr_dir = root / split / lr_dirname(mode)
        candidates = [lr_dir / f"{stem}{s}" for s in IMAGE_SUFFIXES]
        lr_path = next((c for c in candidates if c.exists()), None)
        if lr_path is None:
            raise FileNotFoundError(f"no LR image for {name} in {lr_dir}")
        prov_path = lr_dir / f"{stem}.json"
        prov = json.loads(prov_path.read_text()) if prov_path.exists() else {}
        prov.setdefault("source", os.fspath(Path(split) / "HR" / name))
        pairs.append(SamplePair(lr=read_image(lr_path), hr=read_image(root / split / "HR" / name),
                                provenance=prov))
    return pairs
