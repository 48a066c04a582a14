"""Resampling, LR-pair synthesis, blur/noise augmentation and crop sampling.

Images are 2-D float arrays in ``[0, 1]`` (``height, width``).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

KERNEL_NAMES = ("box", "triangle", "bicubic", "lanczos2", "lanczos3")


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

def _box(x):
    return ((-0.5 <= x) & (x < 0.5)).astype(np.float64)


def _triangle(x):
    return (x + 1) * ((-1 <= x) & (x < 0)) + (1 - x) * ((0 <= x) & (x <= 1))


def _cubic(x, a=-0.5):
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return near * (ax <= 1) + far * ((1 < ax) & (ax <= 2))


def _lanczos(radius):
    def h(x):
        return np.sinc(x) * np.sinc(x / radius) * (np.abs(x) < radius)
    return h


@dataclass(frozen=True)
class ResampleKernel:
    kind: str = "bicubic"
    antialias: bool = True

    def __post_init__(self):
        if self.kind == "cubic":
            object.__setattr__(self, "kind", "bicubic")
        if self.kind not in KERNEL_NAMES:
            raise ValueError(f"unknown kernel {self.kind!r}; choose from {KERNEL_NAMES}")

    @property
    def support(self):
        """Full kernel width in input samples at unit scale."""
        return {"box": 1.0, "triangle": 2.0, "bicubic": 4.0, "lanczos2": 4.0, "lanczos3": 6.0}[self.kind]

    def __call__(self, x):
        return {
            "box": _box,
            "triangle": _triangle,
            "bicubic": _cubic,
            "lanczos2": _lanczos(2),
            "lanczos3": _lanczos(3),
        }[self.kind](x)


def resample_matrix(in_len, out_len, scale, kernel):
    """Dense ``(out_len, in_len)`` weights for one axis.

    Output sample ``i`` (1-based) sits at input coordinate
    ``u = i / scale + (1 - 1 / scale) / 2``. When shrinking with antialias the
    kernel is stretched by ``1 / scale``. Out-of-range taps are mirrored
    (symmetric extension) and every row is normalised to sum to one.
    """
    width = kernel.support
    if scale < 1 and kernel.antialias:
        def h(x):
            return scale * kernel(scale * x)
        width = width / scale
    else:
        h = kernel
    i = np.arange(1, out_len + 1, dtype=np.float64)
    u = i / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = h(u[:, None] - idx)
    w = w / w.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
    src = mirror[np.mod(idx - 1, 2 * in_len).astype(np.int64)]
    m = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(m, (rows, src.ravel()), w.ravel())
    return m


def output_size(n, factor):
    # round half up; Python's round() would send 2.5 to 2
    out = math.floor(Fraction(factor).limit_denominator(10_000) * n + Fraction(1, 2))
    if out < 1:
        raise ValueError(f"resize of length {n} by {factor} gives an empty output")
    return out


def resize(img, factor, kernel="bicubic", antialias=True):
    """Separable resize: rows (height axis) first, then columns."""
    if not isinstance(kernel, ResampleKernel):
        kernel = ResampleKernel(kernel, antialias)
    if factor <= 0:
        raise ValueError(f"resize factor must be positive, got {factor}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    scale = float(factor)
    mr = resample_matrix(h, output_size(h, factor), scale, kernel)
    mc = resample_matrix(w, output_size(w, factor), scale, kernel)
    return (mr @ img) @ mc.T


def bicubic_upscale(lr, scale, clamp=True):
    out = resize(lr, scale, "bicubic")
    return np.clip(out, 0.0, 1.0) if clamp else out


class BicubicUpsampler:
    """Callable with the same interface as a trained model's ``upscale``."""

    def __init__(self, scale):
        self.scale = scale

    def __call__(self, lr):
        return bicubic_upscale(lr, self.scale)


# --------------------------------------------------------------------------
# LR synthesis and augmentation
# --------------------------------------------------------------------------

@dataclass
class SamplePair:
    lr: np.ndarray
    hr: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        lh, lw = self.lr.shape
        hh, hw = self.hr.shape
        if hh % lh or hw % lw or hh // lh != hw // lw:
            raise ValueError(f"HR {self.hr.shape} is not an integer multiple of LR {self.lr.shape}")

    @property
    def scale(self):
        return self.hr.shape[0] // self.lr.shape[0]


def make_lr(hr, scale=4, mode="bicubic", rng=None, source=None):
    """Downsample ``hr`` by ``scale``; ``mode`` is ``bicubic`` or ``unknown``."""
    if mode not in ("bicubic", "unknown"):
        raise ValueError(f"mode must be 'bicubic' or 'unknown', got {mode!r}")
    hr = np.asarray(hr, dtype=np.float64)
    prov = {"mode": mode, "scale": scale, "source": source, "warnings": []}
    h, w = hr.shape
    hc, wc = h - h % scale, w - w % scale
    if (hc, wc) != (h, w):
        msg = f"cropped HR from {h}x{w} to {hc}x{wc} to be divisible by {scale}"
        log.warning(msg)
        prov["warnings"].append(msg)
        hr = hr[:hc, :wc]
    if mode == "bicubic":
        kind = "bicubic"
    else:
        rng = np.random.default_rng() if rng is None else rng
        kind = KERNEL_NAMES[int(rng.integers(len(KERNEL_NAMES)))]
    prov["kernel"] = kind
    lr = np.clip(resize(hr, Fraction(1, scale), kind), 0.0, 1.0)
    return SamplePair(lr=lr, hr=hr, provenance=prov)


@dataclass(frozen=True)
class AugmentSpec:
    blur_sigma_range: tuple = (0.0, 1.0)
    noise_variance_range: tuple = (0.0, 0.005)

    def __post_init__(self):
        for name in ("blur_sigma_range", "noise_variance_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")


def gaussian_blur(img, sigma):
    """Gaussian smoothing truncated at 3 sigma, symmetric boundary."""
    if sigma <= 0:
        return img
    return gaussian_filter(img, sigma, truncate=3.0, mode="reflect")


def degrade(img, sigma, variance, rng):
    """Blur, then add zero-mean white noise, then clamp to [0, 1]."""
    out = gaussian_blur(np.asarray(img, dtype=np.float64), sigma)
    out = out + rng.normal(0.0, math.sqrt(variance), size=out.shape)
    return np.clip(out, 0.0, 1.0)


def augment(lr, spec, rng):
    """Draw blur sigma and noise variance from ``spec`` and degrade ``lr``.

    Returns ``(image, draws)``.
    """
    sigma = float(rng.uniform(*spec.blur_sigma_range))
    variance = float(rng.uniform(*spec.noise_variance_range))
    return degrade(lr, sigma, variance, rng), {"blur_sigma": sigma, "noise_variance": variance}


# --------------------------------------------------------------------------
# crop sampling
# --------------------------------------------------------------------------

def hr_window(lr_origin, lr_crop, scale):
    """HR ``(y, x, size)`` aligned with an LR crop."""
    y, x = lr_origin
    return scale * y, scale * x, scale * lr_crop


def sample_crop_batch(pairs, batch=16, lr_crop=48, scale=4, rng=None, dtype=np.float64):
    """Random scale-aligned crops: ``(lr (B,1,c,c), hr (B,1,sc,sc), origins)``.

    ``origins`` lists ``(pair_index, y, x)`` in LR pixels.
    """
    rng = np.random.default_rng() if rng is None else rng
    usable = []
    for i, p in enumerate(pairs):
        if p.scale != scale:
            raise ValueError(f"pair {i} has scale {p.scale}, expected {scale}")
        if p.lr.shape[0] >= lr_crop and p.lr.shape[1] >= lr_crop:
            usable.append(i)
        else:
            log.warning("skipping pair %d: LR %s smaller than crop %d", i, p.lr.shape, lr_crop)
    if not usable:
        raise ValueError(f"no image is at least {lr_crop}x{lr_crop} in LR")
    hc = scale * lr_crop
    lr_b = np.empty((batch, 1, lr_crop, lr_crop), dtype=dtype)
    hr_b = np.empty((batch, 1, hc, hc), dtype=dtype)
    origins = []
    for k in range(batch):
        i = usable[int(rng.integers(len(usable)))]
        p = pairs[i]
        y = int(rng.integers(p.lr.shape[0] - lr_crop + 1))
        x = int(rng.integers(p.lr.shape[1] - lr_crop + 1))
        hy, hx, _ = hr_window((y, x), lr_crop, scale)
        lr_b[k, 0] = p.lr[y:y + lr_crop, x:x + lr_crop]
        hr_b[k, 0] = p.hr[hy:hy + hc, hx:hx + hc]
        origins.append((i, y, x))
    return lr_b, hr_b, origins
