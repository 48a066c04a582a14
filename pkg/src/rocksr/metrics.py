"""Image-pair quality metrics, difference maps and histograms.

MSE is the mean of squared pixel differences. PSNR uses the joint data range
of both images, ``(max(I1 u I2) - min(I1 u I2))^2 / MSE``, unless a fixed
range is given.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.signal import find_peaks


def _pair(i1, i2):
    a = np.asarray(i1, dtype=np.float64)
    b = np.asarray(i2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def mse(i1, i2):
    a, b = _pair(i1, i2)
    d = a - b
    return float(np.mean(d * d))


def psnr(i1, i2, data_range=None):
    """PSNR in dB; ``inf`` when identical, ``-inf`` when the range is zero but MSE is not."""
    a, b = _pair(i1, i2)
    err = mse(a, b)
    if err == 0:
        return math.inf
    if data_range is None:
        data_range = max(a.max(), b.max()) - min(a.min(), b.min())
    if data_range == 0:
        return -math.inf
    return 10.0 * math.log10(data_range ** 2 / err)


@dataclass
class MetricsReport:
    """Per-image rows for one method."""

    method: str
    rows: list = field(default_factory=list)  # (path, mse, psnr)

    def add(self, path, i1, i2, data_range=None):
        self.rows.append((str(path), mse(i1, i2), psnr(i1, i2, data_range)))

    @property
    def psnrs(self):
        return [r[2] for r in self.rows]

    def summary(self):
        mean, var, n_inf = aggregate(self.psnrs)
        return {"method": self.method, "count": len(self.rows), "mean_psnr": mean,
                "var_psnr": var, "infinite": n_inf}


def aggregate(values):
    """Population ``(mean, variance, n_excluded)`` over finite values."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("aggregate needs at least one value")
    finite = v[np.isfinite(v)]
    excluded = int(v.size - finite.size)
    if finite.size == 0:
        return math.nan, math.nan, excluded
    return float(finite.mean()), float(finite.var()), excluded


def write_reports(reports, csv_path=None, json_path=None):
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "method", "mse", "psnr"])
            for rep in reports:
                for path, m, p in rep.rows:
                    w.writerow([path, rep.method, repr(m), repr(p)])
    if json_path is not None:
        summary = {rep.method: rep.summary() for rep in reports}
        with open(json_path, "w") as fh:
            json.dump(summary, fh, indent=2, allow_nan=True)


@dataclass
class DifferenceMap:
    raw: np.ndarray
    peak: float

    @property
    def display(self):
        """``[0, peak]`` stretched to ``[0, 1]``."""
        if self.peak == 0:
            return np.zeros_like(self.raw)
        return self.raw / self.peak


def difference_map(i1, i2):
    a, b = _pair(i1, i2)
    raw = np.abs(a - b)
    return DifferenceMap(raw=raw, peak=float(raw.max()))


def histogram(img, bins=256):
    """Counts over ``bins`` uniform bins spanning ``[0, 1]``."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    counts, _ = np.histogram(np.clip(np.asarray(img, dtype=np.float64), 0, 1), bins=bins, range=(0.0, 1.0))
    return counts


def write_histogram_csv(counts, path):
    bins = len(counts)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "lower", "upper", "count"])
        for k, c in enumerate(counts):
            w.writerow([k, k / bins, (k + 1) / bins, int(c)])


def valley_to_peak_ratio(counts, smooth=5, prominence=0.05):
    """Depth of the valley between the two dominant histogram modes.

    The histogram is smoothed with a ``smooth``-bin moving average; the two
    most prominent peaks (prominence at least ``prominence`` times the
    highest count) are taken as phase peaks and the ratio of the lowest
    count between them to the smaller peak is returned. Lower is a cleaner
    phase separation; 1.0 means no separable second mode.
    """
    c = np.asarray(counts, dtype=np.float64)
    if smooth > 1:
        c = np.convolve(c, np.ones(smooth) / smooth, mode="same")
    if c.max() <= 0:
        return 1.0
    # zero-pad so modes touching either end of the range still count as peaks
    padded = np.concatenate([[0.0], c, [0.0]])
    peaks, props = find_peaks(padded, prominence=prominence * c.max())
    if peaks.size < 2:
        return 1.0
    top = peaks[np.argsort(props["prominences"])[-2:]] - 1
    lo, hi = sorted(top)
    valley = c[lo:hi + 1].min()
    return float(valley / min(c[lo], c[hi]))


def sobel_edges(img, quantile=0.8):
    """Boolean mask of pixels whose Sobel gradient magnitude is in the top ``1 - quantile``."""
    img = np.asarray(img, dtype=np.float64)
    mag = np.hypot(ndimage.sobel(img, axis=0), ndimage.sobel(img, axis=1))
    return mag > np.quantile(mag, quantile)


def intra_region_roughness(img, edge_mask, margin=2):
    """Mean absolute neighbour difference over pixels at least ``margin`` px from an edge.

    A noise proxy: flat phases of a clean image score near zero.
    """
    img = np.asarray(img, dtype=np.float64)
    near_edge = ndimage.binary_dilation(edge_mask, iterations=margin) if margin else edge_mask
    keep = ~near_edge
    dy = np.abs(np.diff(img, axis=0))
    dx = np.abs(np.diff(img, axis=1))
    ky = keep[1:, :] & keep[:-1, :]
    kx = keep[:, 1:] & keep[:, :-1]
    total = dy[ky].sum() + dx[kx].sum()
    count = ky.sum() + kx.sum()
    if count == 0:
        raise ValueError("edge mask leaves no interior pixels")
    return float(total / count)
