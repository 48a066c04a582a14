"""Synthetic rock-like grain textures for demos and desk-scale experiments."""
import numpy as np
from scipy import ndimage


def grain_texture(size=256, rng=None, porosity_target=0.35, radius_range=(6.0, 20.0),
                  pore_level=0.18, grain_level=0.72, psf_sigma=0.7, noise_std=0.015):
    """Two-phase image of overlapping elliptical grains in a darker pore space.

    Mimics a clean sandstone micro-CT slice: sharp grain/pore interfaces
    softened by a small point-spread function, per-grain intensity
    variation and weak detector noise.
    """
    rng = np.random.default_rng() if rng is None else rng
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), pore_level)
    solid = np.zeros((size, size), dtype=bool)
    for _ in range(20 * size):
        if 1.0 - solid.mean() <= porosity_target:
            break
        cy, cx = rng.uniform(-10, size + 10, size=2)
        a = rng.uniform(*radius_range)
        b = a * rng.uniform(0.55, 1.0)
        t = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(t) + dy * np.sin(t)) / a
        v = (-dx * np.sin(t) + dy * np.cos(t)) / b
        grain = (u * u + v * v) <= 1.0
        img[grain] = grain_level + rng.normal(0.0, 0.04)
        solid |= grain
    shading = ndimage.gaussian_filter(rng.normal(size=(size, size)), 8.0)
    shading *= 0.03 / (shading.std() + 1e-12)
    img = ndimage.gaussian_filter(img + shading, psf_sigma)
    img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def grain_stack(count, size=256, seed=0, **kw):
    ss = np.random.SeedSequence(seed)
    return [grain_texture(size, np.random.default_rng(s), **kw) for s in ss.spawn(count)]
