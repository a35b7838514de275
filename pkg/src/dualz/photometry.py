"""Fixed-aperture photometry on particle crops."""
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=16)
def disk_mask(crop_px, radius=5):
    c = crop_px // 2
    yy, xx = np.mgrid[:crop_px, :crop_px]
    m = (yy - c) ** 2 + (xx - c) ** 2 <= radius * radius
    m.setflags(write=False)
    return m


@lru_cache(maxsize=16)
def border_mask(crop_px, width=2):
    m = np.zeros((crop_px, crop_px), dtype=bool)
    m[:width, :] = m[-width:, :] = True
    m[:, :width] = m[:, -width:] = True
    m.setflags(write=False)
    return m


def aperture_brightness(pixels, radius=5, ring_width=2):
    """Background-subtracted mean over the central disk.

    Returns ``(signal, ring_std)``; the background is the mean of the border
    ring and ``ring_std`` its pixel standard deviation.
    """
    px = np.asarray(pixels, dtype=np.float64)
    n = px.shape[-1]
    ring = px[..., border_mask(n, ring_width)]
    disk = px[..., disk_mask(n, radius)]
    bg = ring.mean(axis=-1)
    return disk.mean(axis=-1) - bg, ring.std(axis=-1)
