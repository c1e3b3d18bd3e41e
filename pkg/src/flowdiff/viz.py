"""Flow visualization with the standard Middlebury color wheel."""

from __future__ import annotations

import numpy as np

from .flowcore import FlowField


def make_colorwheel() -> np.ndarray:
    """55-color RYGCBM wheel, rows are RGB in [0, 255]."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    ncols = RY + YG + GC + CB + BM + MR
    wheel = np.zeros((ncols, 3))
    col = 0
    wheel[0:RY, 0] = 255
    wheel[0:RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col:col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col:col + YG, 1] = 255
    col += YG
    wheel[col:col + GC, 1] = 255
    wheel[col:col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col:col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col:col + CB, 2] = 255
    col += CB
    wheel[col:col + BM, 2] = 255
    wheel[col:col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col:col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col:col + MR, 0] = 255
    return wheel


def flow_to_color(flow: FlowField, max_magnitude: float | None = None) -> np.ndarray:
    """Map a flow field to an RGB uint8 image.

    Hue encodes direction, saturation magnitude. By default magnitudes are
    normalized by the per-image maximum.
    """
    u, v = flow.u, flow.v
    mag = np.sqrt(u * u + v * v)
    scale = max_magnitude if max_magnitude is not None else max(mag.max(), 1e-9)
    nu, nv = u / scale, v / scale
    rad = np.clip(np.sqrt(nu * nu + nv * nv), 0, 1)

    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-nv, -nu) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = fk - k0

    img = np.zeros(u.shape + (3,), dtype=np.uint8)
    for c in range(3):
        col0 = wheel[k0, c] / 255.0
        col1 = wheel[k1, c] / 255.0
        col = (1 - f) * col0 + f * col1
        col = 1 - rad * (1 - col)  # desaturate small motions towards white
        img[..., c] = np.floor(255 * col).astype(np.uint8)
    return img
