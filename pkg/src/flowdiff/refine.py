"""Patch-wise high-resolution inference with overlap blending.

Both refinement schemes share the same recipe for the coarse stage: sample
the full field of view at low resolution, then bilinearly upsample to the
input size. Coarse-to-fine re-noises that upsampled flow to an intermediate
step T and denoises each patch from there; warp-refine instead warps frame 2
by the coarse flow and diffuses a small residual flow per patch, conditioned
on (frame1, warped2), adding the merged residual back onto the coarse flow.

Patches are processed sequentially in window order with per-patch derived
seeds, so every run is bit-deterministic under a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .diffusion import DenoiserFn, DiffusionSchedule, q_sample, sample
from .flowcore import (
    FlowField,
    ImagePair,
    backward_warp,
    normalize_flow,
    resize_flow,
)


@dataclass(frozen=True)
class TileSet:
    """Overlapping patch windows plus partition-of-unity blend weights."""

    windows: tuple  # of (top, left, h, w)
    weights: tuple  # of (h, w) arrays, summing to 1 at every covered pixel
    full_shape: tuple

    @property
    def n_windows(self) -> int:
        return len(self.windows)


@dataclass(frozen=True)
class RefineConfig:
    T: int = 4  # intermediate start step of the patch chains
    patch_size: tuple = (64, 64)
    overlap: float = 0.5
    mode: str = "warp_refine"  # {coarse_to_fine, warp_refine, none}
    low_res: tuple = (64, 64)

    def __post_init__(self):
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if not 0 <= self.overlap < 1:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")
        ph, pw = self.patch_size
        if ph % 8 or pw % 8:
            raise ValueError(f"patch dims must be divisible by 8, got {self.patch_size}")
        if self.mode not in ("coarse_to_fine", "warp_refine", "none"):
            raise ValueError(f"unknown refine mode {self.mode!r}")


def _axis_positions(full: int, patch: int, overlap: float) -> list[int]:
    if patch > full:
        raise ValueError(f"patch size {patch} exceeds frame size {full}")
    stride = max(1, int(round(patch * (1.0 - overlap))))
    positions = list(range(0, full - patch + 1, stride))
    if positions[-1] != full - patch:  # edge-align the last window
        positions.append(full - patch)
    return positions


def _axis_ramp(length: int, ramp: int, fade_lo: bool, fade_hi: bool) -> np.ndarray:
    """Strictly positive linear ramp profile over one axis of a window."""
    prof = np.ones(length)
    ramp = min(ramp, length)
    if ramp > 0:
        rise = np.arange(1, ramp + 1) / (ramp + 1)
        if fade_lo:
            prof[:ramp] = np.minimum(prof[:ramp], rise)
        if fade_hi:
            prof[length - ramp:] = np.minimum(prof[length - ramp:], rise[::-1])
    return prof


def make_tiles(full_shape: tuple, patch_size: tuple, overlap: float) -> TileSet:
    """Regular tiling with edge-aligned last row/column and linear-ramp blending.

    Raw separable ramps fade towards interior window edges and are then
    renormalized per pixel so overlapping weights sum to exactly one.
    """
    fh, fw = full_shape
    ph, pw = patch_size
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    tops = _axis_positions(fh, ph, overlap)
    lefts = _axis_positions(fw, pw, overlap)
    ramp_h = ph - max(1, int(round(ph * (1.0 - overlap))))
    ramp_w = pw - max(1, int(round(pw * (1.0 - overlap))))

    windows = []
    raws = []
    for ti, top in enumerate(tops):
        for li, left in enumerate(lefts):
            py = _axis_ramp(ph, ramp_h, fade_lo=ti > 0, fade_hi=ti < len(tops) - 1)
            px = _axis_ramp(pw, ramp_w, fade_lo=li > 0, fade_hi=li < len(lefts) - 1)
            windows.append((top, left, ph, pw))
            raws.append(np.outer(py, px))

    total = np.zeros(full_shape)
    for (top, left, h, w), raw in zip(windows, raws):
        total[top:top + h, left:left + w] += raw
    weights = [raw / total[top:top + h, left:left + w]
               for (top, left, h, w), raw in zip(windows, raws)]
    return TileSet(tuple(windows), tuple(weights), (fh, fw))


def merge(patch_flows: list, tiles: TileSet) -> FlowField:
    """Blend per-window flows into one field using the tile weights."""
    if len(patch_flows) != tiles.n_windows:
        raise ValueError(
            f"got {len(patch_flows)} patch flows for {tiles.n_windows} windows")
    u = np.zeros(tiles.full_shape)
    v = np.zeros(tiles.full_shape)
    for flow, (top, left, h, w), weight in zip(patch_flows, tiles.windows, tiles.weights):
        if flow.shape != (h, w):
            raise ValueError(f"patch flow shape {flow.shape} != window {(h, w)}")
        u[top:top + h, left:left + w] += weight * flow.u
        v[top:top + h, left:left + w] += weight * flow.v
    return FlowField(u, v)


def tile_inconsistency(patch_flows: list, tiles: TileSet) -> float:
    """Mean absolute flow disagreement between overlapping patches.

    Quantifies cross-seam inconsistency before blending: for every pixel
    covered by several windows, the pairwise |difference| of their predicted
    flows, averaged over both channels and all overlapping pairs.
    """
    total = 0.0
    count = 0
    n = tiles.n_windows
    for i in range(n):
        ti, li, hi, wi = tiles.windows[i]
        for j in range(i + 1, n):
            tj, lj, hj, wj = tiles.windows[j]
            top = max(ti, tj)
            bottom = min(ti + hi, tj + hj)
            left = max(li, lj)
            right = min(li + wi, lj + wj)
            if top >= bottom or left >= right:
                continue
            fi = patch_flows[i]
            fj = patch_flows[j]
            ui = fi.u[top - ti:bottom - ti, left - li:right - li]
            vi = fi.v[top - ti:bottom - ti, left - li:right - li]
            uj = fj.u[top - tj:bottom - tj, left - lj:right - lj]
            vj = fj.v[top - tj:bottom - tj, left - lj:right - lj]
            total += np.abs(ui - uj).sum() + np.abs(vi - vj).sum()
            count += 2 * ui.size
    return total / count if count else 0.0


def derive_seed(seed: int, index: int) -> int:
    """Well-mixed per-patch seed, stable across runs."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _crop_pair(pair: ImagePair, top, left, h, w) -> ImagePair:
    return ImagePair(pair.frame1[top:top + h, left:left + w],
                     pair.frame2[top:top + h, left:left + w])


def _crop_flow(flow: FlowField, top, left, h, w) -> FlowField:
    return FlowField(flow.u[top:top + h, left:left + w],
                     flow.v[top:top + h, left:left + w],
                     flow.valid[top:top + h, left:left + w])


def _resize_pair(pair: ImagePair, h, w) -> ImagePair:
    f1 = np.clip(cv2.resize(pair.frame1, (w, h), interpolation=cv2.INTER_LINEAR), 0, 1)
    f2 = np.clip(cv2.resize(pair.frame2, (w, h), interpolation=cv2.INTER_LINEAR), 0, 1)
    return ImagePair(f1, f2)


def _coarse_flow(denoiser, pair, cfg, sched, seed) -> FlowField:
    low_pair = _resize_pair(pair, *cfg.low_res)
    coarse = sample(denoiser, low_pair, sched, rng_seed=derive_seed(seed, 0))
    return resize_flow(coarse, pair.height, pair.width)


def _run_patches(denoiser, sched, tiles, T, seed, cond_for, x0_for):
    """Partial chain per window: q_sample x0 to T, then denoise from T."""
    flows = []
    for i, (top, left, h, w) in enumerate(tiles.windows):
        patch_seed = derive_seed(seed, i + 1)
        x0 = x0_for(top, left, h, w)
        eps = np.random.default_rng([patch_seed, 0]).standard_normal(x0.shape)
        x_init = q_sample(x0, T, eps, sched)
        flows.append(sample(denoiser, cond_for(top, left, h, w), sched,
                            start_step=T, x_init=x_init, rng_seed=patch_seed))
    return flows


def coarse_to_fine(denoiser: DenoiserFn, pair: ImagePair, cfg: RefineConfig,
                   sched: DiffusionSchedule, seed: int = 0,
                   return_details: bool = False):
    """Low-resolution full sample, upsample, re-noise to T and denoise per patch.

    T = 0 returns the upsampled coarse flow unchanged.
    """
    if cfg.T > sched.n_steps:
        raise ValueError(f"T={cfg.T} exceeds the schedule's {sched.n_steps} steps")
    f = _coarse_flow(denoiser, pair, cfg, sched, seed)
    if cfg.T == 0:
        return (f, {"coarse": f, "patch_flows": [], "tiles": None}) if return_details else f

    tiles = make_tiles((pair.height, pair.width), cfg.patch_size, cfg.overlap)
    patch_flows = _run_patches(
        denoiser, sched, tiles, cfg.T, seed,
        cond_for=lambda top, left, h, w: _crop_pair(pair, top, left, h, w),
        x0_for=lambda top, left, h, w: normalize_flow(
            _crop_flow(f, top, left, h, w)).to_array(),
    )
    merged = merge(patch_flows, tiles)
    if return_details:
        return merged, {"coarse": f, "patch_flows": patch_flows, "tiles": tiles}
    return merged


def warp_refine(denoiser: DenoiserFn, pair: ImagePair, cfg: RefineConfig,
                sched: DiffusionSchedule, seed: int = 0,
                return_details: bool = False):
    """Warp frame 2 by the coarse flow, then diffuse a per-patch residual.

    The residual chains start from the forward-diffused zero residual at step
    T, conditioned on (frame1, warped2); the merged residual is added back
    onto the upsampled coarse flow.
    """
    if cfg.T > sched.n_steps:
        raise ValueError(f"T={cfg.T} exceeds the schedule's {sched.n_steps} steps")
    f = _coarse_flow(denoiser, pair, cfg, sched, seed)
    if cfg.T == 0:
        return (f, {"coarse": f, "residual": None, "patch_flows": [],
                    "tiles": None}) if return_details else f

    warped2, _ = backward_warp(pair.frame2, f)
    warp_pair = ImagePair(pair.frame1, np.clip(warped2, 0.0, 1.0))

    tiles = make_tiles((pair.height, pair.width), cfg.patch_size, cfg.overlap)
    patch_flows = _run_patches(
        denoiser, sched, tiles, cfg.T, seed,
        cond_for=lambda top, left, h, w: _crop_pair(warp_pair, top, left, h, w),
        x0_for=lambda top, left, h, w: np.zeros((h, w, 2)),
    )
    residual = merge(patch_flows, tiles)
    out = FlowField(f.u + residual.u, f.v + residual.v)
    if return_details:
        return out, {"coarse": f, "residual": residual,
                     "patch_flows": patch_flows, "tiles": tiles}
    return out
