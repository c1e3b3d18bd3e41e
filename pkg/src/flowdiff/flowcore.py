"""Core flow containers, normalization, warping, resizing and evaluation metrics.

Conventions used across the package:

* flow fields are backward-style displacements: a pixel at (x, y) in frame 1
  corresponds to (x + u, y + v) in frame 2,
* `u` is horizontal (columns), `v` vertical (rows),
* images are RGB float arrays in [0, 1], shape (H, W, 3).

Everything here is a pure function on immutable inputs and safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np


@dataclass(frozen=True)
class FlowField:
    """Dense per-pixel displacement map in pixel units.

    `valid` marks pixels with known ground truth (all-true for dense data).
    """

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or u.shape != v.shape:
            raise ValueError(f"u/v must be 2D with equal shape, got {u.shape} vs {v.shape}")
        valid = self.valid
        if valid is None:
            valid = np.ones(u.shape, dtype=bool)
        else:
            valid = np.asarray(valid, dtype=bool)
            if valid.shape != u.shape:
                raise ValueError(f"valid mask shape {valid.shape} != flow shape {u.shape}")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise ValueError("flow contains non-finite entries")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def to_array(self) -> np.ndarray:
        """Stack to (H, W, 2) with channels (u, v)."""
        return np.stack([self.u, self.v], axis=-1)

    @staticmethod
    def from_array(arr: np.ndarray, valid: np.ndarray | None = None) -> "FlowField":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[-1] != 2:
            raise ValueError(f"expected (H, W, 2) array, got {arr.shape}")
        return FlowField(arr[..., 0], arr[..., 1], valid)


@dataclass(frozen=True)
class NormFlow:
    """Flow normalized to [-1, 1] by half the image width/height."""

    nu: np.ndarray
    nv: np.ndarray

    def __post_init__(self):
        nu = np.asarray(self.nu, dtype=np.float64)
        nv = np.asarray(self.nv, dtype=np.float64)
        if nu.ndim != 2 or nu.shape != nv.shape:
            raise ValueError(f"nu/nv must be 2D with equal shape, got {nu.shape} vs {nv.shape}")
        if not (np.isfinite(nu).all() and np.isfinite(nv).all()):
            raise ValueError("normalized flow contains non-finite entries")
        if np.abs(nu).max(initial=0.0) > 1.0 + 1e-9 or np.abs(nv).max(initial=0.0) > 1.0 + 1e-9:
            raise ValueError("normalized flow lies outside [-1, 1]")
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "nv", nv)

    @property
    def height(self) -> int:
        return self.nu.shape[0]

    @property
    def width(self) -> int:
        return self.nu.shape[1]

    def to_array(self) -> np.ndarray:
        return np.stack([self.nu, self.nv], axis=-1)

    @staticmethod
    def from_array(arr: np.ndarray) -> "NormFlow":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[-1] != 2:
            raise ValueError(f"expected (H, W, 2) array, got {arr.shape}")
        return NormFlow(arr[..., 0], arr[..., 1])


@dataclass(frozen=True)
class ImagePair:
    """Two RGB frames in [0, 1], the condition for flow estimation."""

    frame1: np.ndarray
    frame2: np.ndarray

    def __post_init__(self):
        f1 = np.asarray(self.frame1, dtype=np.float64)
        f2 = np.asarray(self.frame2, dtype=np.float64)
        for name, f in (("frame1", f1), ("frame2", f2)):
            if f.ndim != 3 or f.shape[-1] != 3:
                raise ValueError(f"{name} must be (H, W, 3), got {f.shape}")
        if f1.shape != f2.shape:
            raise ValueError(f"frames disagree on shape: {f1.shape} vs {f2.shape}")
        if f1.min(initial=0.0) < -1e-9 or f1.max(initial=0.0) > 1 + 1e-9 \
                or f2.min(initial=0.0) < -1e-9 or f2.max(initial=0.0) > 1 + 1e-9:
            raise ValueError("frame values must lie in [0, 1]")
        object.__setattr__(self, "frame1", f1)
        object.__setattr__(self, "frame2", f2)

    @property
    def height(self) -> int:
        return self.frame1.shape[0]

    @property
    def width(self) -> int:
        return self.frame1.shape[1]


@dataclass(frozen=True)
class FlowMetrics:
    epe: float
    fl_all: float  # percent in [0, 100]
    n_valid: int = 0


def normalize_flow(flow: FlowField) -> NormFlow:
    """Map pixel displacements into [-1, 1] using the field's width and height.

    nu = clamp(2u / W, -1, 1) and nv = clamp(2v / H, -1, 1). Inverse of
    :func:`denormalize_flow` wherever no clamping occurred.
    """
    h, w = flow.shape
    nu = np.clip(2.0 * flow.u / w, -1.0, 1.0)
    nv = np.clip(2.0 * flow.v / h, -1.0, 1.0)
    return NormFlow(nu, nv)


def denormalize_flow(nflow: NormFlow) -> FlowField:
    """Invert :func:`normalize_flow`: u = nu * W / 2, v = nv * H / 2."""
    h, w = nflow.nu.shape
    return FlowField(nflow.nu * (w / 2.0), nflow.nv * (h / 2.0))


def backward_warp(image: np.ndarray, flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample `image` at positions displaced by `flow`.

    warped(x, y) = image(x + u, y + v) with bilinear interpolation. Taps that
    fall outside the image read zero. Returns (warped, in_bounds) where
    in_bounds marks pixels whose four sample taps all lie inside the image.
    """
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    if image.ndim != 3:
        raise ValueError(f"image must be (H, W) or (H, W, C), got shape {image.shape}")
    h, w = image.shape[:2]
    if flow.shape != (h, w):
        raise ValueError(f"flow shape {flow.shape} != image shape {(h, w)}")

    ygrid, xgrid = np.mgrid[0:h, 0:w].astype(np.float64)
    xs = xgrid + flow.u
    ys = ygrid + flow.v

    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1
    fx = xs - x0
    fy = ys - y0

    in_bounds = (x0 >= 0) & (y0 >= 0) & (x1 <= w - 1) & (y1 <= h - 1)

    warped = np.zeros_like(image)
    for yi, xi, wt in (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x1, (1 - fy) * fx),
        (y1, x0, fy * (1 - fx)),
        (y1, x1, fy * fx),
    ):
        inside = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
        vals = image[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        warped += (wt * inside)[..., None] * vals

    if squeeze:
        warped = warped[..., 0]
    return warped, in_bounds


def resize_flow(flow: FlowField, new_height: int, new_width: int) -> FlowField:
    """Bilinearly resample a flow field, rescaling displacement magnitudes.

    u is multiplied by new_width / width and v by new_height / height so the
    field keeps pointing at the same scene content.
    """
    if new_height <= 0 or new_width <= 0:
        raise ValueError(f"target dims must be positive, got ({new_height}, {new_width})")
    h, w = flow.shape
    if (new_height, new_width) == (h, w):
        return flow
    sx = new_width / w
    sy = new_height / h
    u = cv2.resize(flow.u, (new_width, new_height), interpolation=cv2.INTER_LINEAR) * sx
    v = cv2.resize(flow.v, (new_width, new_height), interpolation=cv2.INTER_LINEAR) * sy
    valid = cv2.resize(flow.valid.astype(np.uint8), (new_width, new_height),
                       interpolation=cv2.INTER_NEAREST).astype(bool)
    return FlowField(u, v, valid)


def compute_metrics(pred: FlowField, gt: FlowField) -> FlowMetrics:
    """End-point error and Fl-all outlier rate over gt's valid pixels.

    Fl-all follows the KITTI convention: a pixel is an outlier when its error
    exceeds 3 px and 5% of the ground-truth magnitude.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    mask = gt.valid
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cannot evaluate: ground-truth valid mask is empty")
    du = pred.u - gt.u
    dv = pred.v - gt.v
    err = np.sqrt(du * du + dv * dv)[mask]
    mag = np.sqrt(gt.u * gt.u + gt.v * gt.v)[mask]
    outlier = (err > 3.0) & (err > 0.05 * mag)
    return FlowMetrics(epe=float(err.mean()), fl_all=float(100.0 * outlier.mean()), n_valid=n)
