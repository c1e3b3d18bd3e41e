"""Toy flow dataset generation, flow-file IO and checkpoint persistence.

The toy generator layers textured sprites over a translating background and
moves each sprite by its own similarity transform between the two frames.
Both frames evaluate the same analytic texture functions, so ground truth is
exact: the flow at a pixel is the motion of the frontmost layer covering it
in frame 1, and non-occluded pixels are warp-consistent up to bilinear
interpolation error.

Generation is pure in (seed, index); any sample is reproducible in
isolation.
"""

from __future__ import annotations

import io
import json
import struct
import zipfile
from dataclasses import dataclass, field

import cv2
import numpy as np

from .flowcore import FlowField, ImagePair

FLO_MAGIC = 202021.25
CHECKPOINT_VERSION = 1


class FlowFormatError(ValueError):
    """Malformed or truncated flow file."""


class CheckpointError(RuntimeError):
    """Unusable checkpoint: bad version, missing blobs or shape mismatch."""


# ---------------------------------------------------------------------------
# toy dataset


@dataclass(frozen=True)
class ToyConfig:
    image_size: tuple = (64, 64)
    n_sprites: tuple = (1, 2)  # inclusive range
    kinds: tuple = ("rectangle", "ellipse", "polygon")
    sprite_radius: tuple = (6.0, 13.0)
    max_translation: float = 5.0
    max_rotation: float = 0.15
    scale_change: tuple = (0.92, 1.08)
    bg_translation: float = 3.5
    texture_waves: int = 3
    wave_freq: tuple = (0.03, 0.10)
    wave_amp: tuple = (0.04, 0.16)
    gradient_amp: float = 0.004
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h % 8 or w % 8:
            raise ValueError(f"image dims must be divisible by 8, got {self.image_size}")
        if self.max_translation > min(h, w) / 2 or self.bg_translation > min(h, w) / 2:
            raise ValueError("translations must stay below half the image size")
        if self.n_sprites[0] < 0 or self.n_sprites[1] < self.n_sprites[0]:
            raise ValueError(f"bad sprite count range {self.n_sprites}")


@dataclass(frozen=True)
class Sample:
    pair: ImagePair
    flow: FlowField


def _make_texture(rng, cfg):
    """Smooth analytic texture: base color + gentle gradient + low-freq waves."""
    base = rng.uniform(0.25, 0.75, 3)
    grad = rng.uniform(-cfg.gradient_amp, cfg.gradient_amp, (3, 2))
    waves = []
    for _ in range(cfg.texture_waves):
        f = rng.uniform(*cfg.wave_freq)
        ang = rng.uniform(0, 2 * np.pi)
        fvec = np.array([np.cos(ang), np.sin(ang)]) * f
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(*cfg.wave_amp, 3)
        waves.append((fvec, phase, amp))

    def tex(x, y):
        out = np.empty(x.shape + (3,))
        for c in range(3):
            v = base[c] + grad[c, 0] * x + grad[c, 1] * y
            for fvec, phase, amp in waves:
                v = v + amp[c] * np.sin(2 * np.pi * (fvec[0] * x + fvec[1] * y) + phase)
            out[..., c] = v
        return np.clip(out, 0.0, 1.0)

    return tex


def _make_shape(rng, cfg):
    kind = cfg.kinds[rng.integers(len(cfg.kinds))]
    r = rng.uniform(*cfg.sprite_radius)
    if kind == "rectangle":
        rx, ry = r, r * rng.uniform(0.5, 1.0)

        def inside(x, y):
            return (np.abs(x) <= rx) & (np.abs(y) <= ry)

    elif kind == "ellipse":
        rx, ry = r, r * rng.uniform(0.5, 1.0)

        def inside(x, y):
            return (x / rx) ** 2 + (y / ry) ** 2 <= 1.0

    else:  # convex polygon around a circle of radius r
        m = int(rng.integers(3, 7))
        angs = np.sort(rng.uniform(0, 2 * np.pi, m))
        verts = np.stack([np.cos(angs), np.sin(angs)], axis=1) * r

        def inside(x, y):
            ok = np.ones(x.shape, dtype=bool)
            for i in range(m):
                ax, ay = verts[i]
                bx, by = verts[(i + 1) % m]
                cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax)
                ok &= cross >= 0
            return ok

    return inside


@dataclass(frozen=True)
class _Sprite:
    inside: object
    tex: object
    c1: np.ndarray
    c2: np.ndarray
    theta1: float
    theta2: float
    scale: float  # frame-2 size relative to frame-1

    def local(self, px, py, frame):
        if frame == 1:
            cx, cy, th, s = self.c1[0], self.c1[1], self.theta1, 1.0
        else:
            cx, cy, th, s = self.c2[0], self.c2[1], self.theta2, self.scale
        dx, dy = px - cx, py - cy
        cos, sin = np.cos(-th), np.sin(-th)
        return (cos * dx - sin * dy) / s, (sin * dx + cos * dy) / s

    def target(self, px, py):
        """Forward map of frame-1 positions into frame 2.

        Composed analytically as scale * R(theta2 - theta1) about c1 plus the
        center shift, so identity motion yields exactly zero displacement.
        """
        dth = self.theta2 - self.theta1
        cos, sin = self.scale * np.cos(dth), self.scale * np.sin(dth)
        dx, dy = px - self.c1[0], py - self.c1[1]
        qx = self.c2[0] + cos * dx - sin * dy
        qy = self.c2[1] + sin * dx + cos * dy
        return qx, qy


def _build_scene(cfg: ToyConfig, index: int):
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.image_size
    bg_tex = _make_texture(rng, cfg)
    bg_shift = rng.uniform(-cfg.bg_translation, cfg.bg_translation, 2)

    sprites = []
    n = int(rng.integers(cfg.n_sprites[0], cfg.n_sprites[1] + 1))
    for _ in range(n):
        inside = _make_shape(rng, cfg)
        tex = _make_texture(rng, cfg)
        margin = cfg.sprite_radius[1] * 0.5
        c1 = np.array([rng.uniform(margin, w - margin), rng.uniform(margin, h - margin)])
        delta = rng.uniform(-cfg.max_translation, cfg.max_translation, 2)
        dth = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
        th1 = rng.uniform(0, 2 * np.pi)
        scale = rng.uniform(*cfg.scale_change)
        sprites.append(_Sprite(inside, tex, c1, c1 + delta, th1, th1 + dth, scale))
    return bg_tex, bg_shift, sprites


def _render_frame(cfg, bg_tex, bg_shift, sprites, frame):
    h, w = cfg.image_size
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    shift = bg_shift if frame == 2 else np.zeros(2)
    img = bg_tex(px - shift[0], py - shift[1])
    layer = np.zeros((h, w), dtype=np.int32)
    for k, sp in enumerate(sprites, start=1):
        lx, ly = sp.local(px, py, frame)
        mask = sp.inside(lx, ly)
        img[mask] = sp.tex(lx, ly)[mask]
        layer[mask] = k
    return img, layer


def gen_toy_sample(cfg: ToyConfig, index: int, with_visibility: bool = False):
    """Generate one synthetic sample, deterministic in (cfg.seed, index).

    Returns a Sample, or (Sample, visibility) when `with_visibility` is set;
    visibility marks pixels whose flow target lands on the same layer in
    frame 2 (i.e. not occluded and in bounds), useful for consistency checks.
    """
    bg_tex, bg_shift, sprites = _build_scene(cfg, index)
    return _assemble_sample(cfg, bg_tex, bg_shift, sprites, with_visibility)


def _assemble_sample(cfg, bg_tex, bg_shift, sprites, with_visibility=False):
    h, w = cfg.image_size
    frame1, layer1 = _render_frame(cfg, bg_tex, bg_shift, sprites, 1)
    frame2, layer2 = _render_frame(cfg, bg_tex, bg_shift, sprites, 2)

    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    u = np.full((h, w), bg_shift[0])
    v = np.full((h, w), bg_shift[1])
    for k, sp in enumerate(sprites, start=1):
        mask = layer1 == k
        qx, qy = sp.target(px, py)
        u[mask] = (qx - px)[mask]
        v[mask] = (qy - py)[mask]

    sample = Sample(ImagePair(frame1, frame2), FlowField(u, v))
    if not with_visibility:
        return sample

    qx, qy = px + u, py + v
    x0 = np.floor(qx).astype(np.int64)
    y0 = np.floor(qy).astype(np.int64)
    vis = (x0 >= 0) & (y0 >= 0) & (x0 + 1 <= w - 1) & (y0 + 1 <= h - 1)
    for dy in (0, 1):
        for dx in (0, 1):
            yy = np.clip(y0 + dy, 0, h - 1)
            xx = np.clip(x0 + dx, 0, w - 1)
            vis &= layer2[yy, xx] == layer1
    return sample, vis


def toy_dataset(cfg: ToyConfig, indices) -> list[Sample]:
    return [gen_toy_sample(cfg, i) for i in indices]


# ---------------------------------------------------------------------------
# flow files


def write_flo(flow: FlowField, path) -> None:
    """Write Middlebury .flo: magic float, width, height, interleaved (u, v)."""
    data = np.stack([flow.u, flow.v], axis=-1).astype(np.float32)
    if not np.isfinite(data).all():
        raise ValueError("flow contains non-finite entries")
    h, w = flow.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(data.tobytes())


def read_flo(path) -> FlowField:
    """Read a Middlebury .flo file; inverse of write_flo, bit-exact."""
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) != 12:
            raise FlowFormatError(f"{path}: truncated header")
        magic, w, h = struct.unpack("<fii", header)
        if magic != np.float32(FLO_MAGIC):
            raise FlowFormatError(f"{path}: bad magic {magic!r}")
        if w <= 0 or h <= 0:
            raise FlowFormatError(f"{path}: bad dimensions {w}x{h}")
        payload = f.read(8 * h * w)
        if len(payload) != 8 * h * w:
            raise FlowFormatError(f"{path}: truncated payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2)
    return FlowField(data[..., 0], data[..., 1])


read_sintel_flo = read_flo  # Sintel ships plain .flo files


def read_kitti_png(path) -> FlowField:
    """Read KITTI 16-bit flow PNG: value/64 - 512, third channel validity."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FlowFormatError(f"{path}: not readable as an image")
    if img.ndim != 3 or img.shape[-1] != 3 or img.dtype != np.uint16:
        raise FlowFormatError(f"{path}: expected 16-bit 3-channel PNG")
    img = img.astype(np.float64)
    # cv2 loads BGR; KITTI stores (u, v, valid) in RGB order
    u = (img[..., 2] - 2 ** 15) / 64.0
    v = (img[..., 1] - 2 ** 15) / 64.0
    valid = img[..., 0] > 0
    u[~valid] = 0.0
    v[~valid] = 0.0
    return FlowField(u, v, valid)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    weights: dict
    ema_weights: dict
    step: int
    config: dict
    optimizer_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _savez_bytes(arrays: dict) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def _loadz(z: zipfile.ZipFile, name: str) -> dict:
    with z.open(name) as f:
        npz = np.load(io.BytesIO(f.read()))
        return {k: npz[k] for k in npz.files}


def save_checkpoint(weights: dict, ema_weights: dict, step: int, config: dict,
                    path, optimizer_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write a single-file archive: JSON manifest plus npz tensor blobs."""
    for name, arr in weights.items():
        if name in ema_weights and ema_weights[name].shape != arr.shape:
            raise ValueError(f"ema/weight shape mismatch for {name}")
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "step": int(step),
        "config": config,
        "groups": ["weights", "ema"] + (["optimizer"] if optimizer_state else []),
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as z:
        z.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        z.writestr("weights.npz", _savez_bytes(weights))
        z.writestr("ema.npz", _savez_bytes(ema_weights))
        if optimizer_state:
            z.writestr("optimizer.npz", _savez_bytes(optimizer_state["arrays"]))
            z.writestr("optimizer_meta.json", json.dumps(optimizer_state["meta"]))


def load_checkpoint(path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as z:
            manifest = json.loads(z.read("manifest.json"))
            version = manifest.get("format_version")
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"{path}: format version {version} != {CHECKPOINT_VERSION}")
            weights = _loadz(z, "weights.npz")
            ema = _loadz(z, "ema.npz")
            opt = None
            if "optimizer" in manifest.get("groups", []):
                opt = {
                    "arrays": _loadz(z, "optimizer.npz"),
                    "meta": json.loads(z.read("optimizer_meta.json")),
                }
    except (zipfile.BadZipFile, KeyError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    return Checkpoint(weights=weights, ema_weights=ema, step=manifest["step"],
                      config=manifest["config"], optimizer_state=opt,
                      extra=manifest.get("extra", {}))
