"""Training-time augmentation: photometric jitter, geometric transforms, noise.

Photometric operations change appearance only and leave the flow untouched;
geometric operations (scale, stretch, flips, crop) are applied identically
to both frames and the flow, with flow values rescaled by the spatial
factors and negated along flipped axes. Two presets bundle the parameter
choices; their constants are declared configuration, not ground truth.

Every operation is pure given (input, rng state): a fixed seed reproduces
the augmented output bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .dataio import Sample
from .flowcore import FlowField, ImagePair, resize_flow


@dataclass(frozen=True)
class AugmentConfig:
    preset: str = "raft"
    crop_size: tuple = (64, 64)
    min_scale: float = -0.2  # log2 of the spatial zoom range
    max_scale: float = 0.6
    max_stretch: float = 0.2
    stretch_prob: float = 0.5
    hflip_prob: float = 0.5
    vflip_prob: float = 0.1
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.16  # fraction of the hue circle
    asymmetric_prob: float = 0.2
    noise_enabled: bool = False
    noise_sigma_max: float = 0.04

    def __post_init__(self):
        ch, cw = self.crop_size
        if ch % 8 or cw % 8:
            raise ValueError(f"crop_size must be divisible by 8, got {self.crop_size}")
        if self.noise_sigma_max < 0:
            raise ValueError("noise_sigma_max must be >= 0")


def raft_preset(crop_size=(64, 64)) -> AugmentConfig:
    return AugmentConfig(preset="raft", crop_size=crop_size)


def raft_it_preset(crop_size=(64, 64)) -> AugmentConfig:
    """Wider spatial range, more frequent stretch, image noise enabled."""
    return AugmentConfig(
        preset="raft_it",
        crop_size=crop_size,
        min_scale=-0.4,
        max_scale=0.8,
        stretch_prob=0.8,
        noise_enabled=True,
    )


def get_preset(name: str, crop_size=(64, 64)) -> AugmentConfig:
    if name == "raft":
        return raft_preset(crop_size)
    if name == "raft_it":
        return raft_it_preset(crop_size)
    raise ValueError(f"unknown augmentation preset {name!r}")


# ---------------------------------------------------------------------------
# photometric


def _jitter_one(img, rng, cfg):
    out = img
    if cfg.brightness > 0:
        out = out * rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness)
    if cfg.contrast > 0:
        c = rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast)
        mean = out.mean()
        out = c * out + (1 - c) * mean
    if cfg.saturation > 0:
        s = rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation)
        gray = out @ np.array([0.299, 0.587, 0.114])
        out = s * out + (1 - s) * gray[..., None]
    if cfg.hue > 0:
        shift = rng.uniform(-cfg.hue, cfg.hue)
        if shift != 0.0:
            hsv = cv2.cvtColor(np.clip(out, 0, 1).astype(np.float32), cv2.COLOR_RGB2HSV)
            hsv[..., 0] = (hsv[..., 0] + shift * 360.0) % 360.0
            out = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB).astype(np.float64)
    return np.clip(out, 0.0, 1.0)


def photometric(pair: ImagePair, cfg: AugmentConfig, rng) -> ImagePair:
    """Brightness/contrast/saturation/hue jitter; flow-preserving.

    With probability `asymmetric_prob` the two frames are jittered
    independently, otherwise they share one parameter draw.
    """
    if rng.uniform() < cfg.asymmetric_prob:
        return ImagePair(_jitter_one(pair.frame1, rng, cfg),
                         _jitter_one(pair.frame2, rng, cfg))
    # shared draw: replay the same stream for both frames
    state = rng.bit_generator.state
    f1 = _jitter_one(pair.frame1, rng, cfg)
    rng.bit_generator.state = state
    f2 = _jitter_one(pair.frame2, rng, cfg)
    return ImagePair(f1, f2)


# ---------------------------------------------------------------------------
# geometric


def flip_horizontal(pair: ImagePair, flow: FlowField) -> tuple[ImagePair, FlowField]:
    new_pair = ImagePair(pair.frame1[:, ::-1], pair.frame2[:, ::-1])
    new_flow = FlowField(-flow.u[:, ::-1], flow.v[:, ::-1], flow.valid[:, ::-1])
    return new_pair, new_flow


def flip_vertical(pair: ImagePair, flow: FlowField) -> tuple[ImagePair, FlowField]:
    new_pair = ImagePair(pair.frame1[::-1], pair.frame2[::-1])
    new_flow = FlowField(flow.u[::-1], -flow.v[::-1], flow.valid[::-1])
    return new_pair, new_flow


def _resize_pair(pair, new_h, new_w):
    f1 = cv2.resize(pair.frame1, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    f2 = cv2.resize(pair.frame2, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    return ImagePair(np.clip(f1, 0, 1), np.clip(f2, 0, 1))


def geometric(pair: ImagePair, flow: FlowField, cfg: AugmentConfig, rng
              ) -> tuple[ImagePair, FlowField]:
    """Random scale/stretch, optional flips and a random crop to crop_size.

    The scale is clamped from below so the stretched image still contains the
    crop window. Flow values transform consistently with the geometry.
    """
    h, w = pair.height, pair.width
    ch, cw = cfg.crop_size
    if ch > h or cw > w:
        raise ValueError(f"crop {cfg.crop_size} larger than image {(h, w)}")

    scale = 2.0 ** rng.uniform(cfg.min_scale, cfg.max_scale)
    sx = sy = scale
    if rng.uniform() < cfg.stretch_prob:
        sx *= 2.0 ** rng.uniform(-cfg.max_stretch, cfg.max_stretch)
        sy *= 2.0 ** rng.uniform(-cfg.max_stretch, cfg.max_stretch)
    new_w = max(cw, int(round(w * sx)))
    new_h = max(ch, int(round(h * sy)))
    if (new_h, new_w) != (h, w):
        pair = _resize_pair(pair, new_h, new_w)
        flow = resize_flow(flow, new_h, new_w)

    if rng.uniform() < cfg.hflip_prob:
        pair, flow = flip_horizontal(pair, flow)
    if rng.uniform() < cfg.vflip_prob:
        pair, flow = flip_vertical(pair, flow)

    y0 = int(rng.integers(0, new_h - ch + 1))
    x0 = int(rng.integers(0, new_w - cw + 1))
    pair = ImagePair(pair.frame1[y0:y0 + ch, x0:x0 + cw],
                     pair.frame2[y0:y0 + ch, x0:x0 + cw])
    flow = FlowField(flow.u[y0:y0 + ch, x0:x0 + cw],
                     flow.v[y0:y0 + ch, x0:x0 + cw],
                     flow.valid[y0:y0 + ch, x0:x0 + cw])
    return pair, flow


# ---------------------------------------------------------------------------
# noise


def gaussian_noise(pair: ImagePair, cfg: AugmentConfig, rng, sigma=None) -> ImagePair:
    """Add i.i.d. Gaussian noise with a per-sample sigma ~ U(0, sigma_max).

    `sigma` pins the noise level explicitly (moment tests); by default it is
    drawn per sample.
    """
    if not cfg.noise_enabled or cfg.noise_sigma_max == 0:
        return pair
    if sigma is None:
        sigma = rng.uniform(0.0, cfg.noise_sigma_max)
    f1 = np.clip(pair.frame1 + rng.normal(0.0, sigma, pair.frame1.shape), 0, 1)
    f2 = np.clip(pair.frame2 + rng.normal(0.0, sigma, pair.frame2.shape), 0, 1)
    return ImagePair(f1, f2)


def augment_sample(sample: Sample, cfg: AugmentConfig, rng) -> Sample:
    """Full pipeline: photometric, then geometric, then optional noise."""
    pair = photometric(sample.pair, cfg, rng)
    pair, flow = geometric(pair, sample.flow, cfg, rng)
    pair = gaussian_noise(pair, cfg, rng)
    return Sample(pair, flow)
