"""Feature extraction at 1/8 resolution and the all-pairs correlation pyramid.

The pyramid holds inner products between every pair of feature cells of the
two frames, scaled by 1/sqrt(D), with three extra levels produced by 2x2
average pooling over the target axes. A lookup gathers a (2r+1)^2 window of
bilinearly sampled scores around the flow-displaced position at every level
and concatenates them into one feature map.

All tensors carry a leading batch axis; spatial layout is channels-last for
volumes and lookup output, matching the (H/8, W/8, ...) grid contracts.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .flowcore import ImagePair


class ResidualBlock(nn.Module):
    """Two 3x3 convs with instance norm and an identity/projection shortcut."""

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(out_ch)
        self.norm2 = nn.InstanceNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride == 1 and in_ch == out_ch:
            self.shortcut = None
        else:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride=stride)

    def forward(self, x):
        y = self.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        if self.shortcut is not None:
            x = self.shortcut(x)
        return self.relu(x + y)


class FeatureEncoder(nn.Module):
    """Small residual CNN with three stride-2 stages down to 1/8 resolution.

    Input is a (B, 3, H, W) image in [-1, 1]; output is (B, out_dim, H/8, W/8).
    """

    def __init__(self, out_dim=128, base_channels=32, blocks_per_stage=1):
        super().__init__()
        c1 = base_channels
        c2 = base_channels * 3 // 2
        c3 = base_channels * 2
        self.stem = nn.Sequential(
            nn.Conv2d(3, c1, 7, stride=2, padding=3),
            nn.InstanceNorm2d(c1),
            nn.ReLU(inplace=True),
        )

        def stage(in_ch, out_ch, stride):
            blocks = [ResidualBlock(in_ch, out_ch, stride)]
            blocks += [ResidualBlock(out_ch, out_ch) for _ in range(blocks_per_stage - 1)]
            return nn.Sequential(*blocks)

        self.stage1 = stage(c1, c1, 1)
        self.stage2 = stage(c1, c2, 2)
        self.stage3 = stage(c2, c3, 2)
        self.head = nn.Conv2d(c3, out_dim, 1)
        self.out_dim = out_dim

    def forward(self, x):
        x = self.stem(x)
        x = self.stage1(x)
        x = self.stage2(x)
        x = self.stage3(x)
        return self.head(x)


def _image_to_tensor(img: np.ndarray) -> torch.Tensor:
    # (H, W, 3) in [0, 1] -> (1, 3, H, W) in [-1, 1]
    t = torch.from_numpy(np.ascontiguousarray(img)).float().permute(2, 0, 1)[None]
    return t * 2.0 - 1.0


def extract_features(pair, encoder: FeatureEncoder):
    """Encode both frames of an image pair into 1/8-resolution feature maps.

    `pair` is an ImagePair or a pair of (B, 3, H, W) tensors in [-1, 1].
    Returns two (B, D, H/8, W/8) tensors. H and W must be divisible by 8.
    """
    if isinstance(pair, ImagePair):
        t1, t2 = _image_to_tensor(pair.frame1), _image_to_tensor(pair.frame2)
    else:
        t1, t2 = pair
    h, w = t1.shape[-2:]
    if h % 8 or w % 8:
        raise ValueError(f"image dims must be divisible by 8, got {(h, w)}")
    return encoder(t1), encoder(t2)


class CorrPyramid:
    """4-level all-pairs correlation volume.

    `levels[k]` has shape (B, H/8, W/8, h_k, w_k) where the target axes are
    pooled by 2^k; level k+1 is the 2x2 average pooling of level k.
    """

    def __init__(self, levels: list[torch.Tensor]):
        self.levels = levels

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def lookup(self, flow8: torch.Tensor, radius: int = 4) -> torch.Tensor:
        return lookup(self, flow8, radius)


def build_pyramid(f1: torch.Tensor, f2: torch.Tensor, n_levels: int = 4) -> CorrPyramid:
    """All-pairs correlation: level-0 entry (i,j,k,l) = <f1(i,j), f2(k,l)> / sqrt(D).

    f1, f2: (B, D, H8, W8) feature maps of identical shape. Coarser levels
    average-pool the target axes.
    """
    if f1.shape != f2.shape:
        raise ValueError(f"feature shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    b, d, h, w = f1.shape
    fm1 = f1.reshape(b, d, h * w)
    fm2 = f2.reshape(b, d, h * w)
    corr = torch.matmul(fm1.transpose(1, 2), fm2) / math.sqrt(d)
    corr = corr.reshape(b, h, w, h, w)

    levels = [corr]
    flat = corr.reshape(b * h * w, 1, h, w)
    for _ in range(n_levels - 1):
        if flat.shape[-2] >= 2 and flat.shape[-1] >= 2:
            flat = F.avg_pool2d(flat, 2, stride=2)
        # once a target axis hits 1 there is nothing left to pool
        levels.append(flat.reshape(b, h, w, *flat.shape[-2:]))
    return CorrPyramid(levels)


def _bilinear_gather(level: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    """Sample level (B, N, h, w) at positions (B, N, P); taps outside read 0."""
    b, n, h, w = level.shape
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.long()
    y0 = y0.long()

    bi = torch.arange(b, device=level.device).view(b, 1, 1)
    ni = torch.arange(n, device=level.device).view(1, n, 1)

    out = None
    for dy, dx, wt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        xi = x0 + dx
        yi = y0 + dy
        inside = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
        vals = level[bi, ni, yi.clamp(0, h - 1), xi.clamp(0, w - 1)]
        term = wt * inside.to(level.dtype) * vals
        out = term if out is None else out + term
    return out


def lookup(pyramid: CorrPyramid, flow8: torch.Tensor, radius: int = 4) -> torch.Tensor:
    """Gather local correlation windows displaced by the current flow.

    flow8: (B, H8, W8, 2) displacements in 1/8-resolution cell units (i.e.
    pixel flow denormalized and divided by 8). For each source cell the
    level-k slice is sampled at ((cell + flow) / 2^k) + offsets over the
    (2r+1)^2 integer window, offsets ordered row-major in (dy, dx). Levels
    are concatenated last, giving (B, H8, W8, 4*(2r+1)^2).
    """
    if radius < 0:
        raise ValueError(f"lookup radius must be >= 0, got {radius}")
    b, h8, w8, two = flow8.shape
    if two != 2:
        raise ValueError(f"flow8 must be (B, H8, W8, 2), got {tuple(flow8.shape)}")
    n = h8 * w8
    dtype = pyramid.levels[0].dtype
    device = flow8.device

    ys, xs = torch.meshgrid(
        torch.arange(h8, device=device, dtype=dtype),
        torch.arange(w8, device=device, dtype=dtype),
        indexing="ij",
    )
    tx = (xs[None] + flow8[..., 0]).reshape(b, n, 1)
    ty = (ys[None] + flow8[..., 1]).reshape(b, n, 1)

    k = 2 * radius + 1
    offs = torch.arange(-radius, radius + 1, device=device, dtype=dtype)
    dy, dx = torch.meshgrid(offs, offs, indexing="ij")
    dx = dx.reshape(1, 1, k * k)
    dy = dy.reshape(1, 1, k * k)

    feats = []
    for lvl, level in enumerate(pyramid.levels):
        flat = level.reshape(b, n, *level.shape[-2:])
        scale = 1.0 / (2 ** lvl)
        vals = _bilinear_gather(flat, tx * scale + dx, ty * scale + dy)
        feats.append(vals.reshape(b, h8, w8, k * k))
    return torch.cat(feats, dim=-1)


def corr_channels(radius: int, n_levels: int = 4) -> int:
    """Channel count of the lookup output: n_levels * (2r+1)^2."""
    return n_levels * (2 * radius + 1) ** 2
