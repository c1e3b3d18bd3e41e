"""Conditional U-Net that predicts the clean normalized flow from a noisy one.

Two variants share one backbone: plain conditioning stacks the two RGB
frames and the noised flow into an 8-channel input; the correlation-assisted
variant additionally concatenates the multiscale correlation lookup onto the
encoder activations at 1/8 resolution. The head is a linear conv followed by
a hard clamp so exact targets at +-1 stay reachable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corrvol import FeatureEncoder, build_pyramid, corr_channels, lookup
from .diffusion import DenoiserFn
from .flowcore import ImagePair


@dataclass
class DenoiserConfig:
    base_channels: int = 16
    channel_mults: tuple = (1, 2, 3, 4)  # stages at 1, 1/2, 1/4, 1/8 resolution
    blocks_per_stage: int = 1
    time_embed_dim: int = 64
    use_correlation: bool = False
    lookup_radius: int = 4
    feature_dim: int = 128
    encoder_channels: int = 32
    encoder_blocks: int = 1
    loss: str = "l1"  # or "l2"

    def __post_init__(self):
        if len(self.channel_mults) != 4:
            raise ValueError("channel_mults must list 4 stage multipliers (down to 1/8)")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channel_mults) - 1)

    @property
    def corr_dim(self) -> int:
        return corr_channels(self.lookup_radius) if self.use_correlation else 0


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / half
    )
    args = t[:, None].double() * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb.to(t.device)


def _norm(ch):
    groups = min(8, ch)
    while ch % groups:
        groups -= 1
    return nn.GroupNorm(groups, ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, time_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(out_ch)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.shortcut(x)


class CondUNet(nn.Module):
    """U-Net over the 8-channel [frame1, frame2, x_t] stack."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_channels * m for m in cfg.channel_mults]
        tdim = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(tdim, tdim * 2), nn.SiLU(), nn.Linear(tdim * 2, tdim)
        )
        self.stem = nn.Conv2d(8, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        in_ch = widths[0]
        for i, w in enumerate(widths):
            if i > 0:
                self.downsamples.append(nn.Conv2d(in_ch, in_ch, 3, stride=2, padding=1))
            extra = cfg.corr_dim if i == len(widths) - 1 else 0
            blocks = [ResBlock(in_ch + extra, w, tdim)]
            blocks += [ResBlock(w, w, tdim) for _ in range(cfg.blocks_per_stage - 1)]
            self.down_blocks.append(nn.ModuleList(blocks))
            in_ch = w

        # global pooled context re-injected at the bottleneck; full-field
        # motion (dominant in flow statistics) is otherwise hard to aggregate
        self.global_ctx = nn.Conv2d(in_ch, in_ch, 1)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in range(len(widths) - 2, -1, -1):
            self.upsamples.append(nn.Conv2d(in_ch, widths[i], 3, padding=1))
            blocks = [ResBlock(widths[i] * 2, widths[i], tdim)]
            blocks += [ResBlock(widths[i], widths[i], tdim) for _ in range(cfg.blocks_per_stage - 1)]
            self.up_blocks.append(nn.ModuleList(blocks))
            in_ch = widths[i]

        self.out_norm = _norm(widths[0])
        self.out_conv = nn.Conv2d(widths[0], 2, 1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x_t, t, cond, corr=None):
        temb = timestep_embedding(t, self.cfg.time_embed_dim).to(x_t.dtype)
        temb = self.time_mlp(temb)

        h = self.stem(torch.cat([cond, x_t], dim=1))
        skips = []
        for i, blocks in enumerate(self.down_blocks):
            if i > 0:
                skips.append(h)
                h = self.downsamples[i - 1](h)
            if i == len(self.down_blocks) - 1 and corr is not None:
                h = torch.cat([h, corr], dim=1)
            for blk in blocks:
                h = blk(h, temb)

        h = h + self.global_ctx(h.mean(dim=(2, 3), keepdim=True))

        for up, blocks, skip in zip(self.upsamples, self.up_blocks, reversed(skips)):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = torch.cat([h, skip], dim=1)
            for blk in blocks:
                h = blk(h, temb)

        out = self.out_conv(F.silu(self.out_norm(h)))
        return out.clamp(-1.0, 1.0)


class FlowDenoiser(nn.Module):
    """Backbone plus, when enabled, the correlation feature encoder."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.unet = CondUNet(cfg)
        self.encoder = (
            FeatureEncoder(cfg.feature_dim, cfg.encoder_channels, cfg.encoder_blocks)
            if cfg.use_correlation
            else None
        )

    @property
    def use_correlation(self) -> bool:
        return self.cfg.use_correlation

    def corr_feature(self, cond: torch.Tensor, x_t: torch.Tensor) -> torch.Tensor:
        """Lookup feature for the current noised flow, net-ready (B, C, H/8, W/8).

        `cond` is the (B, 6, H, W) frame stack in [-1, 1]; x_t the normalized
        noised flow. Differentiable w.r.t. the encoder weights.
        """
        if self.encoder is None:
            raise ValueError("model was built without correlation support")
        f1 = self.encoder(cond[:, :3])
        f2 = self.encoder(cond[:, 3:])
        pyramid = build_pyramid(f1, f2)
        flow8 = flow_to_eighth_grid(x_t)
        feat = lookup(pyramid, flow8, self.cfg.lookup_radius)
        return feat.permute(0, 3, 1, 2).to(x_t.dtype)

    def forward(self, x_t, t, cond, corr=None):
        if self.cfg.use_correlation and corr is None:
            raise ValueError("correlation-enabled model requires a corr feature")
        if not self.cfg.use_correlation and corr is not None:
            raise ValueError("plain model does not accept a corr feature")
        return self.unet(x_t, t, cond, corr)


def flow_to_eighth_grid(x_t: torch.Tensor) -> torch.Tensor:
    """Noised normalized flow (B, 2, H, W) -> (B, H/8, W/8, 2) in cell units.

    Denormalizes by half width/height, then resamples to the 1/8 grid which
    also divides the displacement values by 8.
    """
    b, _, h, w = x_t.shape
    u = x_t[:, 0:1] * (w / 2.0)
    v = x_t[:, 1:2] * (h / 2.0)
    flow = torch.cat([u, v], dim=1)
    flow8 = F.interpolate(flow, size=(h // 8, w // 8), mode="bilinear", align_corners=False)
    return (flow8 / 8.0).permute(0, 2, 3, 1)


def pair_to_cond(pair: ImagePair, dtype=torch.float32) -> torch.Tensor:
    """Stack an image pair into the (1, 6, H, W) conditioning tensor in [-1, 1]."""
    stack = np.concatenate([pair.frame1, pair.frame2], axis=-1)
    t = torch.from_numpy(np.ascontiguousarray(stack)).to(dtype).permute(2, 0, 1)[None]
    return t * 2.0 - 1.0


def predict_x0(
    model: FlowDenoiser,
    x_t: np.ndarray,
    t: int,
    pair: ImagePair,
    corr: torch.Tensor | np.ndarray | None = None,
) -> np.ndarray:
    """Single-sample inference: (H, W, 2) noised flow -> clean estimate in [-1, 1].

    `corr` is required iff the model was built with correlation support; pass
    the (H/8, W/8, C) lookup output (see FlowDenoiser.corr_feature for the
    batched training path).
    """
    x_t = np.asarray(x_t)
    h, w = x_t.shape[:2]
    stride = model.cfg.stride
    if h % stride or w % stride:
        raise ValueError(f"spatial dims must be divisible by {stride}, got {(h, w)}")
    if model.cfg.use_correlation and corr is None:
        raise ValueError("correlation-enabled model requires a corr feature")
    xt = torch.from_numpy(np.ascontiguousarray(x_t)).float().permute(2, 0, 1)[None]
    cond = pair_to_cond(pair)
    corr_t = None
    if corr is not None:
        if isinstance(corr, np.ndarray):
            corr_t = torch.from_numpy(np.ascontiguousarray(corr)).float()
        else:
            corr_t = corr.float()
        if corr_t.ndim == 3:
            corr_t = corr_t.permute(2, 0, 1)[None]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(xt, torch.tensor([t]), cond, corr_t)
    finally:
        model.train(was_training)
    return out[0].permute(1, 2, 0).numpy().astype(np.float64)


def flow_loss(x0_hat: torch.Tensor, x0: torch.Tensor, valid: torch.Tensor,
              kind: str = "l1") -> torch.Tensor:
    """Masked regression loss, averaged over valid pixels and both channels."""
    if x0_hat.shape != x0.shape:
        raise ValueError(f"shape mismatch: {tuple(x0_hat.shape)} vs {tuple(x0.shape)}")
    if valid.shape != (x0.shape[0], *x0.shape[2:]):
        raise ValueError(f"valid mask shape {tuple(valid.shape)} does not match flow")
    mask = valid.to(x0.dtype)[:, None]
    n = mask.sum()
    if n.item() == 0:
        raise ValueError("cannot compute loss: valid mask is empty")
    diff = x0_hat - x0
    err = diff.abs() if kind == "l1" else diff ** 2
    return (err * mask).sum() / (2.0 * n)


def make_denoiser_fn(model: FlowDenoiser) -> DenoiserFn:
    """Adapt a trained model to the sampling contract (x_t, t, pair) -> x0_hat.

    For correlation models the feature pyramid is built once per distinct
    pair object and the lookup is recomputed from the current noised flow at
    every reverse step.
    """
    # keyed by the live pair object itself (a strong reference, so the
    # identity cannot be recycled out from under the cache)
    cache: dict = {"pair": None}

    def fn(x_t: np.ndarray, t: int, pair: ImagePair) -> np.ndarray:
        if cache["pair"] is not pair:
            cond = pair_to_cond(pair)
            pyramid = None
            if model.use_correlation:
                with torch.no_grad():
                    f1 = model.encoder(cond[:, :3])
                    f2 = model.encoder(cond[:, 3:])
                    pyramid = build_pyramid(f1, f2)
            cache.update(pair=pair, cond=cond, pyramid=pyramid)
        xt = torch.from_numpy(np.ascontiguousarray(x_t)).float().permute(2, 0, 1)[None]
        corr = None
        if model.use_correlation:
            with torch.no_grad():
                corr = lookup(cache["pyramid"], flow_to_eighth_grid(xt),
                              model.cfg.lookup_radius).permute(0, 3, 1, 2)
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                out = model(xt, torch.tensor([t]), cache["cond"], corr)
        finally:
            model.train(was_training)
        return out[0].permute(1, 2, 0).numpy().astype(np.float64)

    return fn
