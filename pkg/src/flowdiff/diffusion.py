"""Noise schedule, forward diffusion and x0-parametrized ancestral sampling.

The sampler denoises a 2-channel normalized flow field conditioned on an
image pair. Chains can start from any intermediate step, which the
refinement pipelines rely on. Step indices are 1-based: t runs over
1..n_steps, with t=0 denoting the clean signal.

All per-step noise comes from a counter-based RNG keyed by (seed, t), so a
partial chain started at any step reproduces the same noise the full chain
would have used at that step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .flowcore import FlowField, ImagePair, NormFlow, denormalize_flow

# Contract: (x_t, t, pair) -> x0_hat, where x_t and x0_hat are (H, W, 2)
# normalized-flow arrays and x0_hat lies in [-1, 1]. Correlation-conditioned
# models compute their lookup feature internally from the current x_t (see
# denoiser.make_denoiser_fn).
DenoiserFn = Callable[[np.ndarray, int, ImagePair], np.ndarray]

SCHEDULE_KINDS = ("cosine", "linear")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step coefficients of a DDPM over t = 1..n_steps.

    Arrays are indexed by t-1. `alpha_bar` is the cumulative signal fraction
    and is strictly decreasing; the posterior variance of the final reverse
    step (t=1 -> 0) is exactly zero.
    """

    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    posterior_variance: np.ndarray
    # posterior mean = coef_x0[t-1] * x0_hat + coef_xt[t-1] * x_t
    posterior_coef_x0: np.ndarray
    posterior_coef_xt: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.n_steps:
            raise ValueError(f"step {t} outside 1..{self.n_steps}")


def make_schedule(n_steps: int = 64, kind: str = "cosine") -> DiffusionSchedule:
    """Build a noise schedule. `kind` is one of "cosine" or "linear"."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if kind == "cosine":
        # squared-cosine signal decay, offset keeps beta_1 small
        s = 0.008
        ts = np.arange(n_steps + 1, dtype=np.float64) / n_steps
        f = np.cos((ts + s) / (1 + s) * math.pi / 2) ** 2
        alpha_bar_full = f / f[0]
        betas = 1.0 - alpha_bar_full[1:] / alpha_bar_full[:-1]
        betas = np.clip(betas, 1e-8, 0.999)
    elif kind == "linear":
        # endpoints rescaled so total noise matches the 1000-step convention
        scale = 1000.0 / n_steps
        betas = np.linspace(1e-4 * scale, 0.02 * scale, n_steps)
        betas = np.clip(betas, 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}, expected one of {SCHEDULE_KINDS}")

    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])

    posterior_variance = betas * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    coef_x0 = np.sqrt(alpha_bar_prev) * betas / (1.0 - alpha_bar)
    coef_xt = np.sqrt(alphas) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)

    return DiffusionSchedule(
        kind=kind,
        betas=betas,
        alphas=alphas,
        alpha_bar=alpha_bar,
        posterior_variance=posterior_variance,
        posterior_coef_x0=coef_x0,
        posterior_coef_xt=coef_xt,
    )


def q_sample(x0, t: int, eps, sched: DiffusionSchedule):
    """Diffuse x0 forward to step t: sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps.

    Works elementwise on numpy arrays and torch tensors alike; `eps` must
    match x0's shape.
    """
    sched.check_step(t)
    ab = float(sched.alpha_bar[t - 1])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def reverse_step(x_t, t: int, x0_hat, sched: DiffusionSchedule, noise=None):
    """One ancestral DDPM step from x_t to x_{t-1} given a clean estimate.

    The posterior mean is a fixed linear combination of x0_hat and x_t; noise
    scaled by the posterior standard deviation is added except at t=1, where
    the reverse step is deterministic and returns x0_hat exactly.
    """
    sched.check_step(t)
    mean = (
        float(sched.posterior_coef_x0[t - 1]) * x0_hat
        + float(sched.posterior_coef_xt[t - 1]) * x_t
    )
    if t == 1 or noise is None:
        return mean
    return mean + math.sqrt(float(sched.posterior_variance[t - 1])) * noise


def _step_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(t)])


def sample(
    denoiser: DenoiserFn,
    pair: ImagePair,
    sched: DiffusionSchedule,
    start_step: Optional[int] = None,
    x_init: Optional[np.ndarray] = None,
    rng_seed: int = 0,
) -> FlowField:
    """Run the reverse chain from `start_step` down to 0 and return pixel flow.

    For a full chain (start_step == n_steps) the initial state is a standard
    Gaussian drawn from the (seed, 0) stream; partial chains require `x_init`
    produced by q_sample at start_step. Each predicted x0 is clamped to
    [-1, 1] before the posterior step. Deterministic given `rng_seed`.
    """
    n = sched.n_steps
    if start_step is None:
        start_step = n
    if not 0 <= start_step <= n:
        raise ValueError(f"start_step {start_step} outside 0..{n}")

    shape = (pair.height, pair.width, 2)
    if start_step < n and x_init is None:
        raise ValueError("partial chains need x_init from q_sample at start_step")
    if x_init is None:
        x = _step_rng(rng_seed, 0).standard_normal(shape)
    else:
        x = np.asarray(x_init, dtype=np.float64)
        if x.shape != shape:
            raise ValueError(f"x_init shape {x.shape} != expected {shape}")

    for t in range(start_step, 0, -1):
        x0_hat = np.clip(np.asarray(denoiser(x, t, pair), dtype=np.float64), -1.0, 1.0)
        if x0_hat.shape != shape:
            raise ValueError(f"denoiser returned shape {x0_hat.shape}, expected {shape}")
        noise = _step_rng(rng_seed, t).standard_normal(shape) if t > 1 else None
        x = reverse_step(x, t, x0_hat, sched, noise)

    x = np.clip(x, -1.0, 1.0)
    return denormalize_flow(NormFlow(x[..., 0], x[..., 1]))
