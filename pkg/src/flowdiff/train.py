"""Training loop: sampled-timestep denoising loss, AdamW, EMA, LR halving.

The per-step recipe follows the standard conditional-DDPM regression setup:
draw one timestep per sample, forward-diffuse the normalized flow, predict
the clean flow from the 8-channel conditioning (plus the correlation lookup
when enabled) and take one optimizer step on the masked loss. Learning-rate
halving is automated: a spike above a multiple of the running median, or a
non-finite loss, halves the rate (never below the floor), and non-finite
steps are skipped entirely.

Everything is keyed by counter-based RNG streams, so a run is reproducible
bit for bit on a fixed platform. Training runs in full precision; reduced
precision is a throughput concern of large-scale setups and has no bearing
on any contract here.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import dataio, refine as refine_mod
from .dataio import CheckpointError, Sample
from .denoiser import FlowDenoiser, flow_loss, make_denoiser_fn
from .diffusion import DiffusionSchedule, sample as sample_chain
from .flowcore import FlowField, FlowMetrics, compute_metrics, normalize_flow


@dataclass
class TrainConfig:
    batch_size: int = 8  # 64 at full scale
    lr: float = 1e-4
    total_steps: int = 2000
    ema_decay: float = 0.999  # 0.9999 at full scale
    eval_every: int = 500
    lr_window: int = 200
    lr_spike_factor: float = 5.0
    lr_floor: float = 1e-6
    seed: int = 0
    n_train: Optional[int] = None  # cycle a finite index set when given

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")


@dataclass
class TrainState:
    model: FlowDenoiser
    optimizer: torch.optim.Optimizer
    ema: dict
    cfg: TrainConfig
    step: int = 0
    lr: float = 1e-4
    loss_history: list = field(default_factory=list)
    skipped_steps: int = 0

    @property
    def seed(self) -> int:
        return self.cfg.seed


def init_state(model: FlowDenoiser, cfg: TrainConfig) -> TrainState:
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr)
    ema = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return TrainState(model=model, optimizer=opt, ema=ema, cfg=cfg, lr=cfg.lr)


def _batch_tensors(batch: list, rng, sched):
    x0s, conds, valids, ts, xts = [], [], [], [], []
    for s in batch:
        norm = normalize_flow(s.flow).to_array()
        x0 = torch.from_numpy(norm).float().permute(2, 0, 1)
        cond = np.concatenate([s.pair.frame1, s.pair.frame2], axis=-1)
        cond = torch.from_numpy(cond).float().permute(2, 0, 1) * 2.0 - 1.0
        t = int(rng.integers(1, sched.n_steps + 1))
        eps = torch.from_numpy(rng.standard_normal(x0.shape)).float()
        ab = float(sched.alpha_bar[t - 1])
        xt = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
        x0s.append(x0)
        conds.append(cond)
        valids.append(torch.from_numpy(s.flow.valid))
        ts.append(t)
        xts.append(xt)
    return (torch.stack(x0s), torch.stack(conds), torch.stack(valids),
            torch.tensor(ts), torch.stack(xts))


def train_step(state: TrainState, batch: list, sched: DiffusionSchedule):
    """One optimization step on a batch of Samples; returns (state, loss).

    Deterministic given (state, batch): the timesteps and noise come from an
    RNG keyed by (seed, step). A non-finite loss skips the update and halves
    the learning rate.
    """
    if not batch:
        raise ValueError("empty batch")
    cfg = state.cfg
    rng = np.random.default_rng([state.seed, 2, state.step])
    x0, cond, valid, t, x_t = _batch_tensors(batch, rng, sched)

    model = state.model
    model.train()
    corr = model.corr_feature(cond, x_t) if model.use_correlation else None
    loss = flow_loss(model(x_t, t, cond, corr), x0, valid, kind=model.cfg.loss)
    loss_val = float(loss.item())

    state.loss_history.append(loss_val)
    if not math.isfinite(loss_val):
        state.skipped_steps += 1
        state.lr = max(state.lr / 2.0, cfg.lr_floor)
        state.step += 1
        return state, loss_val

    for group in state.optimizer.param_groups:
        group["lr"] = state.lr
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    # warm up the decay so early EMA is not dominated by the random init
    decay = min(cfg.ema_decay, (1.0 + state.step) / (10.0 + state.step))
    ema_update(state.ema, model.state_dict(), decay)

    state.lr = lr_policy(state.loss_history, state.lr, window=cfg.lr_window,
                         spike_factor=cfg.lr_spike_factor, floor=cfg.lr_floor)
    state.step += 1
    return state, loss_val


def ema_update(ema_weights: dict, weights: dict, decay: float) -> dict:
    """ema <- decay * ema + (1 - decay) * weights, elementwise in place."""
    for name, w in weights.items():
        if name not in ema_weights:
            raise ValueError(f"ema is missing entry {name!r}")
        e = ema_weights[name]
        if e.shape != w.shape:
            raise ValueError(f"shape mismatch for {name!r}: {tuple(e.shape)} vs {tuple(w.shape)}")
        if e.dtype.is_floating_point:
            e.mul_(decay).add_(w.detach(), alpha=1.0 - decay)
        else:
            e.copy_(w)
    return ema_weights


def lr_policy(history: list, current_lr: float, window: int = 200,
              spike_factor: float = 5.0, floor: float = 1e-6) -> float:
    """Halve the rate on instability; otherwise leave it unchanged.

    Fires when the latest loss is non-finite, or exceeds `spike_factor` times
    the median of the preceding `window` losses (only once that much history
    exists). The rate never rises and never drops below `floor`.
    """
    if not history:
        return current_lr
    last = history[-1]
    if not math.isfinite(last):
        return max(current_lr / 2.0, floor)
    if len(history) > window:
        med = float(np.median(history[-(window + 1):-1]))
        if last > spike_factor * med:
            return max(current_lr / 2.0, floor)
    return max(current_lr, floor)


class swap_in_weights:
    """Temporarily load a weight dict into a model (EMA evaluation)."""

    def __init__(self, model, weights: dict):
        self.model = model
        self.weights = weights
        self.backup = None

    def __enter__(self):
        self.backup = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
        self.model.load_state_dict(self.weights)
        return self.model

    def __exit__(self, *exc):
        self.model.load_state_dict(self.backup)
        return False


def evaluate_with(make_fn: Callable[[Sample], Callable], dataset: list,
                  sched: DiffusionSchedule, refine_cfg=None,
                  seed: int = 0) -> FlowMetrics:
    """Evaluation core: `make_fn(sample)` yields the denoiser for that sample.

    Metrics follow the per-image convention: the aggregate EPE/Fl-all is the
    mean of per-image values, n_valid the total pixel count.
    """
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    epes, fls, n = [], [], 0
    for i, s in enumerate(dataset):
        fn = make_fn(s)
        s_seed = refine_mod.derive_seed(seed, 1000 + i)
        if refine_cfg is None or refine_cfg.mode == "none":
            pred = sample_chain(fn, s.pair, sched, rng_seed=s_seed)
        elif refine_cfg.mode == "coarse_to_fine":
            pred = refine_mod.coarse_to_fine(fn, s.pair, refine_cfg, sched, seed=s_seed)
        else:
            pred = refine_mod.warp_refine(fn, s.pair, refine_cfg, sched, seed=s_seed)
        m = compute_metrics(pred, s.flow)
        epes.append(m.epe)
        fls.append(m.fl_all)
        n += m.n_valid
    return FlowMetrics(epe=float(np.mean(epes)), fl_all=float(np.mean(fls)), n_valid=n)


def evaluate(model: FlowDenoiser, dataset: list, sched: DiffusionSchedule,
             refine_cfg=None, seed: int = 0) -> FlowMetrics:
    """Full diffusion sampling per sample, metrics as the mean of per-image values."""
    fn = make_denoiser_fn(model)
    return evaluate_with(lambda s: fn, dataset, sched, refine_cfg, seed)


def oracle_denoiser_for(sample: Sample) -> Callable:
    """Test hook: a perfect denoiser that returns the sample's normalized
    ground truth, resized to the resolution it is queried at."""
    from .flowcore import resize_flow

    def fn(x_t, t, pair):
        h, w = x_t.shape[:2]
        gt = sample.flow if sample.flow.shape == (h, w) else resize_flow(sample.flow, h, w)
        return normalize_flow(gt).to_array()

    return fn


def zero_flow_metrics(dataset: list) -> FlowMetrics:
    """Metrics of the trivial all-zero predictor, the evaluation baseline."""
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    epes, fls, n = [], [], 0
    for s in dataset:
        zero = FlowField(np.zeros(s.flow.shape), np.zeros(s.flow.shape))
        m = compute_metrics(zero, s.flow)
        epes.append(m.epe)
        fls.append(m.fl_all)
        n += m.n_valid
    return FlowMetrics(epe=float(np.mean(epes)), fl_all=float(np.mean(fls)), n_valid=n)


# ---------------------------------------------------------------------------
# checkpoint bridging


def weights_to_numpy(weights: dict) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in weights.items()}


def load_weights_into(model, np_weights: dict) -> None:
    """Apply a numpy weight dict to a model; architecture must match."""
    state = model.state_dict()
    if set(state.keys()) != set(np_weights.keys()):
        missing = set(state) ^ set(np_weights)
        raise CheckpointError(f"parameter names disagree with the model: {sorted(missing)[:4]}")
    for k, v in state.items():
        arr = np_weights[k]
        if tuple(arr.shape) != tuple(v.shape):
            raise CheckpointError(
                f"shape mismatch for {k!r}: checkpoint {arr.shape} vs model {tuple(v.shape)}")
    model.load_state_dict({k: torch.from_numpy(np_weights[k]).to(v.dtype)
                           for k, v in state.items()})


def optimizer_state_to_numpy(opt) -> dict:
    sd = opt.state_dict()
    arrays = {}
    for pid, entry in sd["state"].items():
        for key, val in entry.items():
            if torch.is_tensor(val):
                arrays[f"{pid}.{key}"] = val.detach().cpu().numpy().copy()
            else:
                arrays[f"{pid}.{key}"] = np.asarray(val)
    return {"arrays": arrays, "meta": {"param_groups": sd["param_groups"]}}


def load_optimizer_state(opt, np_state: dict) -> None:
    state: dict = {}
    for name, arr in np_state["arrays"].items():
        pid, key = name.split(".", 1)
        val = torch.from_numpy(np.asarray(arr))
        if val.ndim == 0 and key == "step":
            val = val.float()
        state.setdefault(int(pid), {})[key] = val
    opt.load_state_dict({"state": state, "param_groups": np_state["meta"]["param_groups"]})


def save_train_checkpoint(state: TrainState, config: dict, path) -> None:
    dataio.save_checkpoint(
        weights=weights_to_numpy(state.model.state_dict()),
        ema_weights=weights_to_numpy(state.ema),
        step=state.step,
        config=config,
        path=path,
        optimizer_state=optimizer_state_to_numpy(state.optimizer),
        extra={"lr": state.lr, "loss_history_tail": state.loss_history[-state.cfg.lr_window:]},
    )


def restore_train_state(path, model: FlowDenoiser, cfg: TrainConfig) -> TrainState:
    ck = dataio.load_checkpoint(path)
    load_weights_into(model, ck.weights)
    state = init_state(model, cfg)
    for k in state.ema:
        if k not in ck.ema_weights:
            raise CheckpointError(f"checkpoint EMA is missing {k!r}")
        state.ema[k] = torch.from_numpy(ck.ema_weights[k]).to(state.ema[k].dtype)
    if ck.optimizer_state is not None:
        load_optimizer_state(state.optimizer, ck.optimizer_state)
    state.step = ck.step
    state.lr = float(ck.extra.get("lr", cfg.lr))
    state.loss_history = list(ck.extra.get("loss_history_tail", []))
    return state


# ---------------------------------------------------------------------------
# full loop


def fit(model: FlowDenoiser, sched: DiffusionSchedule, cfg: TrainConfig,
        sample_fn: Callable[[int], Sample], eval_dataset: Optional[list] = None,
        refine_cfg=None, out_dir=None, run_config: Optional[dict] = None,
        log_every: int = 50, quiet: bool = False,
        state: Optional[TrainState] = None) -> TrainState:
    """Drive train_step for cfg.total_steps, logging JSONL metrics.

    `sample_fn(index)` supplies (possibly augmented) samples; indices cycle
    modulo cfg.n_train when that is set. Checkpoints and evaluation snapshots
    are written every cfg.eval_every steps when out_dir is given.
    """
    if state is None:
        state = init_state(model, cfg)
    out_path = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_file = (out_path / "metrics.jsonl").open("a")

    def emit(record):
        if metrics_file is not None:
            metrics_file.write(json.dumps(record) + "\n")
            metrics_file.flush()
        if not quiet and (record.get("step", 0) % log_every == 0 or "epe" in record):
            print(json.dumps(record), flush=True)

    def run_eval_and_checkpoint():
        record = {"step": state.step, "lr": state.lr}
        if eval_dataset:
            with swap_in_weights(model, state.ema):
                m = evaluate(model, eval_dataset, sched, refine_cfg, seed=cfg.seed)
            record.update(epe=m.epe, fl_all=m.fl_all)
        if out_path is not None:
            save_train_checkpoint(state, run_config or {}, out_path / f"ckpt_{state.step:07d}.zip")
        emit(record)

    t0 = time.time()
    try:
        while state.step < cfg.total_steps:
            base = state.step * cfg.batch_size
            indices = [(base + j) % cfg.n_train if cfg.n_train else base + j
                       for j in range(cfg.batch_size)]
            batch = [sample_fn(i) for i in indices]
            state, loss = train_step(state, batch, sched)
            emit({"step": state.step, "loss": loss, "lr": state.lr,
                  "elapsed": round(time.time() - t0, 2)})
            if cfg.eval_every and state.step % cfg.eval_every == 0:
                run_eval_and_checkpoint()
        if not cfg.eval_every or state.step % cfg.eval_every != 0:
            run_eval_and_checkpoint()
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return state
