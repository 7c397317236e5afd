"""Reconstruction-only optimization: l1 objective, Adam, one-cycle schedule.

Training is deterministic end-to-end for a fixed seed in single-threaded
mode: batches, reference crops and every update are driven by one recorded
generator, and gradients accumulate in a fixed order over the batch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .numerics import Tensor, absolute, global_grad_norm, tmean


@dataclass
class TrainConfig:
    """Optimization hyperparameters; the auxiliary perceptual/adversarial
    weights of the wider setup (1e-4 each) are intentionally absent: this
    trainer is reconstruction-only with loss weight 10."""

    total_steps: int = 200
    max_lr: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    rec_weight: float = 10.0
    start_div: float = 25.0  # start/end lr = max_lr / start_div
    peak_frac: float = 0.3  # cosine rise over the first 30% of steps
    grad_clip: float = 1.0
    checkpoint_every: int = 0  # 0: only final

    def validate(self):
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        return self


class OptimizerState:
    """Adam moments with beta1 = 0.0, beta2 = 0.99.

    With beta1 = 0 the first moment equals the current gradient and its bias
    correction is the identity.
    """

    def __init__(self, params, beta1: float = 0.0, beta2: float = 0.99, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}


def l1_loss(sr: Tensor, hr) -> Tensor:
    """Mean absolute difference over all pixels and channels (pre-weight)."""
    hr_t = hr if isinstance(hr, Tensor) else Tensor(np.ascontiguousarray(hr, dtype=sr.dtype))
    if sr.shape != hr_t.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {hr_t.shape}")
    return tmean(absolute(sr - hr_t))


def adam_step(params, state: OptimizerState, lr: float):
    """One bias-corrected Adam update; aborts on a non-finite gradient."""
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p in params:
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
        m = state.m[p.name]
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def one_cycle_lr(step: int, total_steps: int, max_lr: float,
                 start_div: float = 25.0, peak_frac: float = 0.3) -> float:
    """Single rise-then-fall schedule: cosine up to max_lr at the peak
    fraction, cosine back down to max_lr/start_div at both endpoints."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    floor = max_lr / start_div
    peak = int(round(peak_frac * total_steps))
    if step == peak:
        return max_lr
    if step < peak:
        return float(floor + (max_lr - floor) * 0.5 * (1.0 - np.cos(np.pi * step / peak)))
    span = total_steps - peak
    return float(floor + (max_lr - floor) * 0.5 * (1.0 + np.cos(np.pi * (step - peak) / span)))


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # (step, lr, loss, wall)
    checkpoint_path: str | None = None
    stopped_early: bool = False


def train_loop(
    model,
    pairs,
    cfg: TrainConfig,
    log_path: str | None = None,
    ckpt_path: str | None = None,
    rng: np.random.Generator | None = None,
    start_step: int = 0,
    optimizer: OptimizerState | None = None,
    stop_fn=None,
) -> TrainResult:
    """Optimize the model on ImagePairs; returns the per-step history.

    Every step draws ``batch_size`` pairs, accumulates l1 gradients in a fixed
    order, clips to unit global norm and applies Adam at the one-cycle rate.
    A non-finite loss aborts immediately, leaving the last periodic
    checkpoint in place. ``stop_fn(step, history)`` may end training early
    (used for early stopping on a side metric).
    """
    cfg.validate()
    if not pairs:
        raise ValueError("empty dataset")
    for pair in pairs:
        if pair.hr.shape[0] != model.cfg.output_size or pair.lr.shape[0] != model.cfg.lr_input_size:
            raise ValueError(
                f"pair {pair.name!r} extents {pair.lr.shape[0]}->{pair.hr.shape[0]} do not match "
                f"model {model.cfg.lr_input_size}->{model.cfg.output_size}"
            )
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = optimizer if optimizer is not None else OptimizerState(params)
    result = TrainResult()
    log_file = open(log_path, "a") if log_path else None
    t0 = time.perf_counter()
    try:
        for step in range(start_step, cfg.total_steps):
            lr = one_cycle_lr(step, cfg.total_steps, cfg.max_lr, cfg.start_div, cfg.peak_frac)
            idx = rng.integers(0, len(pairs), size=cfg.batch_size)
            for p in params:
                p.zero_grad()
            losses = []
            for i in idx:
                pair = pairs[int(i)]
                sr = model.forward(pair.lr, pair.ref, rng=rng, training=True)
                objective = cfg.rec_weight * l1_loss(sr, pair.hr.astype(sr.dtype))
                losses.append(objective.item())
                objective.backward(np.full((), 1.0 / cfg.batch_size, dtype=sr.dtype))
            loss = float(np.mean(losses))
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            clip_gradients(params, cfg.grad_clip)
            adam_step(params, opt, lr)
            wall = time.perf_counter() - t0
            result.history.append((step, lr, loss, wall))
            if log_file:
                log_file.write(f"{step}\t{lr!r}\t{loss!r}\t{wall:.3f}\n")
                log_file.flush()
            if ckpt_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_path, model, opt, rng, step=step + 1)
                result.checkpoint_path = ckpt_path
            if stop_fn is not None and stop_fn(step, result.history):
                result.stopped_early = True
                break
    finally:
        if log_file:
            log_file.close()
    if ckpt_path:
        save_checkpoint(ckpt_path, model, opt, rng, step=result.history[-1][0] + 1 if result.history else start_step)
        result.checkpoint_path = ckpt_path
    return result
