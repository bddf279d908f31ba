"""Toy DDPM training and deterministic DDIM sampling."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, TextIO

import numpy as np

from .errors import ConfigError, NumericalError
from .modality import GridShape, patchify, unpatchify
from .model import Batch, Denoiser
from .nn import Module
from .tensor import Tensor, mean, no_grad, square, sub


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule plus the factor clean data is multiplied by before noising.

    With ``signal_scale = s`` the model sees ``s * x0`` as its clean signal,
    which divides every signal-to-noise ratio by ``s**2`` while the betas stay
    fixed. Samplers undo the factor on the way out.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    signal_scale: float = 1.0

    @property
    def T(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas, signal_scale: float = 1.0) -> DiffusionSchedule:
        if not signal_scale > 0:
            raise ConfigError(f"signal_scale must be positive, got {signal_scale}")
        betas = np.asarray(betas, dtype=np.float64)
        alphas = 1.0 - betas
        return cls(betas, alphas, np.cumprod(alphas), float(signal_scale))

    def snr(self) -> np.ndarray:
        return self.signal_scale**2 * self.alpha_bar / (1.0 - self.alpha_bar)


def linear_schedule(T: int, beta_1: float, beta_T: float, signal_scale: float = 1.0) -> DiffusionSchedule:
    if T < 1 or not (0.0 < beta_1 <= beta_T < 1.0):
        raise ConfigError(f"need T >= 1 and 0 < beta_1 <= beta_T < 1, got T={T}, {beta_1}, {beta_T}")
    return DiffusionSchedule.from_betas(np.linspace(beta_1, beta_T, T), signal_scale)


def q_sample(schedule: DiffusionSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Forward noising ``sqrt(ab_t) s x0 + sqrt(1 - ab_t) eps``; ``t`` scalar or per-sample."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.T):
        raise IndexError(f"timestep out of range [0, {schedule.T})")
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    ab = schedule.alpha_bar[t].reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    return np.sqrt(ab) * (schedule.signal_scale * x0) + np.sqrt(1.0 - ab) * eps


# optimisation -------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 2e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    steps: int = 2000
    batch: int = 8
    grad_clip: float = 1.0
    log_every: int = 50

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0 or self.steps < 1 or self.batch < 1:
            raise ConfigError(f"invalid train config: {self}")

    @classmethod
    def paper_preset(cls, **overrides) -> TrainConfig:
        """Billion-parameter setting (AdamW, lr 2e-4), kept for reference only."""
        return cls(**{"lr": 2e-4, "weight_decay": 1e-2, **overrides})


class Adam:
    """Adam; ``weight_decay > 0`` switches to decoupled decay (AdamW)."""

    def __init__(self, params: Iterable[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# training -----------------------------------------------------------------------------

@dataclass
class TrainBatch:
    """Clean targets plus conditioning, ready for noising."""

    batch: Batch  # ``noisy`` holds the clean target until :func:`train_step` noises it
    target: np.ndarray

    @property
    def grid(self) -> GridShape:
        return GridShape.of(self.target)


def diffusion_loss(
    model: Denoiser, schedule: DiffusionSchedule, tb: TrainBatch, t: np.ndarray, eps: np.ndarray
) -> Tensor:
    x_t = q_sample(schedule, tb.target, t, eps)
    pred = model(tb.batch.with_noisy(x_t), t)
    true = patchify(eps, model.cfg.patch)
    return mean(square(sub(pred, true)))


def train_step(
    model: Denoiser,
    schedule: DiffusionSchedule,
    opt: Adam,
    tb: TrainBatch,
    rng: np.random.Generator,
    grad_clip: float = 1.0,
) -> float:
    """One optimiser step on the target-token epsilon MSE; returns the loss."""
    t = rng.integers(0, schedule.T, size=len(tb.batch))
    eps = rng.standard_normal(tb.target.shape)
    model.zero_grad()
    loss = diffusion_loss(model, schedule, tb, t, eps)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at optimiser step {opt.step_count + 1}")
    loss.backward()
    clip_grad_norm(opt.params, grad_clip)
    opt.step()
    return value


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)


def train(
    model: Denoiser,
    schedule: DiffusionSchedule,
    cfg: TrainConfig,
    batches: Callable[[int], TrainBatch],
    rng: np.random.Generator,
    metrics_out: TextIO | None = None,
    timing_out: TextIO | None = None,
) -> TrainResult:
    """Run ``cfg.steps`` optimiser steps; ``batches(step)`` supplies data.

    ``metrics_out`` receives one JSON object per log interval with the step
    and the mean loss since the previous record; wall-clock time goes to
    ``timing_out`` so the metrics stream stays bit-reproducible.
    """
    opt = Adam(model.parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    result = TrainResult()
    start = time.perf_counter()
    window: list[float] = []
    for step in range(1, cfg.steps + 1):
        loss = train_step(model, schedule, opt, batches(step), rng, cfg.grad_clip)
        result.losses.append(loss)
        window.append(loss)
        if step % cfg.log_every == 0 or step == cfg.steps:
            record = {"loss": float(np.mean(window)), "step": step}
            result.metrics.append(record)
            window = []
            if metrics_out is not None:
                metrics_out.write(json.dumps(record, sort_keys=True) + "\n")
            if timing_out is not None:
                ms = round((time.perf_counter() - start) * 1000.0, 3)
                timing_out.write(json.dumps({"step": step, "wallclock_ms": ms}, sort_keys=True) + "\n")
    return result


# sampling -----------------------------------------------------------------------------

def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    if not 1 <= steps <= T:
        raise ConfigError(f"need 1 <= steps <= T, got steps={steps}, T={T}")
    return (np.arange(steps) * (T // steps))[::-1].copy()


EpsFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def ddim_loop(
    schedule: DiffusionSchedule, eps_fn: EpsFn, x_T: np.ndarray, steps: int, eta: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """DDIM from ``x_T`` (treated as the sample at the first timestep) down to ``x_0``.

    ``eps_fn(x, t)`` predicts the noise; ``t`` is a per-sample int array.
    The result is divided by the schedule's signal scale, so it lives in data units.
    """
    x = x_T
    ts = ddim_timesteps(schedule.T, steps)
    ab = schedule.alpha_bar
    for i, t in enumerate(ts):
        ab_t = ab[t]
        ab_prev = ab[ts[i + 1]] if i + 1 < len(ts) else 1.0
        eps = eps_fn(x, np.full(x.shape[0], t, dtype=np.int64))
        x0 = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
        sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev))
        x = np.sqrt(ab_prev) * x0 + np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * rng.standard_normal(x.shape)
    return x / schedule.signal_scale


def model_eps_fn(model: Denoiser, batch: Batch) -> EpsFn:
    grid = GridShape.of(batch.noisy)

    def eps_fn(x: np.ndarray, t: np.ndarray) -> np.ndarray:
        with no_grad():
            pred = model(batch.with_noisy(x), t).data
        return unpatchify(pred, grid, model.cfg.patch)

    return eps_fn


def ddim_sample(
    model: Denoiser | EpsFn,
    batch: Batch,
    schedule: DiffusionSchedule,
    steps: int,
    rng: np.random.Generator,
    eta: float = 0.0,
) -> np.ndarray:
    """Generate target grids ``[B, f, h, w, c]`` for the conditioning in ``batch``."""
    eps_fn = model_eps_fn(model, batch) if isinstance(model, Module) else model
    x_T = rng.standard_normal(batch.noisy.shape)
    return ddim_loop(schedule, eps_fn, x_T, steps, eta, rng)
