"""Noise schedule, forward noising, masked noise-prediction loss and the
guided ancestral sampler."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .layerpack import ConditionMask, apply_condition
from .tensor import Tensor, mse
from .textcond import TextContext


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - beta))

    @property
    def T(self) -> int:
        return self.beta.size


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear betas from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule | float) -> np.ndarray:
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; a float ``schedule`` is taken as ab_t itself."""
    ab = float(schedule) if not isinstance(schedule, NoiseSchedule) else schedule.alpha_bar[t]
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ")
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


def cfg_combine(eps_uncond, eps_cond, scale: float):
    return eps_uncond + scale * (eps_cond - eps_uncond)


@dataclass
class TrainSample:
    x0: np.ndarray           # packed clean latents, L x P
    ctx: TextContext
    mask: ConditionMask
    t: int
    eps: np.ndarray


def sample_loss(model, s: TrainSample, schedule: NoiseSchedule, gate_alpha: int) -> Tensor:
    """Noise-prediction MSE of one sample over its generated segments only."""
    xt = q_sample(s.x0, s.t, s.eps, schedule)
    xt = apply_condition(xt, s.x0, s.mask)
    pred = model.forward(xt, s.ctx, s.t, gate_alpha)
    w = s.mask.token_weights(s.x0.shape[0])[:, None]
    return mse(pred, s.eps, w)


def masked_loss(model, batch: Sequence[TrainSample], schedule: NoiseSchedule, gate_alpha: int) -> Tensor:
    """Batch mean of :func:`sample_loss`."""
    if not batch:
        raise ValueError("empty batch")
    total = None
    for s in batch:
        li = sample_loss(model, s, schedule, gate_alpha)
        total = li if total is None else total + li
    return total * (1.0 / len(batch))


# -- sampling --------------------------------------------------------------------------


def strided_steps(T: int, steps: int) -> np.ndarray:
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    return np.unique(np.round(np.linspace(0, T - 1, steps)).astype(np.int64))


def respaced(schedule: NoiseSchedule, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """alpha_bar, previous alpha_bar and effective beta over the subset ``ts``."""
    ab = schedule.alpha_bar[ts]
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    return ab, ab_prev, 1.0 - ab / ab_prev


def ancestral_update(x: np.ndarray, eps: np.ndarray, ab: float, ab_prev: float, beta: float,
                     noise: np.ndarray | None, clip: tuple[float, float] | None) -> np.ndarray:
    """One DDPM posterior step; ``noise=None`` gives the deterministic mean."""
    x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    if clip is not None:
        x0 = np.clip(x0, *clip)
    mean = (np.sqrt(ab_prev) * beta / (1.0 - ab)) * x0 + (np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)) * x
    if noise is None:
        return mean.astype(np.float32)
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return (mean + np.sqrt(var) * noise).astype(np.float32)


def sample(model, ctx: TextContext, mask: ConditionMask, cond_x0: np.ndarray | None,
           schedule: NoiseSchedule, steps: int, scale: float, seed: int,
           null_ctx: TextContext | None = None, shape: tuple[int, int] | None = None,
           clip: tuple[float, float] | None = (-1.0, 1.0), gate_alpha: int = 0) -> np.ndarray:
    """Denoise packed latents from pure noise with classifier-free guidance.

    Fixed segments of ``mask`` are re-imposed from ``cond_x0`` after every
    update. Returns the final packed latents.
    """
    if any(mask.fixed) and cond_x0 is None:
        missing = [n for n, f in zip(("fg", "alpha", "bg", "blended"), mask.fixed) if f]
        raise ValueError(f"conditioning data missing for fixed segments: {', '.join(missing)}")
    if shape is None:
        if cond_x0 is None:
            raise ValueError("shape is required when no conditioning tokens are given")
        shape = cond_x0.shape
    rng = np.random.default_rng(seed)
    ts = strided_steps(schedule.T, steps)
    ab, ab_prev, beta = respaced(schedule, ts)
    x = rng.standard_normal(shape).astype(np.float32)
    if cond_x0 is not None:
        x = apply_condition(x, cond_x0, mask)
    for i in range(len(ts) - 1, -1, -1):
        t = int(ts[i])
        eps_c = model.forward(x, ctx, t, gate_alpha).data
        if null_ctx is not None:
            eps_u = model.forward(x, null_ctx, t, gate_alpha).data
            eps = cfg_combine(eps_u, eps_c, scale)
        else:
            eps = eps_c
        noise = rng.standard_normal(shape).astype(np.float32) if i > 0 else None
        x = ancestral_update(x, eps, ab[i], ab_prev[i], beta[i], noise, clip)
        if cond_x0 is not None:
            x = apply_condition(x, cond_x0, mask)
    return x
