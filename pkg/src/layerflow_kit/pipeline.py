"""Glue between pixel quadruples and the latent token space the model denoises."""

from __future__ import annotations

import numpy as np

from . import diffusion
from .layerpack import (SEGMENTS, VARIANTS, ConditionMask, LatentEmbedding, LayerQuadruple,
                        PackedSequence, pack, position_ids, unpack)
from .textcond import encode, null_context

_LATENT = LatentEmbedding()


def to_latents(q: LayerQuadruple, patch: int) -> np.ndarray:
    return pack(q, _LATENT, patch).tokens


def from_latents(tokens: np.ndarray, frames: int, grid: tuple[int, int], patch: int,
                 prompts=("", "", "")) -> LayerQuadruple:
    seg = frames * grid[0] * grid[1]
    seq = PackedSequence(tokens, tuple(i * seg for i in range(4)), frames, grid, patch,
                         position_ids(frames, grid))
    q = unpack(seq, _LATENT, prompts)
    return LayerQuadruple(*(np.clip(v, 0.0, 1.0) for v in q.videos()), prompts=prompts)


def resolve_mask(variant) -> ConditionMask:
    if isinstance(variant, ConditionMask):
        return variant
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}") from None


def sample_quadruple(model, prompts, variant, cond: LayerQuadruple | None, schedule,
                     steps: int, scale: float, seed: int, gate_alpha: int = 0) -> LayerQuadruple:
    """Run the guided sampler for one task variant and decode to pixels.

    Layers fixed by the variant are copied from ``cond`` unchanged.
    """
    cfg = model.config
    if len(prompts) != 3:
        raise ValueError(f"expected 3 prompts, got {len(prompts)}")
    mask = resolve_mask(variant)
    cond_x0 = None
    if any(mask.fixed):
        if cond is None:
            missing = [n for n, f in zip(SEGMENTS, mask.fixed) if f]
            raise ValueError(f"variant {mask.name} needs conditioning layers: {', '.join(missing)}")
        cond_x0 = to_latents(cond, cfg.patch)
    ctx = encode(prompts, model.vocab, model.layers, cfg.text_len)
    null = null_context(model.vocab, model.layers, cfg.text_len)
    frames = cond.frames if cond is not None else cfg.frames
    shape = (4 * frames * cfg.grid[0] * cfg.grid[1], cfg.patch_dim)
    x = diffusion.sample(model, ctx, mask, cond_x0, schedule, steps, scale, seed,
                         null_ctx=null, shape=shape, gate_alpha=gate_alpha)
    out = from_latents(x, frames, cfg.grid, cfg.patch, tuple(prompts))
    if cond is not None:
        layers = [c if f else o for c, o, f in zip(cond.videos(), out.videos(), mask.fixed)]
        out = LayerQuadruple(*layers, prompts=tuple(prompts))
    return out
