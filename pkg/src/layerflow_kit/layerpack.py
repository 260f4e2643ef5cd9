"""Four-layer videos and their packed token sequence.

A multi-layer video is held as four aligned sub-clips in a fixed order:
foreground RGB, alpha matte, background, blended scene. Packing patchifies
every sub-clip and concatenates them into one sequence so a single attention
stack sees all layers at once.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .tensor import ShapeError

SEGMENTS = ("fg", "alpha", "bg", "blended")
PROMPT_ROLES = ("fg", "bg", "blended")
MAGIC = b"LFQ1"


@dataclass
class LayerQuadruple:
    fg: np.ndarray        # F x H x W x 3
    alpha: np.ndarray     # F x H x W x 1
    bg: np.ndarray        # F x H x W x 3
    blended: np.ndarray   # F x H x W x 3
    prompts: tuple[str, str, str] = ("", "", "")

    def __post_init__(self):
        self.fg = np.asarray(self.fg, dtype=np.float32)
        self.alpha = np.asarray(self.alpha, dtype=np.float32)
        if self.alpha.ndim == 3:
            self.alpha = self.alpha[..., None]
        self.bg = np.asarray(self.bg, dtype=np.float32)
        self.blended = np.asarray(self.blended, dtype=np.float32)
        self.prompts = tuple(self.prompts)
        if len(self.prompts) != 3:
            raise ValueError(f"expected exactly 3 prompts, got {len(self.prompts)}")
        shapes = {v.shape[:3] for v in self.videos()}
        if len(shapes) != 1:
            raise ShapeError(f"sub-clips disagree on F x H x W: {sorted(shapes)}")
        for name, v in zip(SEGMENTS, self.videos()):
            want = 1 if name == "alpha" else 3
            if v.ndim != 4 or v.shape[-1] != want:
                raise ShapeError(f"{name} must be F x H x W x {want}, got {v.shape}")

    @property
    def frames(self) -> int:
        return self.fg.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.fg.shape[1], self.fg.shape[2]

    def videos(self) -> tuple[np.ndarray, ...]:
        return self.fg, self.alpha, self.bg, self.blended

    def layer(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def composite_error(self) -> float:
        """Max per-channel deviation of ``blended`` from the alpha-over composite."""
        return float(np.max(np.abs(composite(self.fg, self.alpha, self.bg) - self.blended)))


def composite(fg: np.ndarray, alpha: np.ndarray, bg: np.ndarray) -> np.ndarray:
    """Alpha-over: ``alpha * fg + (1 - alpha) * bg`` clamped to [0, 1]."""
    fg = np.asarray(fg, dtype=np.float32)
    bg = np.asarray(bg, dtype=np.float32)
    alpha = np.asarray(alpha, dtype=np.float32)
    if alpha.ndim == fg.ndim - 1:
        alpha = alpha[..., None]
    if fg.shape != bg.shape or alpha.shape[:-1] != fg.shape[:-1] or alpha.shape[-1] not in (1, fg.shape[-1]):
        raise ShapeError(f"composite shapes differ: fg {fg.shape}, alpha {alpha.shape}, bg {bg.shape}")
    if alpha.size and (alpha.min() < 0 or alpha.max() > 1):
        raise ValueError("alpha outside [0, 1]")
    out = alpha * fg + (np.float32(1) - alpha) * bg
    return np.clip(out, 0.0, 1.0)


# -- conditioning -------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionMask:
    """Which sub-clips are held fixed (clean, loss-free) during denoising."""

    fixed: tuple[bool, bool, bool, bool] = (False, False, False, False)

    def __post_init__(self):
        fixed = tuple(bool(f) for f in self.fixed)
        if len(fixed) != 4:
            raise ValueError("condition mask needs exactly 4 flags")
        if all(fixed):
            raise ValueError("condition mask fixes every segment; nothing left to generate")
        object.__setattr__(self, "fixed", fixed)

    @property
    def name(self) -> str:
        for k, v in VARIANTS.items():
            if v == self:
                return k
        return "".join("T" if f else "F" for f in self.fixed)

    def token_weights(self, seq_len: int) -> np.ndarray:
        """1 for generated token positions, 0 for fixed ones."""
        seg = seq_len // 4
        return np.repeat(np.array([0.0 if f else 1.0 for f in self.fixed], dtype=np.float32), seg)


VARIANTS = {
    "generate": ConditionMask((False, False, False, False)),
    "fg_cond": ConditionMask((True, True, False, False)),
    "bg_cond": ConditionMask((False, False, True, False)),
    "decompose": ConditionMask((False, False, False, True)),
}


def apply_condition(xt: np.ndarray, x0: np.ndarray, mask: ConditionMask) -> np.ndarray:
    """Overwrite fixed segments of ``xt`` with the clean tokens of ``x0``."""
    if xt.shape != x0.shape:
        raise ShapeError(f"token arrays differ: {xt.shape} vs {x0.shape}")
    if not any(mask.fixed):
        return xt
    out = np.array(xt, copy=True)
    seg = xt.shape[0] // 4
    for i, f in enumerate(mask.fixed):
        if f:
            out[i * seg:(i + 1) * seg] = x0[i * seg:(i + 1) * seg]
    return out


# -- patch embedding ------------------------------------------------------------------


class IdentityEmbedding:
    """Invertible test embedding: a patch vector is its own token."""

    def embed(self, patches: np.ndarray) -> np.ndarray:
        return patches

    def unembed(self, tokens: np.ndarray) -> np.ndarray:
        return tokens


class LatentEmbedding:
    """Affine map of [0, 1] pixels to [-1, 1] diffusion latents."""

    def embed(self, patches: np.ndarray) -> np.ndarray:
        return (patches * np.float32(2) - np.float32(1)).astype(np.float32)

    def unembed(self, tokens: np.ndarray) -> np.ndarray:
        return ((tokens + np.float32(1)) * np.float32(0.5)).astype(np.float32)


@dataclass
class PackedSequence:
    tokens: np.ndarray                 # L x D
    segment_offsets: tuple[int, ...]   # start index per sub-clip
    frames_per_clip: int
    patch_grid: tuple[int, int]
    patch: int
    position_ids: np.ndarray = field(repr=False)  # L x 3 (clip, frame, patch)

    @property
    def segment_length(self) -> int:
        return self.frames_per_clip * self.patch_grid[0] * self.patch_grid[1]

    @property
    def packed_frames(self) -> int:
        return 4 * self.frames_per_clip


def patchify(video: np.ndarray, patch: int) -> np.ndarray:
    """F x H x W x C -> (F * h' * w') x (p * p * C), tokens in (frame, row, col) order."""
    f, h, w, c = video.shape
    if h % patch or w % patch:
        raise ShapeError(f"frame {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = video.reshape(f, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(f * gh * gw, patch * patch * c))


def unpatchify(tokens: np.ndarray, frames: int, grid: tuple[int, int], patch: int,
               channels: int = 3) -> np.ndarray:
    gh, gw = grid
    if tokens.shape != (frames * gh * gw, patch * patch * channels):
        raise ShapeError(f"token block {tokens.shape} inconsistent with {frames} frames, grid {grid}")
    x = tokens.reshape(frames, gh, gw, patch, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(frames, gh * patch, gw * patch, channels))


def position_ids(frames: int, grid: tuple[int, int]) -> np.ndarray:
    n = grid[0] * grid[1]
    clip = np.repeat(np.arange(4), frames * n)
    frame = np.tile(np.repeat(np.arange(frames), n), 4)
    patch = np.tile(np.arange(n), 4 * frames)
    return np.stack([clip, frame, patch], axis=1).astype(np.int64)


def pack(q: LayerQuadruple, embedder=None, patch: int = 4) -> PackedSequence:
    embedder = embedder or IdentityEmbedding()
    f, (h, w) = q.frames, q.size
    if h % patch or w % patch:
        raise ShapeError(f"frame {h}x{w} not divisible by patch {patch}")
    grid = (h // patch, w // patch)
    alpha3 = np.repeat(q.alpha, 3, axis=-1)
    blocks = [embedder.embed(patchify(v, patch)) for v in (q.fg, alpha3, q.bg, q.blended)]
    seg = blocks[0].shape[0]
    return PackedSequence(
        tokens=np.concatenate(blocks, axis=0).astype(np.float32),
        segment_offsets=tuple(i * seg for i in range(4)),
        frames_per_clip=f,
        patch_grid=grid,
        patch=patch,
        position_ids=position_ids(f, grid),
    )


def unpack(s: PackedSequence, unembedder=None, prompts=("", "", "")) -> LayerQuadruple:
    unembedder = unembedder or IdentityEmbedding()
    seg = s.segment_length
    if tuple(s.segment_offsets) != tuple(i * seg for i in range(4)) or s.tokens.shape[0] != 4 * seg:
        raise ShapeError(
            f"segment offsets {s.segment_offsets} / length {s.tokens.shape[0]} "
            f"inconsistent with segment length {seg}")
    clips = []
    for i in range(4):
        block = unembedder.unembed(s.tokens[i * seg:(i + 1) * seg])
        clips.append(unpatchify(block, s.frames_per_clip, s.patch_grid, s.patch))
    # float64 mean keeps replicated channels bit-exact
    alpha = np.clip(clips[1].astype(np.float64).mean(axis=-1, keepdims=True), 0.0, 1.0)
    return LayerQuadruple(clips[0], alpha.astype(np.float32), clips[2], clips[3], prompts)


# -- dataset file ---------------------------------------------------------------------


def _pstr(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def quadruple_bytes(q: LayerQuadruple) -> bytes:
    f, (h, w) = q.frames, q.size
    parts = [MAGIC, struct.pack("<3I", f, h, w)]
    parts += [np.ascontiguousarray(v, dtype="<f4").tobytes() for v in q.videos()]
    parts += [_pstr(p) for p in q.prompts]
    return b"".join(parts)


def save_quadruple(q: LayerQuadruple, path) -> None:
    Path(path).write_bytes(quadruple_bytes(q))


def load_quadruple(path) -> LayerQuadruple:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}")
    f, h, w = struct.unpack_from("<3I", buf, 4)
    pos = 16
    videos = []
    for ch in (3, 1, 3, 3):
        n = f * h * w * ch
        if pos + 4 * n > len(buf):
            raise ValueError(f"{path}: truncated video blob")
        videos.append(np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(f, h, w, ch).astype(np.float32))
        pos += 4 * n
    prompts = []
    for _ in range(3):
        if pos + 4 > len(buf):
            raise ValueError(f"{path}: truncated prompt")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + n > len(buf):
            raise ValueError(f"{path}: truncated prompt")
        prompts.append(buf[pos:pos + n].decode("utf-8"))
        pos += n
    return LayerQuadruple(*videos, prompts=tuple(prompts))


def map_layers(q: LayerQuadruple, fn: Callable[[np.ndarray], np.ndarray]) -> LayerQuadruple:
    return LayerQuadruple(*(fn(v) for v in q.videos()), prompts=q.prompts)
