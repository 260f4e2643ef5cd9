"""Procedural multi-layer videos: soft-edged sprites over drifting patterns.

Three tiers are produced from one scene grid:

* ``coarse``  -- degraded quadruples (binary alpha, blurred blend, noisy bg)
* ``frozen``  -- one random frame of a clean quadruple repeated
* ``clean``   -- exact composites; pairs of them feed dynamic copy-paste samples
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np

from .layerpack import LayerQuadruple, composite
from .tensor import ShapeError

SPRITE_COLORS = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.15),
    "white": (0.97, 0.97, 0.97),
    "orange": (0.95, 0.55, 0.1),
}
BG_COLORS = {
    "gray": (0.45, 0.45, 0.45),
    "navy": (0.1, 0.12, 0.35),
    "teal": (0.1, 0.45, 0.45),
    "brown": (0.4, 0.25, 0.1),
}
SHAPES = ("disc", "square", "triangle")
MOTIONS = ("left", "right", "up", "down", "circling", "resting")
PATTERNS = ("gradient", "stripes", "checker")
DRIFTS = ("left", "right", "up", "down", "still")

_DIRS = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1),
         "resting": (0, 0), "still": (0, 0)}
SPRITE_SPEED = 1.5      # px / frame
ANGULAR_RATE = 0.6      # rad / frame
DRIFT_SPEED = 0.5       # px / frame
PATTERN_PERIOD = {"gradient": 32.0, "stripes": 8.0, "checker": 8.0}


@dataclass(frozen=True)
class SpriteSpec:
    kind: str
    color: str
    size: float                      # radius as a fraction of the shorter frame side
    trajectory: str                  # "linear" | "circular"
    start: tuple[float, float]       # linear: first centre; circular: orbit centre (px)
    velocity: tuple[float, float] = (0.0, 0.0)   # px / frame (linear)
    radius: float = 0.0              # orbit radius in px (circular)
    rate: float = 0.0                # rad / frame (circular)
    phase: float = 0.0
    edge: float = 1.0                # soft-edge width in px

    @property
    def rgb(self) -> np.ndarray:
        return np.array(SPRITE_COLORS[self.color], dtype=np.float32)

    @property
    def motion(self) -> str:
        if self.trajectory == "circular":
            return "circling"
        vx, vy = self.velocity
        if vx == 0 and vy == 0:
            return "resting"
        if abs(vx) >= abs(vy):
            return "right" if vx > 0 else "left"
        return "down" if vy > 0 else "up"

    def centres(self, frames: int) -> np.ndarray:
        f = np.arange(frames, dtype=np.float64)
        if self.trajectory == "linear":
            return np.stack([self.start[0] + self.velocity[0] * f,
                             self.start[1] + self.velocity[1] * f], axis=1)
        if self.trajectory == "circular":
            ang = self.phase + self.rate * f
            return np.stack([self.start[0] + self.radius * np.cos(ang),
                             self.start[1] + self.radius * np.sin(ang)], axis=1)
        raise ValueError(f"unknown trajectory {self.trajectory!r}")


@dataclass(frozen=True)
class BackgroundSpec:
    pattern: str
    colors: tuple[str, str]
    drift: tuple[float, float] = (0.0, 0.0)   # px / frame

    @property
    def direction(self) -> str:
        vx, vy = self.drift
        if vx == 0 and vy == 0:
            return "still"
        if abs(vx) >= abs(vy):
            return "right" if vx > 0 else "left"
        return "down" if vy > 0 else "up"


class CaptionRule:
    """Deterministic captions over a closed vocabulary."""

    @staticmethod
    def fg(s: SpriteSpec) -> str:
        motion = s.motion
        verb = motion if motion in ("circling", "resting") else f"moving {motion}"
        return f"a {s.color} {s.kind} {verb}"

    @staticmethod
    def bg(b: BackgroundSpec) -> str:
        d = b.direction
        tail = "standing still" if d == "still" else f"drifting {d}"
        return f"{b.colors[0]} and {b.colors[1]} {b.pattern} {tail}"

    @staticmethod
    def blended(fg_prompt: str, bg_prompt: str) -> str:
        return f"{fg_prompt} over {bg_prompt}"

    @classmethod
    def prompts(cls, s: SpriteSpec, b: BackgroundSpec) -> tuple[str, str, str]:
        f, g = cls.fg(s), cls.bg(b)
        return f, g, cls.blended(f, g)


def caption_vocabulary() -> list[str]:
    words = ["1,", "2,", "3,", "a", "moving", "over", "and", "drifting", "standing", "still"]
    words += list(SPRITE_COLORS) + list(BG_COLORS) + list(SHAPES) + list(MOTIONS) + list(PATTERNS)
    words += list(DRIFTS)
    return list(dict.fromkeys(words))


# -- rendering ------------------------------------------------------------------------------


def _signed_distance(kind: str, px: np.ndarray, py: np.ndarray, r: float) -> np.ndarray:
    if kind == "disc":
        return np.hypot(px, py) - r
    if kind == "square":
        return np.maximum(np.abs(px), np.abs(py)) - r
    if kind == "triangle":
        # equilateral, apex up, inradius r / 2 so the circumradius is r
        h = math.sqrt(3) / 2
        normals = [(0.0, 1.0), (h, -0.5), (-h, -0.5)]  # outward, image y points down
        return np.max([nx * px + ny * py for nx, ny in normals], axis=0) - r / 2
    raise ValueError(f"unknown sprite kind {kind!r}")


def sprite_extent(s: SpriteSpec, height: int, width: int) -> float:
    return s.size * min(height, width) + s.edge / 2


def render_sprite(s: SpriteSpec, frames: int, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """(fg RGB, alpha) for ``frames`` frames; raises if the sprite ever leaves the frame."""
    if s.edge < 1:
        raise ValueError("soft-edge width must be >= 1 px")
    c = s.centres(frames)
    ext = sprite_extent(s, height, width)
    if (c[:, 0] - ext < 0).any() or (c[:, 0] + ext > width).any() or \
            (c[:, 1] - ext < 0).any() or (c[:, 1] + ext > height).any():
        raise ValueError("sprite trajectory leaves the frame")
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    r = s.size * min(height, width)
    alpha = np.empty((frames, height, width, 1), dtype=np.float32)
    for f in range(frames):
        d = _signed_distance(s.kind, xs - c[f, 0], ys - c[f, 1], r)
        alpha[f, ..., 0] = np.clip(0.5 - d / s.edge, 0.0, 1.0)
    fg = np.where(alpha > 0, s.rgb, np.float32(0)).astype(np.float32)
    return fg, alpha


def render_background(b: BackgroundSpec, frames: int, height: int, width: int) -> np.ndarray:
    period = PATTERN_PERIOD[b.pattern]
    travel = math.hypot(*b.drift) * frames
    if travel * 4 > period:
        raise ValueError(f"drift {b.drift} too fast for a {period}px {b.pattern} pattern")
    c0 = np.array(BG_COLORS[b.colors[0]], dtype=np.float32)
    c1 = np.array(BG_COLORS[b.colors[1]], dtype=np.float32)
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    out = np.empty((frames, height, width, 3), dtype=np.float32)
    for f in range(frames):
        x = xs - b.drift[0] * f
        y = ys - b.drift[1] * f
        if b.pattern == "gradient":
            m = 0.5 + 0.5 * np.cos(2 * np.pi * (x + 0.5 * y) / period)
        elif b.pattern == "stripes":
            m = 0.5 + 0.5 * np.tanh(2.0 * np.sin(2 * np.pi * x / period))
        elif b.pattern == "checker":
            m = 0.5 + 0.5 * np.tanh(2.0 * np.sin(2 * np.pi * x / period) * np.sin(2 * np.pi * y / period))
        else:
            raise ValueError(f"unknown pattern {b.pattern!r}")
        m = m[..., None].astype(np.float32)
        out[f] = m * c1 + (1 - m) * c0
    return out


def gen_quadruple(sprite: SpriteSpec, bg: BackgroundSpec, frames: int, height: int, width: int,
                  seed: int = 0) -> LayerQuadruple:
    """Render one exact-composite quadruple. Rendering itself is deterministic;
    ``seed`` is accepted for interface symmetry with the other generators."""
    fg, alpha = render_sprite(sprite, frames, height, width)
    background = render_background(bg, frames, height, width)
    blended = composite(fg, alpha, background)
    return LayerQuadruple(fg, alpha, background, blended, CaptionRule.prompts(sprite, bg))


# -- transforms --------------------------------------------------------------------------------


def freeze(q: LayerQuadruple, seed: int) -> LayerQuadruple:
    """Every layer becomes one uniformly drawn frame, repeated."""
    idx = int(np.random.default_rng(seed).integers(q.frames))
    rep = [np.repeat(v[idx:idx + 1], q.frames, axis=0) for v in q.videos()]
    return LayerQuadruple(*rep, prompts=q.prompts)


def copy_paste(fg_source: LayerQuadruple, bg_source: LayerQuadruple) -> LayerQuadruple:
    if fg_source.fg.shape != bg_source.fg.shape:
        raise ShapeError(f"copy-paste shape mismatch: {fg_source.fg.shape} vs {bg_source.fg.shape}")
    fg_prompt, bg_prompt = fg_source.prompts[0], bg_source.prompts[1]
    blended = composite(fg_source.fg, fg_source.alpha, bg_source.bg)
    return LayerQuadruple(fg_source.fg.copy(), fg_source.alpha.copy(), bg_source.bg.copy(), blended,
                          (fg_prompt, bg_prompt, CaptionRule.blended(fg_prompt, bg_prompt)))


def temporal_blur(video: np.ndarray) -> np.ndarray:
    """3-tap box filter over time with edge frames replicated."""
    idx = np.arange(video.shape[0])
    prev = video[np.maximum(idx - 1, 0)]
    nxt = video[np.minimum(idx + 1, video.shape[0] - 1)]
    return ((prev.astype(np.float64) + video + nxt) / 3.0).astype(np.float32)


def degrade(q: LayerQuadruple, seed: int) -> LayerQuadruple:
    """Coarse-data simulator: binary alpha, temporally blurred blend, noisy background."""
    rng = np.random.default_rng(seed)
    alpha = (q.alpha >= 0.5).astype(np.float32)
    bg = np.clip(q.bg + rng.normal(0.0, 0.02, q.bg.shape), 0.0, 1.0).astype(np.float32)
    return LayerQuadruple(q.fg.copy(), alpha, bg, temporal_blur(q.blended), q.prompts)


# -- scene grid ------------------------------------------------------------------------------------


def sprite_grid() -> list[tuple[str, str, str]]:
    return list(itertools.product(SHAPES, SPRITE_COLORS, MOTIONS))


def background_grid() -> list[tuple[str, tuple[str, str], str]]:
    pairs = list(itertools.permutations(BG_COLORS, 2))
    return list(itertools.product(PATTERNS, pairs, DRIFTS))


def make_sprite(kind: str, color: str, motion: str, frames: int, height: int, width: int,
                rng: np.random.Generator, size: float = 0.2, edge: float = 1.5) -> SpriteSpec:
    """Place a sprite with the requested motion so it stays inside the frame."""
    ext = size * min(height, width) + edge / 2
    if motion == "circling":
        radius = 2.0
        lo_x, hi_x = ext + radius, width - ext - radius
        lo_y, hi_y = ext + radius, height - ext - radius
        centre = (rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y))
        return SpriteSpec(kind, color, size, "circular", centre, radius=radius, rate=ANGULAR_RATE,
                          phase=float(rng.uniform(0, 2 * np.pi)), edge=edge)
    dx, dy = _DIRS[motion]
    vel = (dx * SPRITE_SPEED, dy * SPRITE_SPEED)
    span = (frames - 1) * SPRITE_SPEED

    def place(v, size_px):
        lo, hi = ext, size_px - ext
        if v > 0:
            hi -= span
        elif v < 0:
            lo += span
        if hi < lo:
            raise ValueError("frame too small for this sprite motion")
        return float(rng.uniform(lo, hi))

    start = (place(vel[0], width), place(vel[1], height))
    return SpriteSpec(kind, color, size, "linear", start, velocity=vel, edge=edge)


def make_background(pattern: str, colors: tuple[str, str], drift: str) -> BackgroundSpec:
    dx, dy = _DIRS[drift]
    return BackgroundSpec(pattern, tuple(colors), (dx * DRIFT_SPEED, dy * DRIFT_SPEED))


@dataclass(frozen=True)
class SceneRecord:
    index: int
    seed: int
    sprite_cell: int
    background_cell: int

    def to_dict(self) -> dict:
        return asdict(self)


def scene(index: int, seed: int, frames: int, height: int, width: int) -> tuple[LayerQuadruple, SceneRecord]:
    """Clean quadruple ``index`` of the dataset drawn with base ``seed``."""
    s = seed ^ index
    rng = np.random.default_rng(s)
    sg, bgg = sprite_grid(), background_grid()
    si, bi = int(rng.integers(len(sg))), int(rng.integers(len(bgg)))
    kind, color, motion = sg[si]
    pattern, pair, drift = bgg[bi]
    sprite = make_sprite(kind, color, motion, frames, height, width, rng)
    q = gen_quadruple(sprite, make_background(pattern, pair, drift), frames, height, width, s)
    return q, SceneRecord(index, s, si, bi)


TIERS = ("coarse", "frozen", "clean")


def build_tiers(count: int, seed: int, frames: int, height: int, width: int):
    """``{tier: [(quadruple, record), ...]}`` for all three tiers."""
    out = {t: [] for t in TIERS}
    for i in range(count):
        q, rec = scene(i, seed, frames, height, width)
        out["clean"].append((q, rec))
        out["coarse"].append((degrade(q, rec.seed), rec))
        out["frozen"].append((freeze(q, rec.seed), rec))
    return out
