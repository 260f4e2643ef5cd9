"""Noise-prediction transformer over the joined text + packed video sequence."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .layerpack import PackedSequence, position_ids
from .lora import FAMILIES, PROJECTIONS, LoraAdapter, adapted_projection, check_gate
from .tensor import Tensor
from .textcond import TEXT_LEN, LayerEmbedder, TextContext, Vocabulary

MASK_BIAS = -1e9


@dataclass
class BackboneConfig:
    d_model: int = 64
    n_blocks: int = 6
    n_heads: int = 4
    patch: int = 4
    text_len: int = TEXT_LEN
    frames: int = 4
    height: int = 16
    width: int = 16
    n_timesteps: int = 100
    lora_rank: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_blocks % 6:
            raise ValueError("n_blocks must be a multiple of 6")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("frame size must be divisible by patch")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def video_tokens(self) -> int:
        return 4 * self.frames * self.grid[0] * self.grid[1]

    @property
    def trainable_blocks(self) -> tuple[int, ...]:
        n = math.ceil(self.n_blocks / 6)
        return tuple(range(self.n_blocks - n, self.n_blocks))

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoid(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t * freqs
    return np.concatenate([np.sin(args), np.cos(args)]).astype(np.float32)


def _normal(rng, std, shape) -> Tensor:
    return Tensor(rng.normal(0.0, std, shape))


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32))


class Block:
    """Pre-norm transformer block.

    Residual output projections start at zero so a block that is never
    trained stays an exact identity on the residual stream.
    """

    def __init__(self, index: int, d: int, rng: np.random.Generator):
        self.index = index
        s = 1.0 / math.sqrt(d)
        self.params = {
            "ada.weight": _zeros(d, 2 * d),
            "ada.bias": _zeros(2 * d),
            "attn.q": _normal(rng, s, (d, d)),
            "attn.k": _normal(rng, s, (d, d)),
            "attn.v": _normal(rng, s, (d, d)),
            "attn.o": _zeros(d, d),
            "ff.w1": _normal(rng, s, (d, 4 * d)),
            "ff.b1": _zeros(4 * d),
            "ff.w2": _zeros(4 * d, d),
            "ff.b2": _zeros(d),
        }
        self.adapters: dict[tuple[str, str], LoraAdapter] = {}

    def adapter(self, proj: str, family: str) -> LoraAdapter | None:
        return self.adapters.get((proj, family))

    def modulation(self, cond: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        mod = cond @ p["ada.weight"] + p["ada.bias"]
        d = p["attn.q"].shape[0]
        return mod[0, :d], mod[0, d:]


class Denoiser:
    """Predicts the injected noise for every packed video token.

    Text context tokens take part in full bidirectional attention but are not
    emitted. Motion adapters respond to :attr:`gate`; content adapters are
    always applied once attached.
    """

    def __init__(self, config: BackboneConfig, vocab_words, seed: int = 0):
        self.config = config
        cfg = config
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.vocab = Vocabulary(vocab_words, d, np.random.default_rng([seed, 2]))
        self.layers = LayerEmbedder(d, np.random.default_rng([seed, 3]))
        n_patch = cfg.grid[0] * cfg.grid[1]
        self.params: dict[str, Tensor] = {
            "embed.patch.weight": _normal(rng, 1.0 / math.sqrt(cfg.patch_dim), (cfg.patch_dim, d)),
            "embed.patch.bias": _zeros(d),
            "embed.clip": _normal(rng, 0.5, (4, d)),
            "embed.frame": _normal(rng, 0.5, (cfg.frames, d)),
            "embed.patch_pos": _normal(rng, 0.5, (n_patch, d)),
            "time.w1": _normal(rng, 1.0 / math.sqrt(d), (d, d)),
            "time.b1": _zeros(d),
            "time.w2": _normal(rng, 1.0 / math.sqrt(d), (d, d)),
            "time.b2": _zeros(d),
            "final.ada.weight": _zeros(d, 2 * d),
            "final.ada.bias": _zeros(2 * d),
            "final.head.weight": _zeros(d, cfg.patch_dim),
            "final.head.bias": _zeros(cfg.patch_dim),
        }
        self.blocks = [Block(i, d, rng) for i in range(cfg.n_blocks)]
        self.gate = 0

    # -- parameters --------------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        """All parameters under canonical, stably ordered names."""
        out = {"text.vocab": self.vocab.table, "text.layer": self.layers.table}
        out.update(self.params)
        for b in self.blocks:
            for k, v in b.params.items():
                out[f"blocks.{b.index}.{k}"] = v
            for (proj, fam) in sorted(b.adapters):
                ad = b.adapters[(proj, fam)]
                out[f"blocks.{b.index}.attn.{proj}.lora.{fam}.A"] = ad.A
                out[f"blocks.{b.index}.attn.{proj}.lora.{fam}.B"] = ad.B
        return out

    def adapters(self, family: str | None = None) -> list[LoraAdapter]:
        return [ad for b in self.blocks for (_, fam), ad in sorted(b.adapters.items())
                if family is None or fam == family]

    def attach_adapters(self, family: str, seed: int = 0) -> list[LoraAdapter]:
        """Attach one ``family`` adapter to Q, K and V of every designated block."""
        if family not in FAMILIES:
            raise ValueError(f"unknown adapter family {family!r}")
        rng = np.random.default_rng([seed, FAMILIES.index(family) + 17])
        d, r = self.config.d_model, self.config.lora_rank
        made = []
        for i in self.config.trainable_blocks:
            block = self.blocks[i]
            for proj in PROJECTIONS:
                if (proj, family) in block.adapters:
                    continue
                ad = LoraAdapter.create(d, d, r, family, (i, proj), rng)
                block.adapters[(proj, family)] = ad
                made.append(ad)
        return made

    def has_adapters(self, family: str) -> bool:
        return bool(self.adapters(family))

    def freeze_all_but(self, trainable) -> None:
        keep = {id(t) for t in trainable}
        for t in self.named_parameters().values():
            t.requires_grad = id(t) in keep
            t.grad = None

    # -- forward pieces ------------------------------------------------------------
    def timestep_embed(self, t: int) -> Tensor:
        if not 0 <= int(t) < self.config.n_timesteps:
            raise ValueError(f"timestep {t} outside [0, {self.config.n_timesteps})")
        p = self.params
        s = Tensor(sinusoid(int(t), self.config.d_model)[None, :])
        h = T.gelu(s @ p["time.w1"] + p["time.b1"])
        return h @ p["time.w2"] + p["time.b2"]

    def attention(self, x: Tensor, block: Block, gate_alpha: int = 0,
                  key_bias: np.ndarray | None = None) -> Tensor:
        """Multi-head attention of every token over every token.

        ``key_bias`` (one additive value per key) is only needed when masked
        keys are kept in the sequence; :meth:`forward` drops them instead.
        """
        cfg = self.config
        L, d = x.shape
        H, hd = cfg.n_heads, cfg.head_dim
        p = block.params
        heads = []
        for proj in PROJECTIONS:
            y = adapted_projection(x, p[f"attn.{proj}"], block.adapter(proj, "motion"),
                                   block.adapter(proj, "content"), gate_alpha)
            heads.append(T.transpose(T.reshape(y, (L, H, hd)), (1, 0, 2)))
        q, k, v = heads
        scores = T.scale(q, 1.0 / math.sqrt(hd)) @ T.transpose(k, (0, 2, 1))
        if key_bias is not None:
            scores = scores + Tensor(key_bias)
        w = T.softmax(scores, axis=-1)
        o = T.reshape(T.transpose(w @ v, (1, 0, 2)), (L, d))
        return o @ p["attn.o"]

    def embed_video(self, tokens: Tensor, pos: np.ndarray) -> Tensor:
        p = self.params
        h = tokens @ p["embed.patch.weight"] + p["embed.patch.bias"]
        h = h + T.gather_rows(p["embed.clip"], pos[:, 0])
        h = h + T.gather_rows(p["embed.frame"], pos[:, 1])
        return h + T.gather_rows(p["embed.patch_pos"], pos[:, 2])

    def forward(self, seq, ctx: TextContext, t: int, gate_alpha: int | None = None) -> Tensor:
        """Noise prediction for the video tokens of ``seq`` (packed latents)."""
        cfg = self.config
        gate = self.gate if gate_alpha is None else check_gate(gate_alpha)
        if isinstance(seq, PackedSequence):
            tokens, pos = T.as_tensor(seq.tokens), seq.position_ids
        else:
            tokens = T.as_tensor(seq)
            frames = tokens.shape[0] // (4 * cfg.grid[0] * cfg.grid[1])
            pos = position_ids(frames, cfg.grid)
        if tokens.shape[1] != cfg.patch_dim:
            raise T.ShapeError(f"tokens carry {tokens.shape[1]} features, expected {cfg.patch_dim}")
        # padded text keys are dropped outright: equivalent to masking them
        # as keys, since nothing ever attends to them
        keep = np.flatnonzero(~ctx.pad)
        text = ctx.embeddings if keep.size == ctx.pad.size else T.gather_rows(ctx.embeddings, keep)
        n_text = text.shape[0]
        video = self.embed_video(tokens, pos)
        h = T.concat([text, video], axis=0)
        key_bias = None
        cond = T.gelu(self.timestep_embed(t))
        for block in self.blocks:
            shift, scl = block.modulation(cond)
            one_plus = scl + 1.0
            x = T.layer_norm(h) * one_plus + shift
            h = h + self.attention(x, block, gate, key_bias)
            x = T.layer_norm(h) * one_plus + shift
            p = block.params
            h = h + (T.gelu(x @ p["ff.w1"] + p["ff.b1"]) @ p["ff.w2"] + p["ff.b2"])
        hv = h[n_text:]
        p = self.params
        mod = cond @ p["final.ada.weight"] + p["final.ada.bias"]
        d = cfg.d_model
        x = T.layer_norm(hv) * (mod[0, d:] + 1.0) + mod[0, :d]
        return x @ p["final.head.weight"] + p["final.head.bias"]

    __call__ = forward
