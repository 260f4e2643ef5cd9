"""Toy prompt encoder with layer-index prefixes and learned layer embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, gather_rows

PAD, UNK, EMPTY = 0, 1, 2
RESERVED = ("<pad>", "<unk>", "<empty>")
TEXT_LEN = 16


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def prefix_index(prompt: str, layer_index: int) -> str:
    if layer_index not in (1, 2, 3):
        raise ValueError(f"layer index must be 1, 2 or 3, got {layer_index}")
    return f"{layer_index}, {prompt}"


class Vocabulary:
    """Token table; ids 0-2 are pad / unknown / empty-prompt sentinel."""

    def __init__(self, words: Iterable[str], d_model: int, rng: np.random.Generator | None = None):
        self.words = list(dict.fromkeys(w.lower() for w in words if w.lower() not in RESERVED))
        self.ids = {w: i + len(RESERVED) for i, w in enumerate(self.words)}
        rng = rng or np.random.default_rng(0)
        self.table = Tensor(rng.normal(0.0, 0.02, (len(self), d_model)))

    def __len__(self) -> int:
        return len(self.words) + len(RESERVED)

    def lookup(self, token: str) -> int:
        return self.ids.get(token.lower(), UNK)

    def encode_ids(self, text: str, length: int = TEXT_LEN) -> np.ndarray:
        ids = [self.lookup(t) for t in tokenize(text)][:length]
        return np.array(ids + [PAD] * (length - len(ids)), dtype=np.int64)

    def unknown_count(self, text: str) -> int:
        return sum(self.lookup(t) == UNK for t in tokenize(text))

    def save(self, path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words), encoding="utf-8")

    @classmethod
    def load(cls, path, d_model: int, rng=None) -> "Vocabulary":
        words = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(words, d_model, rng)


class LayerEmbedder:
    def __init__(self, d_model: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(1)
        self.table = Tensor(rng.normal(0.0, 0.02, (3, d_model)))

    def row(self, layer_index: int) -> np.ndarray:
        if layer_index not in (1, 2, 3):
            raise ValueError(f"layer index must be 1, 2 or 3, got {layer_index}")
        return self.table.data[layer_index - 1]


@dataclass
class TextContext:
    embeddings: Tensor          # (3 * T_txt) x d_model
    layer_index: np.ndarray     # per token, values 1..3
    pad: np.ndarray             # per token, True for padding
    ids: np.ndarray

    @property
    def block_len(self) -> int:
        return self.ids.shape[0] // 3


def _context(ids: np.ndarray, vocab: Vocabulary, layers: LayerEmbedder) -> TextContext:
    block = ids.shape[0] // 3
    layer_index = np.repeat(np.arange(1, 4), block)
    emb = gather_rows(vocab.table, ids) + gather_rows(layers.table, layer_index - 1)
    return TextContext(emb, layer_index, ids == PAD, ids)


def encode(prompts: Sequence[str], vocab: Vocabulary, layers: LayerEmbedder,
           length: int = TEXT_LEN, index_prefix: bool = True) -> TextContext:
    """Encode the fg / bg / blended prompts into one context block each.

    Every token of block ``i`` gets layer-embedding row ``i`` added. With
    ``index_prefix`` the prompt text is first prefixed by its layer number.
    """
    if len(prompts) != 3:
        raise ValueError(f"expected 3 prompts, got {len(prompts)}")
    texts = [prefix_index(p, i + 1) if index_prefix else p for i, p in enumerate(prompts)]
    ids = np.concatenate([vocab.encode_ids(t, length) for t in texts])
    return _context(ids, vocab, layers)


def null_context(vocab: Vocabulary, layers: LayerEmbedder, length: int = TEXT_LEN) -> TextContext:
    """Unconditional context: each block is the empty-prompt sentinel plus padding."""
    block = np.full(length, PAD, dtype=np.int64)
    block[0] = EMPTY
    return _context(np.tile(block, 3), vocab, layers)
