"""Gated motion adapters and always-on content adapters on Q/K/V projections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, matmul, transpose

FAMILIES = ("motion", "content")
PROJECTIONS = ("q", "k", "v")


@dataclass
class LoraAdapter:
    """Low-rank update ``A @ B.T`` (column convention) on one projection.

    ``A`` is ``d_out x r``, ``B`` is ``d_in x r``; ``B`` starts at zero so a
    freshly attached adapter contributes nothing.
    """

    A: Tensor
    B: Tensor
    family: str
    host: tuple[int, str]

    @classmethod
    def create(cls, d_in: int, d_out: int, rank: int, family: str, host: tuple[int, str],
               rng: np.random.Generator, std: float = 0.02) -> "LoraAdapter":
        if family not in FAMILIES:
            raise ValueError(f"unknown adapter family {family!r}")
        A = Tensor(rng.normal(0.0, std, (d_out, rank)))
        B = Tensor(np.zeros((d_in, rank), dtype=np.float32))
        return cls(A, B, family, host)

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def key(self) -> str:
        block, proj = self.host
        return f"({block}, {proj}, {self.family})"

    def __call__(self, z: Tensor) -> Tensor:
        return matmul(matmul(z, self.B), transpose(self.A, (1, 0)))

    def dense(self) -> np.ndarray:
        """The update as a ``d_in x d_out`` row-convention matrix."""
        return self.B.data @ self.A.data.T


def check_gate(alpha) -> int:
    if isinstance(alpha, (bool, np.bool_)) or alpha not in (0, 1):
        raise ValueError(f"gate must be exactly 0 or 1, got {alpha!r}")
    return int(alpha)


def adapted_projection(z: Tensor, W: Tensor, motion: LoraAdapter | None = None,
                       content: LoraAdapter | None = None, alpha: int = 0) -> Tensor:
    """``z W + alpha * motion(z) + content(z)`` with row-vector inputs ``z``."""
    alpha = check_gate(alpha)
    d_in, d_out = W.shape
    for ad in (motion, content):
        if ad is not None and (ad.B.shape[0] != d_in or ad.A.shape[0] != d_out):
            raise ShapeError(f"adapter {ad.key()} does not fit a {d_in}x{d_out} projection")
    out = matmul(z, W)
    if motion is not None and alpha == 1:
        out = out + motion(z)
    if content is not None:
        out = out + content(z)
    return out


def select_trainable(model, stage: int) -> dict[str, Tensor]:
    """Named parameters optimised in ``stage``; everything else stays frozen.

    Stage 1 trains the designated blocks' base weights plus embedders, text
    tables and heads; stage 2 the motion adapters; stage 3 the content adapters.
    """
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    params = model.named_parameters()
    if stage == 1:
        designated = tuple(f"blocks.{i}." for i in model.config.trainable_blocks)
        return {k: v for k, v in params.items()
                if not k.startswith("blocks.") or (k.startswith(designated) and ".lora." not in k)}
    family = "motion" if stage == 2 else "content"
    return {k: v for k, v in params.items() if f".lora.{family}." in k}


def set_gate(model, alpha) -> None:
    model.gate = check_gate(alpha)
