"""Cross-sensor token mixup: a position-wise token exchange and its mirror."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .tokenizer import TokenGrid


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MixMask:
    """``m[i, j]`` is True where the mixed stream a' keeps sensor a's token."""

    m: np.ndarray
    ratio: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"mixup ratio must be in [0, 1], got {self.ratio}")
        if self.m.dtype != np.bool_:
            raise ValueError("mix mask must be boolean")

    def complement(self) -> "MixMask":
        return MixMask(~self.m, 1.0 - self.ratio)


def sample_mix_mask(n_rows: int, n_cols: int, ratio: float, rng: np.random.Generator) -> MixMask:
    """Exactly ``round(ratio * N_P)`` ones, placed by a uniform random permutation."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mixup ratio must be in [0, 1], got {ratio}")
    n = n_rows * n_cols
    k = round_half_up(ratio * n)
    flat = np.zeros(n, dtype=bool)
    flat[rng.permutation(n)[:k]] = True
    return MixMask(flat.reshape(n_rows, n_cols), ratio)


def mix_tensors(ta: torch.Tensor, tb: torch.Tensor, keep_a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched exchange: ``keep_a`` is a boolean (..., N) mask broadcast over the last axis."""
    if ta.shape != tb.shape:
        raise ValueError(f"token shapes differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    sel = keep_a.unsqueeze(-1)
    return torch.where(sel, ta, tb), torch.where(sel, tb, ta)


def mix(ta: TokenGrid, tb: TokenGrid, mask: MixMask) -> tuple[TokenGrid, TokenGrid]:
    if ta.tokens.shape != tb.tokens.shape:
        raise ValueError(f"token grids differ: {tuple(ta.tokens.shape)} vs {tuple(tb.tokens.shape)}")
    if mask.m.shape != tuple(ta.tokens.shape[:2]):
        raise ValueError(f"mask {mask.m.shape} does not match grid {tuple(ta.tokens.shape[:2])}")
    keep = torch.as_tensor(mask.m)
    a2, b2 = mix_tensors(ta.tokens, tb.tokens, keep)
    prov_a = np.where(mask.m, ta.provenance, tb.provenance)
    prov_b = np.where(mask.m, tb.provenance, ta.provenance)
    return TokenGrid(a2, prov_a), TokenGrid(b2, prov_b)
