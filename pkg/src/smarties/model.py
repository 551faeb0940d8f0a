"""Sensor-agnostic masked autoencoder: masking, encoding, decoding and the masked loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .mixup import round_half_up
from .registry import DEFAULT_C_MAX, BandResolution, ProjectionBank
from .tokenizer import reproject_tensor


@dataclass
class ModelConfig:
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    decoder_dim: int = 32
    decoder_depth: int = 1
    decoder_heads: int = 4
    patch_size: int = 8
    img_size: int = 64
    mask_ratio: float = 0.75
    mixup_ratio: float = 0.5
    c_max: int = DEFAULT_C_MAX
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.decoder_dim % self.decoder_heads:
            raise ValueError(f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}")
        if self.img_size % self.patch_size:
            raise ValueError(f"patch_size {self.patch_size} does not divide img_size {self.img_size}")
        if self.embed_dim % 4 or self.decoder_dim % 4:
            raise ValueError("embedding dims must be divisible by 4 for 2-D sin-cos encodings")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if not 0.0 <= self.mixup_ratio <= 1.0:
            raise ValueError(f"mixup_ratio must be in [0, 1], got {self.mixup_ratio}")

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def sincos_pe(n_rows: int, n_cols: int, dim: int) -> np.ndarray:
    """2-D sin-cos table of shape (n_rows * n_cols, dim), rows in row-major grid order.

    The first half of the channels encodes the column index, the second half the
    row index; each half is ``[sin(pos * w_k), cos(pos * w_k)]`` with
    ``w_k = 10000 ** (-k / (dim / 4))``.
    """
    if dim % 4:
        raise ValueError(f"positional dim {dim} must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter)

    def one_axis(pos: np.ndarray) -> np.ndarray:
        out = np.outer(pos.astype(np.float64), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    rows, cols = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    return np.concatenate([one_axis(cols.ravel()), one_axis(rows.ravel())], axis=1)


@dataclass(frozen=True)
class MaskPlan:
    ids_keep: np.ndarray
    ids_mask: np.ndarray

    def __post_init__(self) -> None:
        n = self.ids_keep.size + self.ids_mask.size
        if not np.array_equal(np.sort(np.concatenate([self.ids_keep, self.ids_mask])), np.arange(n)):
            raise ValueError("mask plan must partition the token positions")

    @property
    def n_patches(self) -> int:
        return self.ids_keep.size + self.ids_mask.size

    def masked(self) -> np.ndarray:
        out = np.zeros(self.n_patches, dtype=bool)
        out[self.ids_mask] = True
        return out

    @classmethod
    def keep_all(cls, n_patches: int) -> "MaskPlan":
        return cls(np.arange(n_patches), np.zeros(0, dtype=np.int64))


def n_masked(n_patches: int, ratio: float) -> int:
    return round_half_up(ratio * n_patches)


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    k = n_masked(n_patches, ratio)
    perm = rng.permutation(n_patches)
    return MaskPlan(np.sort(perm[k:]), np.sort(perm[:k]))


def stack_plans(plans: Sequence[MaskPlan]) -> torch.Tensor:
    keep = [p.ids_keep for p in plans]
    if len({k.size for k in keep}) != 1:
        raise ValueError("plans in one batch must keep the same number of tokens")
    return torch.as_tensor(np.stack(keep), dtype=torch.long)


class Block(nn.Module):
    """Pre-norm transformer block: attention then a 4x GELU MLP, both residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.heads = heads
        hidden = dim * mlp_ratio
        self.norm1_w = nn.Parameter(torch.ones(dim))
        self.norm1_b = nn.Parameter(torch.zeros(dim))
        self.qkv_w = nn.Parameter(nx.xavier_uniform((3 * dim, dim), rng))
        # no key bias: softmax is invariant to it, so its gradient is identically zero
        self.q_b = nn.Parameter(torch.zeros(dim))
        self.v_b = nn.Parameter(torch.zeros(dim))
        self.proj_w = nn.Parameter(nx.xavier_uniform((dim, dim), rng))
        self.proj_b = nn.Parameter(torch.zeros(dim))
        self.norm2_w = nn.Parameter(torch.ones(dim))
        self.norm2_b = nn.Parameter(torch.zeros(dim))
        self.fc1_w = nn.Parameter(nx.xavier_uniform((hidden, dim), rng))
        self.fc1_b = nn.Parameter(torch.zeros(hidden))
        self.fc2_w = nn.Parameter(nx.xavier_uniform((dim, hidden), rng))
        self.fc2_b = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = nx.layer_norm(x, self.norm1_w, self.norm1_b)
        qkv_b = torch.cat([self.q_b, torch.zeros_like(self.q_b), self.v_b])
        x = x + nx.multi_head_attention(h, self.qkv_w, qkv_b, self.proj_w, self.proj_b, self.heads)
        h = nx.layer_norm(x, self.norm2_w, self.norm2_b)
        return x + nx.gelu_mlp(h, self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b)


class MaeModel(nn.Module):
    """Encoder/decoder transformer shared by all sensors.

    Tokens enter already projected by a :class:`ProjectionBank`; the decoder's
    output is mapped back to the embedding width by ``head`` so the bank's
    reprojection layers can turn it into per-band pixels.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None) -> None:
        super().__init__()
        self.config = config
        rng = rng if rng is not None else nx.make_rng(config.seed, "model-init")
        d, dd = config.embed_dim, config.decoder_dim
        self.cls_token = nn.Parameter(nx.normal_init((d,), 0.02, rng))
        self.blocks = nn.ModuleList(Block(d, config.heads, config.mlp_ratio, rng) for _ in range(config.depth))
        self.norm_w = nn.Parameter(torch.ones(d))
        self.norm_b = nn.Parameter(torch.zeros(d))

        self.adapter_w = nn.Parameter(nx.xavier_uniform((dd, d), rng))
        self.adapter_b = nn.Parameter(torch.zeros(dd))
        self.mask_token = nn.Parameter(nx.normal_init((dd,), 0.02, rng))
        self.decoder_blocks = nn.ModuleList(
            Block(dd, config.decoder_heads, config.mlp_ratio, rng) for _ in range(config.decoder_depth))
        self.decoder_norm_w = nn.Parameter(torch.ones(dd))
        self.decoder_norm_b = nn.Parameter(torch.zeros(dd))
        self.head_w = nn.Parameter(nx.xavier_uniform((d, dd), rng))
        self.head_b = nn.Parameter(torch.zeros(d))

        g = config.grid
        self.register_buffer("pos_embed", torch.as_tensor(sincos_pe(g, g, d), dtype=torch.float32), persistent=False)
        self.register_buffer("decoder_pos_embed", torch.as_tensor(sincos_pe(g, g, dd), dtype=torch.float32),
                             persistent=False)

    def pe_for(self, n_rows: int, n_cols: int, decoder: bool = False) -> torch.Tensor:
        table = self.decoder_pos_embed if decoder else self.pos_embed
        if table.shape[0] == n_rows * n_cols and n_rows == self.config.grid:
            return table
        dim = self.config.decoder_dim if decoder else self.config.embed_dim
        return torch.as_tensor(sincos_pe(n_rows, n_cols, dim), dtype=table.dtype)

    # -- encoder ---------------------------------------------------------------

    def encode(self, tokens: torch.Tensor, ids_keep: torch.Tensor | None = None,
               grid: tuple[int, int] | None = None) -> torch.Tensor:
        """(B, N, D) tokens -> (B, 1 + K, D) latents; ``ids_keep`` (B, K) selects visible tokens."""
        b, n, d = tokens.shape
        rows, cols = grid or (self.config.grid, self.config.grid)
        if rows * cols != n:
            raise ValueError(f"{n} tokens do not fill a {rows}x{cols} grid")
        x = tokens + self.pe_for(rows, cols)
        if ids_keep is not None:
            x = torch.gather(x, 1, ids_keep.unsqueeze(-1).expand(-1, -1, d))
        cls = self.cls_token.expand(b, 1, d)
        x = torch.cat([cls, x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = nx.layer_norm(x, self.norm_w, self.norm_b)
        return nx.check_finite(x, "encoder output")

    # -- decoder ---------------------------------------------------------------

    def decode(self, latents: torch.Tensor, ids_keep: torch.Tensor, n_patches: int | None = None,
               grid: tuple[int, int] | None = None) -> torch.Tensor:
        """(B, 1 + K, D) latents -> (B, N_P, decoder_dim); [CLS] is dropped from the output."""
        rows, cols = grid or (self.config.grid, self.config.grid)
        n = rows * cols if n_patches is None else n_patches
        b, k1, _ = latents.shape
        if ids_keep.shape != (b, k1 - 1):
            raise ValueError(f"mask plan keeps {tuple(ids_keep.shape)} tokens but latents are {tuple(latents.shape)}")
        x = nx.linear(latents, self.adapter_w, self.adapter_b)
        dd = x.shape[-1]
        full = self.mask_token.to(x.dtype).expand(b, n, dd)
        full = full.scatter(1, ids_keep.unsqueeze(-1).expand(-1, -1, dd), x[:, 1:])
        full = full + self.pe_for(rows, cols, decoder=True)
        x = torch.cat([x[:, :1], full], dim=1)
        for blk in self.decoder_blocks:
            x = blk(x)
        return nx.check_finite(x[:, 1:], "decoder output")

    def to_embedding(self, decoded: torch.Tensor) -> torch.Tensor:
        """Decoder tokens -> embedding-width vectors consumed by the reprojection layers."""
        h = nx.layer_norm(decoded, self.decoder_norm_w, self.decoder_norm_b)
        return nx.linear(h, self.head_w, self.head_b)

    def encoder_parameters(self) -> list[nn.Parameter]:
        return [self.cls_token, self.norm_w, self.norm_b, *self.blocks.parameters()]


# -- loss ----------------------------------------------------------------------

def per_token_error(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over each token's own C * S * S pixels: (B, N, C, P) -> (B, N)."""
    return ((pred - target) ** 2).mean(dim=(-2, -1))


def stream_loss(embedded: torch.Tensor, own: tuple[torch.Tensor, Sequence[BandResolution]],
                other: tuple[torch.Tensor, Sequence[BandResolution]], from_own: torch.Tensor,
                masked: torch.Tensor, bank: ProjectionBank) -> torch.Tensor:
    """Masked loss of one mixed stream, per sample: (B,).

    ``from_own[b, n]`` says position n of this stream came from the ``own`` sensor;
    otherwise the token is reconstructed and scored against the ``other`` sensor.
    """
    tgt_own, res_own = own
    tgt_other, res_other = other
    err_own = per_token_error(reproject_tensor(embedded, res_own, bank), tgt_own)
    err_other = per_token_error(reproject_tensor(embedded, res_other, bank), tgt_other)
    err = torch.where(from_own, err_own, err_other)
    err = torch.where(masked, err, torch.zeros_like(err))
    return err.sum(dim=1) / masked.sum(dim=1).to(err.dtype)


def reconstruct_and_loss(model: MaeModel, bank: ProjectionBank, decoded_a: torch.Tensor, decoded_b: torch.Tensor,
                         targets_a: torch.Tensor, targets_b: torch.Tensor,
                         res_a: Sequence[BandResolution], res_b: Sequence[BandResolution],
                         keep_a: torch.Tensor, masked_a: torch.Tensor, masked_b: torch.Tensor,
                         reduce: bool = True) -> torch.Tensor:
    """Sum of the two mixed streams' masked-token losses.

    ``keep_a`` (B, N) is the mix mask: True where stream a' holds sensor a's token
    (so stream b' holds sensor b's). ``masked_*`` (B, N) mark the positions each
    stream hid from the encoder. Targets are the original band patches
    (B, N, C, S*S) of each sensor.
    """
    la = stream_loss(model.to_embedding(decoded_a), (targets_a, res_a), (targets_b, res_b), keep_a, masked_a, bank)
    lb = stream_loss(model.to_embedding(decoded_b), (targets_b, res_b), (targets_a, res_a), keep_a, masked_b, bank)
    total = la + lb
    return total.mean() if reduce else total
