"""Spectrum-aware tokenization of multi-band patches and the inverse reprojection.

Grids are stored row-major: a scene of H x W pixels with patch side S becomes
``n_rows = H / S`` by ``n_cols = W / S`` patches, flattened to index
``row * n_cols + col``. Inside a patch the layout is band-major: all S*S pixels
of band 1 (row-major), then band 2, and so on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import SceneRaster
from .registry import BandResolution, ProjectionBank, RegistryError, SensorSpec


@dataclass
class PatchGrid:
    patches: torch.Tensor  # (n_rows, n_cols, C * S * S)
    sensor: SensorSpec | None
    patch_size: int

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.patches.shape[0], self.patches.shape[1]

    @property
    def n_bands(self) -> int:
        return self.patches.shape[2] // (self.patch_size * self.patch_size)

    def as_band_patches(self) -> torch.Tensor:
        """(N_P, C, S*S) view used by the batched kernels."""
        n_rows, n_cols = self.grid_shape
        return self.patches.reshape(n_rows * n_cols, self.n_bands, -1)


@dataclass
class TokenGrid:
    tokens: torch.Tensor  # (n_rows, n_cols, D)
    provenance: np.ndarray  # (n_rows, n_cols) of sensor names

    def __post_init__(self) -> None:
        if self.provenance.shape != tuple(self.tokens.shape[:2]):
            raise ValueError("provenance must cover every grid position")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("token values must be finite")

    @classmethod
    def uniform(cls, tokens: torch.Tensor, sensor_name: str) -> "TokenGrid":
        prov = np.full(tuple(tokens.shape[:2]), sensor_name, dtype=object)
        return cls(tokens, prov)


def resize(pixels: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bicubic resize of a (..., C, H, W) tensor; identity when already at size."""
    if pixels.shape[-2:] == (height, width):
        return pixels
    lead = pixels.shape[:-3]
    x = pixels.reshape(-1, *pixels.shape[-3:])
    out = F.interpolate(x, size=(height, width), mode="bicubic", align_corners=False)
    return out.reshape(*lead, pixels.shape[-3], height, width)


def patchify_tensor(pixels: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, N_P, C, S*S)."""
    b, c, h, w = pixels.shape
    s = patch_size
    if h % s or w % s:
        raise ValueError(f"patch size {s} does not divide image size {h}x{w}")
    x = pixels.reshape(b, c, h // s, s, w // s, s)
    x = x.permute(0, 2, 4, 1, 3, 5)  # b, rows, cols, c, s, s
    return x.reshape(b, (h // s) * (w // s), c, s * s)


def unpatchify_tensor(patches: torch.Tensor, patch_size: int, n_rows: int, n_cols: int) -> torch.Tensor:
    """(B, N_P, C, S*S) -> (B, C, H, W)."""
    b, n, c, _ = patches.shape
    s = patch_size
    x = patches.reshape(b, n_rows, n_cols, c, s, s).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, n_rows * s, n_cols * s)


def patchify(image: SceneRaster | np.ndarray, patch_size: int, target: tuple[int, int],
             sensor: SensorSpec | None = None, dtype: torch.dtype = torch.float64) -> PatchGrid:
    """Resize to ``target`` = (W, H) with bicubic filtering, then tile into S x S patches."""
    width, height = target
    if width % patch_size or height % patch_size:
        raise ValueError(f"patch size {patch_size} does not divide target {width}x{height}")
    pix = image.pixels if isinstance(image, SceneRaster) else image
    x = resize(torch.as_tensor(np.asarray(pix), dtype=dtype)[None], height, width)
    rows, cols = height // patch_size, width // patch_size
    patches = patchify_tensor(x, patch_size)[0].reshape(rows, cols, -1)
    return PatchGrid(patches, sensor, patch_size)


def check_resolutions(resolutions: Sequence[BandResolution], n_bands: int, bank: ProjectionBank) -> None:
    if len(resolutions) != n_bands:
        raise RegistryError(f"{len(resolutions)} resolutions for {n_bands} bands")
    for res in resolutions:
        for lid in res.layer_ids():
            bank.index_of(lid)


def _stack_weights(resolutions: Sequence[BandResolution], weights, biases) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-band effective weights: each band's resolution terms folded into one matrix."""
    ws, bs = [], []
    for res in resolutions:
        w_eff = b_eff = None
        for lid, w in res.terms:
            i = lid - 1
            wi = weights[i] if w == 1.0 else w * weights[i]
            bi = biases[i] if w == 1.0 else w * biases[i]
            w_eff = wi if w_eff is None else w_eff + wi
            b_eff = bi if b_eff is None else b_eff + bi
        ws.append(w_eff)
        bs.append(b_eff)
    return torch.stack(ws), torch.stack(bs)


def project_tensor(patches: torch.Tensor, resolutions: Sequence[BandResolution],
                   bank: ProjectionBank) -> torch.Tensor:
    """(..., C, S*S) band patches -> (..., D) tokens, averaged over bands and scaled by C_max."""
    n_bands = patches.shape[-2]
    check_resolutions(resolutions, n_bands, bank)
    w, b = _stack_weights(resolutions, bank.f_weight, bank.f_bias)  # (C, D, P), (C, D)
    tokens = torch.einsum("...cp,cdp->...d", patches, w) + b.sum(dim=0)
    return tokens * (bank.c_max / n_bands)


def reproject_tensor(tokens: torch.Tensor, resolutions: Sequence[BandResolution],
                     bank: ProjectionBank) -> torch.Tensor:
    """(..., D) tokens -> (..., C, S*S) band patches."""
    check_resolutions(resolutions, len(resolutions), bank)
    w, b = _stack_weights(resolutions, bank.r_weight, bank.r_bias)  # (C, P, D), (C, P)
    return torch.einsum("...d,cpd->...cp", tokens, w) + b


def project(grid: PatchGrid, bank: ProjectionBank, resolutions: Sequence[BandResolution]) -> TokenGrid:
    tokens = project_tensor(grid.as_band_patches(), resolutions, bank)
    rows, cols = grid.grid_shape
    name = grid.sensor.name if grid.sensor is not None else "?"
    return TokenGrid.uniform(tokens.reshape(rows, cols, -1), name)


def reproject(token: torch.Tensor, sensor: SensorSpec, bank: ProjectionBank,
              resolutions: Sequence[BandResolution]) -> torch.Tensor:
    """One D-vector -> flat band-major patch of length C * S * S."""
    if len(resolutions) != sensor.n_bands:
        raise RegistryError(f"sensor {sensor.name!r} has {sensor.n_bands} bands, got {len(resolutions)} resolutions")
    if not torch.isfinite(token).all():
        raise ValueError("token must be finite")
    return reproject_tensor(token, resolutions, bank).reshape(-1)
