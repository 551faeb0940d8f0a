"""Sensor and band wavelength metadata, and the bank of per-range projection layers.

A projection layer is identified by its wavelength interval. Bands of a single
sensor that repeat an interval (Sentinel-1 VV and VH both cover 5.5e7-5.6e7 nm)
are told apart by their occurrence index within that sensor, so each still
gets its own layer; across sensors an identical ``(min, max, occurrence)`` key
shares the layer.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .numerics import uniform_init

DEFAULT_C_MAX = 12


class RegistryError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class SpectralRange:
    lambda_min_nm: float
    lambda_max_nm: float

    def __post_init__(self) -> None:
        lo, hi = self.lambda_min_nm, self.lambda_max_nm
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise RegistryError(f"non-finite spectral range ({lo}, {hi})")
        if lo <= 0 or hi <= 0:
            raise RegistryError(f"spectral range must be positive, got ({lo}, {hi})")
        if not lo < hi:
            raise RegistryError(f"degenerate spectral range ({lo}, {hi})")

    @property
    def center_nm(self) -> float:
        return center_nm(self)


def center_nm(rng: SpectralRange) -> float:
    return (rng.lambda_min_nm + rng.lambda_max_nm) / 2.0


@dataclass(frozen=True)
class Band:
    band_id: str
    range: SpectralRange


@dataclass
class HarmonizeStats:
    """Per-band dataset statistics: 1%/99% percentiles, then mean/std of the scaled values."""

    p1: np.ndarray
    p99: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        self.p1, self.p99, self.mean, self.std = (
            np.asarray(a, dtype=np.float64) for a in (self.p1, self.p99, self.mean, self.std)
        )
        if not (self.p1.shape == self.p99.shape == self.mean.shape == self.std.shape):
            raise ValueError("stats arrays must share one per-band shape")
        if np.any(self.p1 >= self.p99):
            raise ValueError("stats require p1 < p99 for every band")
        if np.any(self.std <= 0):
            raise ValueError("stats require std > 0 for every band")

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("p1", "p99", "mean", "std")}

    @classmethod
    def from_json(cls, obj: dict) -> "HarmonizeStats":
        return cls(obj["p1"], obj["p99"], obj["mean"], obj["std"])


@dataclass
class SensorSpec:
    name: str
    bands: list[Band]
    stats: HarmonizeStats | None = None

    def __post_init__(self) -> None:
        if not self.bands:
            raise RegistryError(f"sensor {self.name!r} has no bands")
        ids = [b.band_id for b in self.bands]
        if len(set(ids)) != len(ids):
            raise RegistryError(f"sensor {self.name!r} has duplicate band ids")
        if self.stats is not None and self.stats.p1.shape != (len(self.bands),):
            raise RegistryError(f"sensor {self.name!r}: stats do not match band count")

    @property
    def n_bands(self) -> int:
        return len(self.bands)

    @property
    def ranges(self) -> list[SpectralRange]:
        return [b.range for b in self.bands]

    def layer_keys(self) -> list[tuple[float, float, int]]:
        return layer_keys(self.ranges)

    def to_json(self) -> dict:
        out: dict = {
            "name": self.name,
            "bands": [
                {"id": b.band_id, "lambda_min_nm": b.range.lambda_min_nm, "lambda_max_nm": b.range.lambda_max_nm}
                for b in self.bands
            ],
        }
        if self.stats is not None:
            out["stats"] = self.stats.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SensorSpec":
        try:
            bands = [
                Band(str(b["id"]), SpectralRange(float(b["lambda_min_nm"]), float(b["lambda_max_nm"])))
                for b in obj["bands"]
            ]
            stats = HarmonizeStats.from_json(obj["stats"]) if obj.get("stats") is not None else None
            return cls(str(obj["name"]), bands, stats)
        except (KeyError, TypeError) as exc:
            raise RegistryError(f"malformed sensor spec: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SensorSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def layer_keys(ranges: Sequence[SpectralRange]) -> list[tuple[float, float, int]]:
    seen: dict[SpectralRange, int] = {}
    keys = []
    for r in ranges:
        occ = seen.get(r, 0)
        seen[r] = occ + 1
        keys.append((r.lambda_min_nm, r.lambda_max_nm, occ))
    return keys


def bundled_sensor(name: str) -> SensorSpec:
    """Load one of the shipped sensor specs: ``S2``, ``Maxar`` or ``S1``."""
    files = {"S2": "sentinel2.json", "Maxar": "maxar.json", "S1": "sentinel1.json"}
    if name not in files:
        raise RegistryError(f"no bundled sensor {name!r}; choose from {sorted(files)}")
    text = resources.files("smarties").joinpath("sensors").joinpath(files[name]).read_text()
    return SensorSpec.from_json(json.loads(text))


# -- projection bank ---------------------------------------------------------

@dataclass(frozen=True)
class LayerInfo:
    layer_id: int  # 1-based, f_1 ... f_n
    range: SpectralRange
    occurrence: int = 0

    @property
    def key(self) -> tuple[float, float, int]:
        return (self.range.lambda_min_nm, self.range.lambda_max_nm, self.occurrence)

    @property
    def center(self) -> float:
        return center_nm(self.range)


class ProjectionBank(nn.Module):
    """Paired projection (``f_i``: S^2 -> D) and reprojection (``r_i``: D -> S^2) layers."""

    def __init__(self, embed_dim: int, patch_size: int, c_max: int = DEFAULT_C_MAX,
                 dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        if embed_dim <= 0 or patch_size <= 0 or c_max <= 0:
            raise RegistryError("bank dimensions must be positive")
        self.embed_dim = embed_dim
        self.patch_size = patch_size
        self.c_max = c_max
        self.dtype = dtype
        self.layers: list[LayerInfo] = []
        self.sensors: dict[str, SensorSpec] = {}
        self.f_weight = nn.ParameterList()
        self.f_bias = nn.ParameterList()
        self.r_weight = nn.ParameterList()
        self.r_bias = nn.ParameterList()
        self._by_key: dict[tuple[float, float, int], int] = {}

    @property
    def pixels(self) -> int:
        return self.patch_size * self.patch_size

    def __len__(self) -> int:
        return len(self.layers)

    def index_of(self, layer_id: int) -> int:
        idx = layer_id - 1
        if not 0 <= idx < len(self.layers):
            raise RegistryError(f"layer f_{layer_id} is not in the bank")
        return idx

    def find(self, key: tuple[float, float, int]) -> LayerInfo | None:
        idx = self._by_key.get(key)
        return None if idx is None else self.layers[idx]

    def add_layer(self, rng_range: SpectralRange, occurrence: int, rng: np.random.Generator) -> LayerInfo:
        s2, d = self.pixels, self.embed_dim
        info = LayerInfo(len(self.layers) + 1, rng_range, occurrence)
        self.f_weight.append(nn.Parameter(uniform_init((d, s2), 1.0 / math.sqrt(s2), rng, self.dtype)))
        self.f_bias.append(nn.Parameter(torch.zeros(d, dtype=self.dtype)))
        self.r_weight.append(nn.Parameter(uniform_init((s2, d), 1.0 / math.sqrt(d), rng, self.dtype)))
        self.r_bias.append(nn.Parameter(torch.zeros(s2, dtype=self.dtype)))
        self.layers.append(info)
        self._by_key[info.key] = len(self.layers) - 1
        return info

    def f(self, layer_id: int, x: torch.Tensor) -> torch.Tensor:
        i = self.index_of(layer_id)
        return torch.nn.functional.linear(x, self.f_weight[i], self.f_bias[i])

    def r(self, layer_id: int, t: torch.Tensor) -> torch.Tensor:
        i = self.index_of(layer_id)
        return torch.nn.functional.linear(t, self.r_weight[i], self.r_bias[i])

    def layer_table(self) -> list[dict]:
        return [
            {"layer_id": l.layer_id, "lambda_min_nm": l.range.lambda_min_nm,
             "lambda_max_nm": l.range.lambda_max_nm, "occurrence": l.occurrence}
            for l in self.layers
        ]

    def describe(self) -> dict:
        return {
            "embed_dim": self.embed_dim, "patch_size": self.patch_size, "c_max": self.c_max,
            "layers": self.layer_table(),
            "sensors": [s.to_json() for s in self.sensors.values()],
        }

    @classmethod
    def from_description(cls, desc: dict, dtype: torch.dtype = torch.float32) -> "ProjectionBank":
        """Rebuild the layer table with zero weights; callers load the weights afterwards."""
        bank = cls(desc["embed_dim"], desc["patch_size"], desc["c_max"], dtype)
        zero = np.random.Generator(np.random.PCG64(0))
        for row in desc["layers"]:
            bank.add_layer(SpectralRange(row["lambda_min_nm"], row["lambda_max_nm"]), row["occurrence"], zero)
        for s in desc["sensors"]:
            spec = SensorSpec.from_json(s)
            bank.sensors[spec.name] = spec
        return bank


def register_sensor(spec: SensorSpec, bank: ProjectionBank, rng: np.random.Generator) -> ProjectionBank:
    """Return a copy of ``bank`` with fresh layer pairs for each unseen band range of ``spec``.

    The input bank is never modified, so a failed registration leaves it intact.
    """
    if spec.name in bank.sensors:
        raise RegistryError(f"sensor {spec.name!r} is already registered")
    if spec.n_bands > bank.c_max:
        raise RegistryError(f"sensor {spec.name!r} has {spec.n_bands} bands, more than C_max={bank.c_max}")
    out = copy.deepcopy(bank)
    for key, band in zip(spec.layer_keys(), spec.bands):
        if out.find(key) is None:
            out.add_layer(band.range, key[2], rng)
    out.sensors[spec.name] = spec
    return out


def build_bank(sensors: Iterable[SensorSpec], embed_dim: int, patch_size: int, rng: np.random.Generator,
               c_max: int = DEFAULT_C_MAX, dtype: torch.dtype = torch.float32) -> ProjectionBank:
    bank = ProjectionBank(embed_dim, patch_size, c_max, dtype)
    for spec in sensors:
        bank = register_sensor(spec, bank, rng)
    return bank


# -- band resolution ---------------------------------------------------------

class Mode(str, Enum):
    EXACT = "Exact"
    INTERPOLATED = "Interpolated"
    EXTRAPOLATED = "Extrapolated"


class Policy(str, Enum):
    EXACT_ONLY = "exact_only"
    INTERPOLATE = "interpolate"
    NEAREST = "nearest"


@dataclass(frozen=True)
class BandResolution:
    mode: Mode
    terms: tuple[tuple[int, float], ...]
    nearest: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        total = sum(w for _, w in self.terms)
        if total != 1.0:
            raise RegistryError(f"resolution weights sum to {total!r}, not 1")
        if self.mode is Mode.EXACT and (len(self.terms) != 1 or self.terms[0][1] != 1.0):
            raise RegistryError("Exact resolution must have a single unit-weight term")
        if self.mode is Mode.INTERPOLATED and len(self.terms) != 2:
            raise RegistryError("Interpolated resolution must have two terms")

    @property
    def extrapolated(self) -> bool:
        return self.mode is Mode.EXTRAPOLATED

    def layer_ids(self) -> list[int]:
        return [lid for lid, _ in self.terms]

    def describe(self) -> str:
        if self.nearest and self.mode is not Mode.EXTRAPOLATED:
            return f"Nearest f_{self.terms[0][0]}:1.0000"
        return " ".join([self.mode.value] + [f"f_{lid}:{w:.4f}" for lid, w in self.terms])


def _by_center(bank: ProjectionBank) -> list[LayerInfo]:
    return sorted(bank.layers, key=lambda l: (l.center, l.layer_id))


def _nearest(layers: list[LayerInfo], c: float) -> LayerInfo:
    # sorted by center, so min() keeps the lower-wavelength layer on ties
    return min(layers, key=lambda l: abs(l.center - c))


def resolve_band(band_range: SpectralRange, bank: ProjectionBank, policy: Policy | str = Policy.INTERPOLATE,
                 occurrence: int = 0) -> BandResolution:
    policy = Policy(policy)
    if len(bank) == 0:
        raise RegistryError("cannot resolve a band against an empty bank")
    hit = bank.find((band_range.lambda_min_nm, band_range.lambda_max_nm, occurrence))
    if hit is None and occurrence > 0:
        hit = bank.find((band_range.lambda_min_nm, band_range.lambda_max_nm, 0))
    if hit is not None:
        return BandResolution(Mode.EXACT, ((hit.layer_id, 1.0),))
    if policy is Policy.EXACT_ONLY:
        raise RegistryError(
            f"no projection layer for range {band_range.lambda_min_nm}-{band_range.lambda_max_nm} nm")

    c = center_nm(band_range)
    layers = _by_center(bank)
    if policy is Policy.NEAREST:
        near = _nearest(layers, c)
        mode = Mode.EXTRAPOLATED if not layers[0].center <= c <= layers[-1].center else Mode.INTERPOLATED
        if mode is Mode.EXTRAPOLATED:
            return BandResolution(mode, ((near.layer_id, 1.0),), nearest=True)
        # a single-layer choice inside the span is reported as a degenerate two-term interpolation
        return BandResolution(Mode.INTERPOLATED, ((near.layer_id, 1.0), (near.layer_id, 0.0)), nearest=True)

    if c < layers[0].center or c > layers[-1].center:
        return BandResolution(Mode.EXTRAPOLATED, ((_nearest(layers, c).layer_id, 1.0),))

    below = [l for l in layers if l.center <= c]
    above = [l for l in layers if l.center > c]
    if above:
        top = max(l.center for l in below)
        lo = next(l for l in below if l.center == top)
        hi = above[0]
    else:
        # c sits on the highest center: that layer becomes the upper bracket
        hi = next(l for l in layers if l.center == c)
        lower = [l for l in layers if l.center < c]
        if not lower:
            return BandResolution(Mode.INTERPOLATED, ((hi.layer_id, 1.0), (hi.layer_id, 0.0)))
        top = max(l.center for l in lower)
        lo = next(l for l in lower if l.center == top)
    w_hi = (c - lo.center) / (hi.center - lo.center)
    w_lo = 1.0 - w_hi
    return BandResolution(Mode.INTERPOLATED, ((lo.layer_id, w_lo), (hi.layer_id, w_hi)))


def resolve_sensor(spec: SensorSpec, bank: ProjectionBank,
                   policy: Policy | str = Policy.INTERPOLATE) -> list[BandResolution]:
    return [
        resolve_band(band.range, bank, policy, occurrence=key[2])
        for band, key in zip(spec.bands, spec.layer_keys())
    ]
