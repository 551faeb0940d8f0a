"""Scene rasters on disk, band harmonization, pair manifests and synthetic paired scenes."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .registry import HarmonizeStats, SensorSpec, SpectralRange

SSR_MAGIC = b"SSR1"
SSR_VERSION = 1
_HEADER = struct.Struct("<4sHHIII")


class DataError(ValueError):
    """Malformed raster, manifest or statistics input."""


class SSRFormatError(DataError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class SceneRaster:
    """A W x H x C image; ``pixels`` is band-sequential with shape (C, H, W)."""

    width: int
    height: int
    bands: list[SpectralRange]
    pixels: np.ndarray

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels)
        if self.pixels.shape != (len(self.bands), self.height, self.width):
            raise DataError(
                f"pixel array {self.pixels.shape} does not match "
                f"(C={len(self.bands)}, H={self.height}, W={self.width})")

    @property
    def n_bands(self) -> int:
        return len(self.bands)

    @classmethod
    def from_array(cls, pixels: np.ndarray, bands: Sequence[SpectralRange]) -> "SceneRaster":
        c, h, w = pixels.shape
        return cls(w, h, list(bands), pixels)


# -- SSR binary format --------------------------------------------------------
#
#   magic "SSR1" | u16 version | u16 reserved | u32 W | u32 H | u32 C
#   C x (f32 lambda_min_nm, f32 lambda_max_nm)
#   C*H*W f32 pixels, band-sequential, row-major; little-endian throughout

def encode_ssr(raster: SceneRaster) -> bytes:
    c = raster.n_bands
    head = _HEADER.pack(SSR_MAGIC, SSR_VERSION, 0, raster.width, raster.height, c)
    ranges = np.array([[b.lambda_min_nm, b.lambda_max_nm] for b in raster.bands], dtype="<f4")
    pix = np.ascontiguousarray(raster.pixels, dtype="<f4")
    return head + ranges.tobytes() + pix.tobytes()


def decode_ssr(buf: bytes) -> SceneRaster:
    if len(buf) < 4 or buf[:4] != SSR_MAGIC:
        raise SSRFormatError(f"bad magic {bytes(buf[:4])!r}, expected {SSR_MAGIC!r}", 0)
    if len(buf) < _HEADER.size:
        raise SSRFormatError("truncated header", len(buf))
    _, version, _, w, h, c = _HEADER.unpack_from(buf, 0)
    if version != SSR_VERSION:
        raise SSRFormatError(f"unsupported version {version}", 4)
    off = _HEADER.size
    need = off + 8 * c + 4 * c * w * h
    if len(buf) < need:
        raise SSRFormatError(f"truncated payload: {len(buf)} bytes, need {need}", len(buf))
    if len(buf) > need:
        raise SSRFormatError(f"{len(buf) - need} trailing bytes", need)
    ranges = np.frombuffer(buf, dtype="<f4", count=2 * c, offset=off).reshape(c, 2)
    try:
        bands = [SpectralRange(float(lo), float(hi)) for lo, hi in ranges]
    except ValueError as exc:
        raise SSRFormatError(f"invalid band range: {exc}", off) from exc
    pixels = np.frombuffer(buf, dtype="<f4", count=c * h * w, offset=off + 8 * c).reshape(c, h, w)
    return SceneRaster(w, h, bands, pixels.astype(np.float32))


def write_ssr(path: str | Path, raster: SceneRaster) -> None:
    Path(path).write_bytes(encode_ssr(raster))


def read_ssr(path: str | Path) -> SceneRaster:
    return decode_ssr(Path(path).read_bytes())


# -- harmonization ------------------------------------------------------------

def percentile_linear(values: np.ndarray, q: float) -> float:
    """Percentile by linear interpolation between order statistics at rank (n-1)*q."""
    n = values.size
    rank = (n - 1) * q
    lo = int(math.floor(rank))
    hi = min(lo + 1, n - 1)
    part = np.partition(values, (lo, hi))
    frac = rank - lo
    return float(part[lo] + (part[hi] - part[lo]) * frac)


def _clip_scale(x: np.ndarray, p1: float, p99: float) -> np.ndarray:
    return (np.clip(x, p1, p99) - p1) / (p99 - p1)


def compute_stats(rasters: Iterable[SceneRaster]) -> HarmonizeStats:
    rasters = list(rasters)
    if not rasters:
        raise DataError("compute_stats needs at least one raster")
    c = rasters[0].n_bands
    if any(r.n_bands != c for r in rasters):
        raise DataError("rasters of one sensor must share a band count")
    p1, p99, mean, std = (np.empty(c) for _ in range(4))
    for j in range(c):
        pooled = np.concatenate([np.asarray(r.pixels[j], dtype=np.float64).ravel() for r in rasters])
        p1[j] = percentile_linear(pooled, 0.01)
        p99[j] = percentile_linear(pooled, 0.99)
        if not p1[j] < p99[j]:
            raise DataError(f"constant band {j}: p1 == p99 == {p1[j]}")
        scaled = _clip_scale(pooled, p1[j], p99[j])
        mean[j] = scaled.mean()
        std[j] = scaled.std()
        if not std[j] > 0:
            raise DataError(f"constant band {j} after clipping")
    return HarmonizeStats(p1, p99, mean, std)


def harmonize_array(pixels: np.ndarray, stats: HarmonizeStats) -> np.ndarray:
    if pixels.shape[0] != stats.p1.shape[0]:
        raise DataError(f"raster has {pixels.shape[0]} bands, stats cover {stats.p1.shape[0]}")
    x = np.asarray(pixels, dtype=np.float64)
    p1, p99 = stats.p1[:, None, None], stats.p99[:, None, None]
    scaled = _clip_scale(x, p1, p99)
    return (scaled - stats.mean[:, None, None]) / stats.std[:, None, None]


def harmonize(raster: SceneRaster, stats: HarmonizeStats) -> SceneRaster:
    return SceneRaster(raster.width, raster.height, raster.bands, harmonize_array(raster.pixels, stats))


def unharmonize_array(z: np.ndarray, stats: HarmonizeStats) -> np.ndarray:
    """Inverse of :func:`harmonize_array` on the unclipped interior."""
    scaled = z * stats.std[:, None, None] + stats.mean[:, None, None]
    return scaled * (stats.p99 - stats.p1)[:, None, None] + stats.p1[:, None, None]


# -- pair manifests -----------------------------------------------------------

@dataclass
class PairRecord:
    path_a: str
    sensor_a: str
    path_b: str
    sensor_b: str
    scene_id: str
    label: int | list[int] | None = None


@dataclass
class PairManifest:
    records: list[PairRecord] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.__dict__) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PairManifest":
        path = Path(path)
        records = []
        try:
            for n, line in enumerate(path.read_text().splitlines(), 1):
                if line.strip():
                    records.append(PairRecord(**json.loads(line)))
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"{path}:{n}: malformed manifest record ({exc})") from exc
        return cls(records, path.parent)

    def validate(self, known_sensors: Iterable[str]) -> None:
        known = set(known_sensors)
        for rec in self.records:
            for p, s in ((rec.path_a, rec.sensor_a), (rec.path_b, rec.sensor_b)):
                if s not in known:
                    raise DataError(f"scene {rec.scene_id}: sensor {s!r} is not registered")
                read_ssr(self.resolve(p))

    def load_pair(self, rec: PairRecord) -> tuple[SceneRaster, SceneRaster]:
        return read_ssr(self.resolve(rec.path_a)), read_ssr(self.resolve(rec.path_b))


# -- synthetic scenes -----------------------------------------------------------

LOG_LAMBDA_SPAN = (math.log10(300.0), math.log10(1e9))


@dataclass
class SceneWorld:
    """Material spectral signatures shared by every scene of a synthetic dataset.

    Each signature is piecewise-linear in log10-wavelength over fixed knots; a
    band's response is the mean of the signature across the band in log space.
    """

    knots: np.ndarray
    signatures: np.ndarray  # (materials, knots)

    @classmethod
    def random(cls, class_count: int, rng: np.random.Generator, n_knots: int = 24) -> "SceneWorld":
        """At every knot the materials take evenly spaced levels, so a knot
        separates all materials by at least ~0.6 / class_count.

        Neighbouring knots differ by one swap of two materials holding adjacent
        levels. Independent shuffles per knot could cancel in a band lying
        between knots and leave a sensor with almost no material contrast.
        """
        knots = np.linspace(*LOG_LAMBDA_SPAN, n_knots)
        levels = np.linspace(0.1, 0.9, class_count) if class_count > 1 else np.array([0.5])
        jitter = 0.1 / max(class_count, 1)
        rank = rng.permutation(class_count)  # rank[m]: level index held by material m
        cols = []
        for _ in range(n_knots):
            cols.append(levels[rank])
            if class_count > 1:
                j = rng.integers(class_count - 1)
                lo, hi = np.flatnonzero(rank == j)[0], np.flatnonzero(rank == j + 1)[0]
                rank[lo], rank[hi] = j + 1, j
        sig = np.stack(cols, axis=1)
        sig = sig + rng.uniform(-jitter, jitter, size=sig.shape)
        return cls(knots, sig)

    @property
    def class_count(self) -> int:
        return self.signatures.shape[0]

    def band_response(self, band: SpectralRange, samples: int = 65) -> np.ndarray:
        grid = np.linspace(math.log10(band.lambda_min_nm), math.log10(band.lambda_max_nm), samples)
        return np.array([np.interp(grid, self.knots, s).mean() for s in self.signatures])


def material_map(size: int, class_count: int, rng: np.random.Generator, smooth: float | None = None) -> np.ndarray:
    """Blobby label map: argmax over ``class_count`` smoothed noise fields."""
    if class_count == 1:
        return np.zeros((size, size), dtype=np.int64)
    smooth = size / 3.0 if smooth is None else smooth
    fields = np.stack([
        gaussian_filter(rng.standard_normal((size, size)), smooth, mode="wrap")
        for _ in range(class_count)
    ])
    return fields.argmax(axis=0)


def dominant_label(mat: np.ndarray, class_count: int) -> int:
    counts = np.bincount(mat.ravel(), minlength=class_count)
    return int(counts.argmax())


def render(mat: np.ndarray, sensor: SensorSpec, world: SceneWorld, noise: float,
           rng: np.random.Generator) -> SceneRaster:
    resp = np.stack([world.band_response(b.range) for b in sensor.bands])  # (C, materials)
    pixels = resp[:, mat]
    if noise > 0:
        pixels = pixels + rng.normal(0.0, noise, size=pixels.shape)
    return SceneRaster.from_array(pixels.astype(np.float32), sensor.ranges)


@dataclass
class SyntheticScene:
    scene_id: str
    label: int
    materials: np.ndarray
    rasters: dict[str, SceneRaster]


def synth_scenes(n_scenes: int, sensors: Sequence[SensorSpec], class_count: int, rng: np.random.Generator,
                 size: int = 64, noise: float = 0.02, world: SceneWorld | None = None,
                 balanced: bool = True, smooth: float | None = None) -> tuple[list[SyntheticScene], SceneWorld]:
    """Render ``n_scenes`` co-registered scenes for every sensor in ``sensors``.

    With ``balanced`` the dominant-material labels cycle through the classes so
    every class is equally represented. ``smooth`` sets the blob scale in pixels
    (see :func:`material_map`).
    """
    world = world or SceneWorld.random(class_count, rng)
    scenes = []
    for i in range(n_scenes):
        mat = material_map(size, class_count, rng, smooth)
        label = dominant_label(mat, class_count)
        if balanced and class_count > 1:
            want = i % class_count
            # relabel materials so the dominant one is the wanted class
            perm = np.arange(class_count)
            perm[[label, want]] = perm[[want, label]]
            mat = perm[mat]
            label = want
        rasters = {s.name: render(mat, s, world, noise, rng) for s in sensors}
        scenes.append(SyntheticScene(f"scene{i:05d}", label, mat, rasters))
    return scenes, world


def gen_synthetic_pairs(n_scenes: int, sensors: tuple[SensorSpec, SensorSpec], class_count: int,
                        rng: np.random.Generator, out_dir: str | Path, size: int = 64,
                        noise: float = 0.02) -> PairManifest:
    """Write paired SSR files for two sensors plus a ``pairs.jsonl`` manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sa, sb = sensors
    scenes, _ = synth_scenes(n_scenes, sensors, class_count, rng, size=size, noise=noise)
    manifest = PairManifest(root=out_dir)
    for sc in scenes:
        pa, pb = f"{sc.scene_id}_{sa.name}.ssr", f"{sc.scene_id}_{sb.name}.ssr"
        write_ssr(out_dir / pa, sc.rasters[sa.name])
        write_ssr(out_dir / pb, sc.rasters[sb.name])
        manifest.records.append(PairRecord(pa, sa.name, pb, sb.name, sc.scene_id, sc.label))
    manifest.save(out_dir / "pairs.jsonl")
    return manifest
