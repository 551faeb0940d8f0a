"""Pretraining: pair preparation, the masked-mixup forward pass and the optimizer loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch

from . import numerics as nx
from .data import SceneRaster, harmonize_array
from .mixup import mix_tensors, sample_mix_mask
from .model import MaeModel, ModelConfig, reconstruct_and_loss, sample_mask
from .registry import BandResolution, HarmonizeStats, ProjectionBank, SensorSpec, resolve_sensor
from .tokenizer import patchify_tensor, project_tensor, resize

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1.5e-4
    min_lr: float = 0.0
    warmup_steps: int = 0
    steps: int = 100
    batch_size: int = 16
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown optimizer config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup to ``lr`` then half-cosine decay to ``min_lr`` at ``steps``."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    t = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


# -- data preparation ------------------------------------------------------------

def prepare_patches(rasters: Sequence[SceneRaster | np.ndarray], stats: HarmonizeStats | None,
                    config: ModelConfig, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Harmonize, resize and patchify a list of rasters: -> (B, N_P, C, S*S)."""
    arrs = []
    for r in rasters:
        pix = r.pixels if isinstance(r, SceneRaster) else r
        arrs.append(harmonize_array(pix, stats) if stats is not None else np.asarray(pix, dtype=np.float64))
    x = torch.as_tensor(np.stack(arrs), dtype=dtype)
    x = resize(x, config.img_size, config.img_size)
    return patchify_tensor(x, config.patch_size)


@dataclass
class PairSet:
    """Prepared co-registered pairs for two sensors."""

    sensor_a: SensorSpec
    sensor_b: SensorSpec
    patches_a: torch.Tensor
    patches_b: torch.Tensor
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.patches_a.shape[0]

    def subset(self, idx: np.ndarray) -> "PairSet":
        t = torch.as_tensor(idx, dtype=torch.long)
        labels = None if self.labels is None else self.labels[idx]
        return PairSet(self.sensor_a, self.sensor_b, self.patches_a[t], self.patches_b[t], labels)

    def to(self, dtype: torch.dtype) -> "PairSet":
        return PairSet(self.sensor_a, self.sensor_b, self.patches_a.to(dtype), self.patches_b.to(dtype), self.labels)


def prepare_pairs(pairs: Sequence[tuple[SceneRaster, SceneRaster]], sensor_a: SensorSpec, sensor_b: SensorSpec,
                  config: ModelConfig, labels: Sequence | None = None, dtype: torch.dtype = torch.float32) -> PairSet:
    if sensor_a.stats is None or sensor_b.stats is None:
        raise TrainingError("both sensors need harmonization stats before training")
    pa = prepare_patches([a for a, _ in pairs], sensor_a.stats, config, dtype)
    pb = prepare_patches([b for _, b in pairs], sensor_b.stats, config, dtype)
    return PairSet(sensor_a, sensor_b, pa, pb, None if labels is None else np.asarray(labels))


# -- forward -------------------------------------------------------------------------

@dataclass
class StepMasks:
    keep_a: torch.Tensor  # (B, N) bool, mix mask
    ids_keep_a: torch.Tensor  # (B, K)
    ids_keep_b: torch.Tensor
    masked_a: torch.Tensor  # (B, N) bool
    masked_b: torch.Tensor

    def swapped(self) -> "StepMasks":
        """Masks for the same step with the two sensors exchanged.

        With a and b swapped the same mix mask yields the old b' as the new a'
        (and vice versa), so only the two masking plans trade places.
        """
        return StepMasks(self.keep_a, self.ids_keep_b, self.ids_keep_a, self.masked_b, self.masked_a)

    def complemented(self) -> "StepMasks":
        """Complemented mix mask with the same plans: pairs with swapping a and b."""
        return StepMasks(~self.keep_a, self.ids_keep_a, self.ids_keep_b, self.masked_a, self.masked_b)


def sample_step_masks(batch: int, config: ModelConfig, rng: np.random.Generator) -> StepMasks:
    g, n = config.grid, config.n_patches
    keep, ka, kb, ma, mb = [], [], [], [], []
    for _ in range(batch):
        keep.append(sample_mix_mask(g, g, config.mixup_ratio, rng).m.ravel())
        pa = sample_mask(n, config.mask_ratio, rng)
        pb = sample_mask(n, config.mask_ratio, rng)
        ka.append(pa.ids_keep)
        kb.append(pb.ids_keep)
        ma.append(pa.masked())
        mb.append(pb.masked())
    as_long = lambda xs: torch.as_tensor(np.stack(xs), dtype=torch.long)  # noqa: E731
    as_bool = lambda xs: torch.as_tensor(np.stack(xs), dtype=torch.bool)  # noqa: E731
    return StepMasks(as_bool(keep), as_long(ka), as_long(kb), as_bool(ma), as_bool(mb))


def masked_loss(model: MaeModel, bank: ProjectionBank, patches_a: torch.Tensor, patches_b: torch.Tensor,
                res_a: Sequence[BandResolution], res_b: Sequence[BandResolution], masks: StepMasks,
                reduce: bool = True) -> torch.Tensor:
    """project -> mix -> mask -> encode -> decode -> reconstruct -> loss, for one batch."""
    ta = project_tensor(patches_a, res_a, bank)
    tb = project_tensor(patches_b, res_b, bank)
    mixed_a, mixed_b = mix_tensors(ta, tb, masks.keep_a)
    dec_a = model.decode(model.encode(mixed_a, masks.ids_keep_a), masks.ids_keep_a)
    dec_b = model.decode(model.encode(mixed_b, masks.ids_keep_b), masks.ids_keep_b)
    return reconstruct_and_loss(model, bank, dec_a, dec_b, patches_a, patches_b, res_a, res_b,
                                masks.keep_a, masks.masked_a, masks.masked_b, reduce=reduce)


# -- optimizer loop ------------------------------------------------------------------

def _param_groups(params: Sequence[torch.nn.Parameter], weight_decay: float) -> list[dict]:
    decay = [p for p in params if p.dim() >= 2]
    no_decay = [p for p in params if p.dim() < 2]
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


@dataclass
class Trainer:
    """Single-owner training state: weights, optimizer moments, RNG and step counter."""

    model: MaeModel
    bank: ProjectionBank
    optim: OptimConfig
    rng: np.random.Generator
    step_count: int = 0
    history: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        params = list(self.model.parameters()) + list(self.bank.parameters())
        self.optimizer = torch.optim.AdamW(
            _param_groups(params, self.optim.weight_decay), lr=self.optim.lr,
            betas=(self.optim.beta1, self.optim.beta2), weight_decay=self.optim.weight_decay)

    def resolutions(self, data: PairSet) -> tuple[list[BandResolution], list[BandResolution]]:
        return (resolve_sensor(data.sensor_a, self.bank, "exact_only"),
                resolve_sensor(data.sensor_b, self.bank, "exact_only"))

    def draw_batch(self, n: int) -> np.ndarray:
        b = min(self.optim.batch_size, n)
        if b == n:
            return np.arange(n)
        return np.sort(self.rng.permutation(n)[:b])

    def step(self, data: PairSet) -> float:
        idx = self.draw_batch(len(data))
        batch = data.subset(idx)
        masks = sample_step_masks(len(idx), self.model.config, self.rng)
        res_a, res_b = self.resolutions(data)
        lr = lr_at(self.step_count, self.optim)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        loss = masked_loss(self.model, self.bank, batch.patches_a, batch.patches_b, res_a, res_b, masks)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss {loss.item()} at step {self.step_count} (lr={lr:.3g}); "
                "check harmonization stats and learning rate")
        loss.backward()
        self.optimizer.step()
        self.step_count += 1
        value = float(loss.item())
        self.history.append(value)
        return value

    def fit(self, data: PairSet, steps: int | None = None, log_every: int = 0) -> list[float]:
        steps = self.optim.steps if steps is None else steps
        out = []
        for _ in range(steps):
            out.append(self.step(data))
            if log_every and self.step_count % log_every == 0:
                log.info("step %d loss %.5f", self.step_count, out[-1])
        return out


@torch.no_grad()
def masked_mse(model: MaeModel, bank: ProjectionBank, data: PairSet, rng: np.random.Generator,
               repeats: int = 1) -> float:
    """Mean masked-token MSE per stream on fresh masks (half the two-stream loss)."""
    res_a = resolve_sensor(data.sensor_a, bank, "exact_only")
    res_b = resolve_sensor(data.sensor_b, bank, "exact_only")
    vals = []
    for _ in range(repeats):
        masks = sample_step_masks(len(data), model.config, rng)
        vals.append(masked_loss(model, bank, data.patches_a, data.patches_b, res_a, res_b, masks).item() / 2.0)
    return float(np.mean(vals))


def new_model_and_bank(config: ModelConfig, sensors: Sequence[SensorSpec],
                       dtype: torch.dtype = torch.float32) -> tuple[MaeModel, ProjectionBank]:
    from .registry import build_bank

    model = MaeModel(config, nx.make_rng(config.seed, "model-init"))
    bank = build_bank(sensors, config.embed_dim, config.patch_size, nx.make_rng(config.seed, "bank-init"),
                      c_max=config.c_max)
    return model.to(dtype), bank.to(dtype)


def config_echo(config: ModelConfig, optim: OptimConfig) -> dict:
    return {"model": config.to_dict(), "optim": asdict(optim)}
