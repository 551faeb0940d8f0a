"""Downstream transfer: frozen features, multi-modal fusion, linear probing and kNN."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from sklearn.metrics import average_precision_score

from . import numerics as nx
from .mixup import mix_tensors, sample_mix_mask
from .model import MaeModel
from .registry import BandResolution, Mode, Policy, ProjectionBank, SensorSpec, resolve_sensor
from .tokenizer import project_tensor
from .train import prepare_patches


class Pooling(str, Enum):
    CLS = "cls"
    MEAN = "mean-patch"


class Fusion(str, Enum):
    STACK = "stack"
    CONCAT = "concat"
    MIXCAT = "mixcat"


class InferenceMode(str, Enum):
    IN_DOMAIN_SEEN = "in-domain/seen"
    OPEN_DOMAIN_SEEN = "open-domain/seen"
    OPEN_DOMAIN_UNSEEN = "open-domain/unseen"


def inference_mode(resolutions: Sequence[BandResolution], in_domain: bool) -> InferenceMode:
    """A sensor is seen when every band resolves exactly to a pretrained layer."""
    seen = all(r.mode is Mode.EXACT for r in resolutions)
    if not seen:
        return InferenceMode.OPEN_DOMAIN_UNSEEN
    return InferenceMode.IN_DOMAIN_SEEN if in_domain else InferenceMode.OPEN_DOMAIN_SEEN


def pool(latents: torch.Tensor, pooling: Pooling | str) -> torch.Tensor:
    """(B, 1 + N, D) encoder output -> (B, D)."""
    if Pooling(pooling) is Pooling.CLS:
        return latents[:, 0]
    return latents[:, 1:].mean(dim=1)


@torch.no_grad()
def encode_tokens(tokens: torch.Tensor, model: MaeModel, pooling: Pooling | str) -> torch.Tensor:
    return pool(model.encode(tokens), pooling)


@torch.no_grad()
def extract_features(patches: torch.Tensor, resolutions: Sequence[BandResolution], model: MaeModel,
                     bank: ProjectionBank, pooling: Pooling | str = Pooling.MEAN,
                     batch_size: int = 64) -> torch.Tensor:
    """(B, N, C, S*S) harmonized patches -> (B, D) pooled features from the full, unmasked encoder."""
    outs = []
    for i in range(0, patches.shape[0], batch_size):
        tokens = project_tensor(patches[i:i + batch_size], resolutions, bank)
        outs.append(encode_tokens(tokens, model, pooling))
    return torch.cat(outs)


@dataclass
class Extraction:
    features: np.ndarray
    resolutions: list[BandResolution]

    @property
    def extrapolated(self) -> bool:
        return any(r.extrapolated for r in self.resolutions)


def extract(images: Sequence, sensor: SensorSpec, model: MaeModel, bank: ProjectionBank,
            pooling: Pooling | str = Pooling.MEAN, policy: Policy | str = Policy.INTERPOLATE) -> Extraction:
    """Harmonize -> patchify -> project -> encode -> pool for a list of rasters of one sensor."""
    resolutions = resolve_sensor(sensor, bank, policy)
    dtype = next(model.parameters()).dtype
    patches = prepare_patches(images, sensor.stats, model.config, dtype)
    feats = extract_features(patches, resolutions, model, bank, pooling)
    return Extraction(feats.numpy(), resolutions)


@torch.no_grad()
def fuse(patches_a: torch.Tensor, patches_b: torch.Tensor, res_a: Sequence[BandResolution],
         res_b: Sequence[BandResolution], strategy: Fusion | str, model: MaeModel, bank: ProjectionBank,
         mix_ratio: float = 0.5, seed: int = 0, pooling: Pooling | str = Pooling.MEAN) -> torch.Tensor:
    """Features for co-registered pairs under one fusion strategy.

    ``stack`` sums the two projected token grids into one stream (dim D);
    ``concat`` encodes each sensor separately and concatenates (2D);
    ``mixcat`` exchanges a ``mix_ratio`` fraction of positions between the two
    token grids, encodes both mixed streams and concatenates (2D).
    """
    strategy = Fusion(strategy)
    if patches_a.shape[:2] != patches_b.shape[:2]:
        raise ValueError(f"pair grids differ: {tuple(patches_a.shape[:2])} vs {tuple(patches_b.shape[:2])}")
    ta = project_tensor(patches_a, res_a, bank)
    tb = project_tensor(patches_b, res_b, bank)
    if strategy is Fusion.STACK:
        return encode_tokens(ta + tb, model, pooling)
    if strategy is Fusion.MIXCAT:
        rng = nx.make_rng(seed, "fusion-mix")
        g = model.config.grid
        # ones of the sampled mask mark exchanged positions; stream a' keeps the rest
        keep = np.stack([~sample_mix_mask(g, g, mix_ratio, rng).m.ravel() for _ in range(ta.shape[0])])
        ta, tb = mix_tensors(ta, tb, torch.as_tensor(keep))
    return torch.cat([encode_tokens(ta, model, pooling), encode_tokens(tb, model, pooling)], dim=1)


# -- linear probe ------------------------------------------------------------------

def mean_average_precision(y_true: np.ndarray, scores: np.ndarray) -> float:
    """Macro mAP over classes that have at least one positive."""
    cols = [j for j in range(y_true.shape[1]) if y_true[:, j].any()]
    return float(np.mean([average_precision_score(y_true[:, j], scores[:, j]) for j in cols]))


def linear_probe(train_x: np.ndarray, train_y: np.ndarray, val_x: np.ndarray, val_y: np.ndarray,
                 epochs: int = 100, lr: float = 1e-2, batch_size: int = 64, seed: int = 0,
                 multilabel: bool = False, weight_decay: float = 0.0) -> float:
    """Train one linear layer on frozen features; returns val accuracy, or mAP when ``multilabel``.

    Features are standardized with the training-set mean and std first, the
    affine-free equivalent of the batch-norm usually placed before a probe head.
    """
    if len(train_x) != len(train_y) or len(val_x) != len(val_y):
        raise ValueError("feature and label counts differ")
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0) + 1e-6
    xt = torch.as_tensor((train_x - mu) / sd, dtype=torch.float64)
    xv = torch.as_tensor((val_x - mu) / sd, dtype=torch.float64)
    n_out = train_y.shape[1] if multilabel else int(max(train_y.max(), val_y.max())) + 1
    rng = nx.make_rng(seed, "probe")
    w = torch.nn.Parameter(nx.normal_init((n_out, xt.shape[1]), 0.01, rng, torch.float64))
    b = torch.nn.Parameter(torch.zeros(n_out, dtype=torch.float64))
    opt = torch.optim.AdamW([w, b], lr=lr, weight_decay=weight_decay)
    yt = torch.as_tensor(train_y, dtype=torch.float64 if multilabel else torch.long)
    for _ in range(epochs):
        order = rng.permutation(len(xt))
        for i in range(0, len(order), batch_size):
            idx = torch.as_tensor(order[i:i + batch_size])
            logits = nx.linear(xt[idx], w, b)
            if multilabel:
                loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, yt[idx])
            else:
                loss = torch.nn.functional.cross_entropy(logits, yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        scores = nx.linear(xv, w, b).numpy()
    if multilabel:
        return mean_average_precision(np.asarray(val_y), scores)
    return float((scores.argmax(axis=1) == np.asarray(val_y)).mean())


def finetune(patches: torch.Tensor, resolutions: Sequence[BandResolution], labels: np.ndarray, model: MaeModel,
             bank: ProjectionBank, epochs: int = 10, lr: float = 1e-3, batch_size: int = 16, seed: int = 0,
             pooling: Pooling | str = Pooling.MEAN) -> torch.nn.Linear:
    """Train encoder, projections and a fresh linear head end to end (in place).

    Only meant for tiny configurations; returns the classification head.
    """
    labels = np.asarray(labels)
    if len(labels) != patches.shape[0]:
        raise ValueError("feature and label counts differ")
    rng = nx.make_rng(seed, "finetune")
    dtype = patches.dtype
    head = torch.nn.Linear(model.config.embed_dim, int(labels.max()) + 1, dtype=dtype)
    with torch.no_grad():
        head.weight.copy_(nx.normal_init(tuple(head.weight.shape), 0.01, rng, dtype))
        head.bias.zero_()
    params = list(model.encoder_parameters()) + list(bank.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=lr)
    y = torch.as_tensor(labels, dtype=torch.long)
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for i in range(0, len(order), batch_size):
            idx = torch.as_tensor(order[i:i + batch_size])
            feats = pool(model.encode(project_tensor(patches[idx], resolutions, bank)), pooling)
            loss = torch.nn.functional.cross_entropy(head(feats), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return head


# -- kNN ----------------------------------------------------------------------------

def knn_classify(train_x: np.ndarray, train_y: np.ndarray, query_x: np.ndarray, k: int = 20) -> np.ndarray:
    """Cosine-distance k-nearest-neighbour majority vote.

    Vote ties go to the class with the smaller summed distance, then to the
    lower class index.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    query_x = np.asarray(query_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    if len(train_x) == 0:
        raise ValueError("kNN needs a non-empty training set")
    if not 1 <= k <= len(train_x):
        raise ValueError(f"k={k} must be in [1, {len(train_x)}]")

    def unit(x: np.ndarray) -> np.ndarray:
        return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)

    dist = 1.0 - unit(query_x) @ unit(train_x).T
    n_cls = int(train_y.max()) + 1
    out = np.empty(len(query_x), dtype=np.int64)
    for q in range(len(query_x)):
        nn_idx = np.argsort(dist[q], kind="stable")[:k]
        votes = np.bincount(train_y[nn_idx], minlength=n_cls)
        dsum = np.bincount(train_y[nn_idx], weights=dist[q, nn_idx], minlength=n_cls)
        cands = np.flatnonzero(votes == votes.max())
        out[q] = min(cands, key=lambda c: (dsum[c], c))
    return out


# -- feature cache ------------------------------------------------------------------

def write_feature_cache(path: str | Path, rows: Iterable[tuple[str, object, np.ndarray]]) -> None:
    with open(path, "w") as fh:
        for scene_id, label, vec in rows:
            raw = np.ascontiguousarray(vec, dtype="<f4").tobytes()
            fh.write(json.dumps({"scene_id": scene_id, "label": label,
                                 "vector": base64.b64encode(raw).decode("ascii")}) + "\n")


def read_feature_cache(path: str | Path) -> list[tuple[str, object, np.ndarray]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            obj = json.loads(line)
            vec = np.frombuffer(base64.b64decode(obj["vector"]), dtype="<f4").copy()
            rows.append((obj["scene_id"], obj["label"], vec))
    return rows
