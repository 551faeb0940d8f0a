"""Command-line entry point: ``smarties <command> [options]``.

Machine-readable results go to stdout as JSON; human summaries go to stderr.
Exit codes: 0 success, 1 usage error, 2 data error, 3 invariant failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from . import numerics as nx
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DataError,
    PairManifest,
    SceneRaster,
    compute_stats,
    gen_synthetic_pairs,
    harmonize_array,
    read_ssr,
    unharmonize_array,
    write_ssr,
)
from .model import ModelConfig, sample_mask, stack_plans
from .registry import Mode, Policy, RegistryError, SensorSpec, build_bank, bundled_sensor, resolve_sensor
from .tokenizer import patchify_tensor, project_tensor, reproject_tensor, resize, unpatchify_tensor
from .train import OptimConfig, PairSet, Trainer, TrainingError, masked_loss, new_model_and_bank, prepare_pairs, \
    sample_step_masks
from .transfer import Fusion, Pooling, extract_features, fuse, knn_classify, linear_probe

log = logging.getLogger("smarties")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class UsageError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; this CLI reserves 2 for data errors."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


# -- run configuration --------------------------------------------------------------

@dataclass
class RunConfig:
    """Everything ``pretrain`` needs; paths are relative to the config file."""

    manifest: str
    sensor_a: str
    sensor_b: str
    out_dir: str
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.dtype not in DTYPES:
            raise DataError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"], d["optim"] = self.model.to_dict(), dataclasses.asdict(self.optim)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown run config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            d["model"] = ModelConfig.from_dict(d.get("model", {}))
            d["optim"] = OptimConfig.from_dict(d.get("optim", {}))
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise DataError(f"invalid run config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> tuple["RunConfig", Path]:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_json(raw), path.parent


# -- helpers ------------------------------------------------------------------------

def emit(obj: object) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def note(msg: str) -> None:
    print(msg, file=sys.stderr)


def load_sensor(arg: str, base: Path | None = None) -> SensorSpec:
    """A sensor-spec JSON path, or the name of a bundled sensor (S2, Maxar, S1)."""
    p = Path(arg) if base is None or Path(arg).is_absolute() else base / arg
    if p.suffix == ".json" or p.exists():
        if not p.exists():
            raise DataError(f"sensor spec {p} does not exist")
        return SensorSpec.load(p)
    try:
        return bundled_sensor(arg)
    except RegistryError as exc:
        raise DataError(str(exc)) from exc


def rasters_of(manifest: PairManifest, sensor_name: str) -> list[SceneRaster]:
    out = []
    for rec in manifest.records:
        if rec.sensor_a == sensor_name:
            out.append(read_ssr(manifest.resolve(rec.path_a)))
        if rec.sensor_b == sensor_name:
            out.append(read_ssr(manifest.resolve(rec.path_b)))
    if not out:
        raise DataError(f"no rasters of sensor {sensor_name!r} in the manifest")
    return out


def with_stats(sensor: SensorSpec, manifest: PairManifest) -> SensorSpec:
    if sensor.stats is not None:
        return sensor
    note(f"computing harmonization stats for {sensor.name} from the manifest")
    return dataclasses.replace(sensor, stats=compute_stats(rasters_of(manifest, sensor.name)))


def manifest_pairs(manifest: PairManifest, trainer: Trainer, dtype: torch.dtype) -> tuple[PairSet, list]:
    if not manifest.records:
        raise DataError("manifest is empty")
    first = manifest.records[0]
    names = (first.sensor_a, first.sensor_b)
    for rec in manifest.records:
        if (rec.sensor_a, rec.sensor_b) != names:
            raise DataError(f"scene {rec.scene_id}: mixed sensor pairs are not supported in one manifest")
    sensors = trainer.bank.sensors
    missing = [n for n in names if n not in sensors]
    if missing:
        raise DataError(f"sensors {missing} are not registered in the checkpoint")
    pairs = [manifest.load_pair(rec) for rec in manifest.records]
    labels = [rec.label for rec in manifest.records]
    if any(label is None for label in labels):
        raise DataError("every manifest record needs a label for probing")
    return prepare_pairs(pairs, sensors[names[0]], sensors[names[1]], trainer.model.config, dtype=dtype), labels


def label_array(labels: Sequence) -> tuple[np.ndarray, bool]:
    if isinstance(labels[0], list):
        n = max(max(lab) for lab in labels if lab) + 1
        y = np.zeros((len(labels), n))
        for i, lab in enumerate(labels):
            y[i, lab] = 1.0
        return y, True
    return np.asarray(labels, dtype=np.int64), False


def split(n: int, train_fraction: float) -> int:
    n_train = int(round(n * train_fraction))
    if not 0 < n_train < n:
        raise UsageError(f"--train-fraction {train_fraction} leaves an empty split for {n} scenes")
    return n_train


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    sa, sb = load_sensor(args.sensor_a), load_sensor(args.sensor_b)
    m = gen_synthetic_pairs(args.n_scenes, (sa, sb), args.classes, nx.make_rng(args.seed, "gen-data"), args.out,
                            size=args.size, noise=args.noise)
    path = Path(args.out) / "pairs.jsonl"
    note(f"wrote {len(m)} pairs of {sa.name}/{sb.name} to {args.out}")
    emit({"manifest": str(path), "n_scenes": len(m), "sensors": [sa.name, sb.name], "classes": args.classes})
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    sensor = load_sensor(args.sensor)
    manifest = PairManifest.load(args.manifest)
    rasters = rasters_of(manifest, sensor.name)
    for r in rasters:
        if r.bands != [b.range for b in sensor.bands]:
            raise DataError(f"raster bands {r.bands} do not match sensor {sensor.name}")
    spec = dataclasses.replace(sensor, stats=compute_stats(rasters))
    if args.out:
        spec.save(args.out)
        note(f"wrote {spec.name} spec with stats over {len(rasters)} rasters to {args.out}")
    emit({"sensor": spec.name, "n_rasters": len(rasters), "stats": spec.stats.to_json()})
    return EXIT_OK


def _eval_loss(trainer: Trainer, data: PairSet, seed: int) -> float:
    masks = sample_step_masks(len(data), trainer.model.config, nx.make_rng(seed, "eval-masks"))
    res_a, res_b = trainer.resolutions(data)
    with torch.no_grad():
        return float(masked_loss(trainer.model, trainer.bank, data.patches_a, data.patches_b, res_a, res_b,
                                 masks).item())


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg, base = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    model_cfg = dataclasses.replace(cfg.model, seed=cfg.seed)
    dtype = DTYPES[cfg.dtype]
    manifest = PairManifest.load(base / cfg.manifest)
    sa = with_stats(load_sensor(cfg.sensor_a, base), manifest)
    sb = with_stats(load_sensor(cfg.sensor_b, base), manifest)
    manifest.validate([sa.name, sb.name])
    pairs = [manifest.load_pair(rec) for rec in manifest.records]
    data = prepare_pairs(pairs, sa, sb, model_cfg, dtype=dtype)

    model, bank = new_model_and_bank(model_cfg, [sa, sb], dtype)
    trainer = Trainer(model, bank, cfg.optim, nx.make_rng(cfg.seed, "train"))
    out_dir = base / cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps({**cfg.to_json(), "model": model_cfg.to_dict()}, indent=2))

    initial = _eval_loss(trainer, data, cfg.seed)
    per_epoch = max(1, math.ceil(len(data) / cfg.optim.batch_size))
    epochs, step_losses = [], []
    while trainer.step_count < cfg.optim.steps:
        n = min(per_epoch, cfg.optim.steps - trainer.step_count)
        losses = trainer.fit(data, steps=n)
        step_losses.extend(losses)
        epoch = len(epochs) + 1
        epochs.append({"epoch": epoch, "steps": trainer.step_count, "mean_loss": float(np.mean(losses))})
        note(f"epoch {epoch} step {trainer.step_count} loss {epochs[-1]['mean_loss']:.5f}")
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"epoch-{epoch:04d}.ckpt", trainer)
    save_checkpoint(out_dir / "final.ckpt", trainer)
    final = _eval_loss(trainer, data, cfg.seed)
    report = {"initial_eval_loss": initial, "final_eval_loss": final, "epochs": epochs, "step_losses": step_losses,
              "checkpoint": str(out_dir / "final.ckpt"), "n_pairs": len(data)}
    (out_dir / "losses.json").write_text(json.dumps(report, indent=2))
    emit(report)
    return EXIT_OK


def _match_sensor(raster: SceneRaster, trainer: Trainer, name: str | None) -> SensorSpec:
    sensors = trainer.bank.sensors
    if name is not None:
        if name not in sensors:
            raise DataError(f"sensor {name!r} is not registered in the checkpoint")
        return sensors[name]
    hits = [s for s in sensors.values() if [b.range for b in s.bands] == raster.bands]
    if len(hits) != 1:
        raise DataError("cannot infer the sensor from the raster bands; pass --sensor")
    return hits[0]


def cmd_reconstruct(args: argparse.Namespace) -> int:
    trainer = load_checkpoint(args.ckpt)
    model, bank = trainer.model, trainer.bank
    cfg = model.config
    raster = read_ssr(args.input)
    sensor = _match_sensor(raster, trainer, args.sensor)
    if sensor.stats is None:
        raise DataError(f"sensor {sensor.name} in the checkpoint has no harmonization stats")
    dtype = next(model.parameters()).dtype
    res = resolve_sensor(sensor, bank, "exact_only")
    x = torch.as_tensor(harmonize_array(raster.pixels, sensor.stats), dtype=dtype)[None]
    patches = patchify_tensor(resize(x, cfg.img_size, cfg.img_size), cfg.patch_size)
    ratio = cfg.mask_ratio if args.mask_ratio is None else args.mask_ratio
    plan = sample_mask(cfg.n_patches, ratio, nx.make_rng(args.seed, "reconstruct"))
    ids_keep = stack_plans([plan])
    with torch.no_grad():
        latents = model.encode(project_tensor(patches, res, bank), ids_keep)
        pred = reproject_tensor(model.to_embedding(model.decode(latents, ids_keep)), res, bank)
    err = ((pred - patches) ** 2).mean(dim=(-2, -1))[0]
    masked = plan.ids_mask
    g = cfg.grid
    image = unpatchify_tensor(pred, cfg.patch_size, g, g)[0].numpy()
    out = SceneRaster(cfg.img_size, cfg.img_size, raster.bands,
                      unharmonize_array(image, sensor.stats).astype(np.float32))
    write_ssr(args.out, out)
    mean = float(err[torch.as_tensor(masked)].mean())
    note(f"{sensor.name}: masked {masked.size}/{cfg.n_patches} tokens, mean masked MSE {mean:.5f}; wrote {args.out}")
    emit({"sensor": sensor.name, "output": args.out, "masked_tokens": masked.tolist(),
          "per_token_mse": [float(v) for v in err[torch.as_tensor(masked)]], "mean_masked_mse": mean,
          "per_token_mse_all": [float(v) for v in err]})
    return EXIT_OK


def cmd_probe(args: argparse.Namespace) -> int:
    trainer = load_checkpoint(args.ckpt)
    dtype = next(trainer.model.parameters()).dtype
    data, labels = manifest_pairs(PairManifest.load(args.manifest), trainer, dtype)
    res_a, res_b = trainer.resolutions(data)
    feats = fuse(data.patches_a, data.patches_b, res_a, res_b, args.fusion, trainer.model, trainer.bank,
                 mix_ratio=args.mix_ratio, seed=args.seed, pooling=args.pooling).numpy()
    y, multilabel = label_array(labels)
    n_train = split(len(y), args.train_fraction)
    value = linear_probe(feats[:n_train], y[:n_train], feats[n_train:], y[n_train:], epochs=args.epochs, lr=args.lr,
                         seed=args.seed, multilabel=multilabel)
    metric = "mAP" if multilabel else "accuracy"
    note(f"linear probe ({args.fusion}) {metric} {value:.4f} on {len(y) - n_train} validation scenes")
    emit({"fusion": args.fusion, "metric": metric, "value": value, "n_train": n_train, "n_val": len(y) - n_train,
          "feature_dim": int(feats.shape[1])})
    return EXIT_OK


def cmd_knn(args: argparse.Namespace) -> int:
    trainer = load_checkpoint(args.ckpt)
    dtype = next(trainer.model.parameters()).dtype
    data, labels = manifest_pairs(PairManifest.load(args.manifest), trainer, dtype)
    res_a, res_b = trainer.resolutions(data)
    if args.stream == "concat":
        feats = fuse(data.patches_a, data.patches_b, res_a, res_b, Fusion.CONCAT, trainer.model, trainer.bank,
                     pooling=args.pooling)
    else:
        patches, res = (data.patches_a, res_a) if args.stream == "a" else (data.patches_b, res_b)
        feats = extract_features(patches, res, trainer.model, trainer.bank, args.pooling)
    feats = feats.numpy()
    y, multilabel = label_array(labels)
    if multilabel:
        raise DataError("kNN classification needs single-label scenes")
    n_train = split(len(y), args.train_fraction)
    if args.k > n_train:
        raise UsageError(f"--k {args.k} exceeds the {n_train} training scenes")
    pred = knn_classify(feats[:n_train], y[:n_train], feats[n_train:], args.k)
    acc = float((pred == y[n_train:]).mean())
    note(f"kNN (k={args.k}, stream {args.stream}) accuracy {acc:.4f}")
    emit({"k": args.k, "stream": args.stream, "accuracy": acc, "n_train": n_train, "n_val": len(y) - n_train})
    return EXIT_OK


def default_bank():
    """Layer table of the bundled optical, very-high-resolution and radar sensors."""
    return build_bank([bundled_sensor(n) for n in ("S2", "Maxar", "S1")], 8, 2, nx.make_rng(0, "resolve"))


def cmd_resolve(args: argparse.Namespace) -> int:
    sensor = load_sensor(args.sensor)
    bank = load_checkpoint(args.ckpt).bank if args.ckpt else default_bank()
    rows = []
    for band, res in zip(sensor.bands, resolve_sensor(sensor, bank, args.policy)):
        rows.append({"band": band.band_id, "lambda_min_nm": band.range.lambda_min_nm,
                     "lambda_max_nm": band.range.lambda_max_nm, "mode": res.mode.value,
                     "terms": [[lid, w] for lid, w in res.terms], "row": res.describe()})
        note(f"{band.band_id:>8}  {res.describe()}")
        if res.mode is Mode.EXTRAPOLATED:
            note(f"warning: band {band.band_id} lies outside the learned wavelength span; "
                 "its projection is extrapolated and may be unreliable")
    emit({"sensor": sensor.name, "policy": args.policy, "bands": rows})
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    from .invariants import run_checks

    checks = run_checks(args.seed)
    for c in checks:
        note(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    ok = all(c.passed for c in checks)
    emit({"passed": ok, "invariants": [c.to_json() for c in checks]})
    if not ok:
        raise InvariantError("one or more invariants failed")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="smarties", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"smarties {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic co-registered SSR pairs and a manifest")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n-scenes", type=int, default=32, help="number of scenes (default 32)")
    g.add_argument("--sensor-a", default="S2", help="first sensor: spec JSON path or bundled name (default S2)")
    g.add_argument("--sensor-b", default="S1", help="second sensor: spec JSON path or bundled name (default S1)")
    g.add_argument("--classes", type=int, default=4, help="number of materials / classes (default 4)")
    g.add_argument("--size", type=int, default=64, help="scene side in pixels (default 64)")
    g.add_argument("--noise", type=float, default=0.02, help="per-band Gaussian noise sigma (default 0.02)")
    g.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("stats", help="compute harmonization stats and write a sensor spec")
    s.add_argument("--manifest", required=True, help="pairs.jsonl manifest")
    s.add_argument("--sensor", required=True, help="sensor spec JSON path or bundled name")
    s.add_argument("--out", help="where to write the sensor spec with stats")
    s.set_defaults(func=cmd_stats)

    t = sub.add_parser("pretrain", help="pretrain the masked autoencoder from a run config")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("reconstruct", help="mask and reconstruct one raster; dump SSR and per-token MSE")
    r.add_argument("--ckpt", required=True, help="checkpoint file")
    r.add_argument("--input", required=True, help="input SSR raster")
    r.add_argument("--out", required=True, help="output SSR path for the reconstruction")
    r.add_argument("--sensor", help="sensor name in the checkpoint (inferred from band ranges if omitted)")
    r.add_argument("--mask-ratio", type=float, help="masking ratio (default from the checkpoint config)")
    r.add_argument("--seed", type=int, default=0, help="mask seed (default 0)")
    r.set_defaults(func=cmd_reconstruct)

    pr = sub.add_parser("probe", help="linear probe on frozen fused features")
    pr.add_argument("--ckpt", required=True, help="checkpoint file")
    pr.add_argument("--manifest", required=True, help="labelled pairs.jsonl manifest")
    pr.add_argument("--fusion", choices=[f.value for f in Fusion], default="concat", help="fusion strategy")
    pr.add_argument("--mix-ratio", type=float, default=0.5, help="exchanged fraction for mixcat (default 0.5)")
    pr.add_argument("--pooling", choices=[x.value for x in Pooling], default="mean-patch", help="feature pooling")
    pr.add_argument("--train-fraction", type=float, default=2 / 3, help="leading share used for training")
    pr.add_argument("--epochs", type=int, default=100, help="probe epochs (default 100)")
    pr.add_argument("--lr", type=float, default=1e-2, help="probe learning rate (default 1e-2)")
    pr.add_argument("--seed", type=int, default=0, help="probe and mixup seed (default 0)")
    pr.set_defaults(func=cmd_probe)

    k = sub.add_parser("knn", help="k-nearest-neighbour classification on frozen features")
    k.add_argument("--ckpt", required=True, help="checkpoint file")
    k.add_argument("--manifest", required=True, help="labelled pairs.jsonl manifest")
    k.add_argument("--k", type=int, default=20, help="neighbours (default 20)")
    k.add_argument("--stream", choices=["a", "b", "concat"], default="a", help="which features to use")
    k.add_argument("--pooling", choices=[x.value for x in Pooling], default="mean-patch", help="feature pooling")
    k.add_argument("--train-fraction", type=float, default=2 / 3, help="leading share used as the reference set")
    k.set_defaults(func=cmd_knn)

    v = sub.add_parser("resolve", help="show how each band of a sensor maps onto projection layers")
    v.add_argument("--sensor", required=True, help="sensor spec JSON path or bundled name")
    v.add_argument("--ckpt", help="use this checkpoint's bank instead of the bundled sensors' table")
    v.add_argument("--policy", choices=[x.value for x in Policy], default="interpolate", help="resolution policy")
    v.set_defaults(func=cmd_resolve)

    c = sub.add_parser("verify", help="run the invariant self-check")
    c.add_argument("--seed", type=int, default=0, help="seed for randomized checks (default 0)")
    c.set_defaults(func=cmd_verify)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("smarties: a command is required (see --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        threads = os.environ.get("SMARTIES_THREADS")
        nx.configure_determinism(int(threads) if threads else None)
        return args.func(args)
    except UsageError as exc:
        note(f"usage error: {exc}")
        return EXIT_USAGE
    except (DataError, CheckpointError, RegistryError, OSError, json.JSONDecodeError) as exc:
        note(f"data error: {exc}")
        return EXIT_DATA
    except (InvariantError, TrainingError, nx.NonFiniteError) as exc:
        note(f"invariant failure: {exc}")
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
