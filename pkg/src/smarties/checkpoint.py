"""Versioned binary checkpoints.

Layout (little-endian)::

    magic "SMCK" | u16 version=1 | u16 reserved=0 | u64 header_len
    header: UTF-8 JSON, header_len bytes
    payload: tensors back to back, each at the offset recorded in the header

The JSON header carries the model and optimizer config echo, the bank's layer
table and registered sensors, a tensor table (name, dtype, shape, offset,
nbytes), optimizer param-group settings, the training RNG state, the step
counter and the loss history.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import MaeModel, ModelConfig
from .registry import ProjectionBank
from .train import OptimConfig, Trainer

MAGIC = b"SMCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHHQ")

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _tensor_entries(trainer: Trainer) -> list[tuple[str, torch.Tensor]]:
    out = [(f"model.{k}", v) for k, v in trainer.model.state_dict().items()]
    out += [(f"bank.{k}", v) for k, v in trainer.bank.state_dict().items()]
    state = trainer.optimizer.state_dict()["state"]
    for idx in sorted(state):
        for key in sorted(state[idx]):
            out.append((f"optim.{idx}.{key}", state[idx][key]))
    return out


def save_checkpoint(path: str | Path, trainer: Trainer) -> None:
    table, blobs, offset = [], [], 0
    for name, t in _tensor_entries(trainer):
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"cannot store tensor {name} of dtype {t.dtype}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        table.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    groups = [{k: v for k, v in g.items() if k != "params"} for g in trainer.optimizer.state_dict()["param_groups"]]
    header = {
        "format": "smarties-checkpoint",
        "config": trainer.model.config.to_dict(),
        "optim_config": trainer.optim.__dict__,
        "bank": trainer.bank.describe(),
        "tensors": table,
        "param_groups": groups,
        "rng_state": trainer.rng.bit_generator.state,
        "step": trainer.step_count,
        "history": trainer.history,
    }
    hbytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, 0, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def read_header(path: str | Path) -> tuple[dict, bytes]:
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic at offset 0)")
    _, version, _, hlen = _PREFIX.unpack_from(buf, 0)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(buf) < start + hlen:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(buf[start:start + hlen].decode("utf-8"))
    return header, buf[start + hlen:]


def load_checkpoint(path: str | Path) -> Trainer:
    header, payload = read_header(path)
    tensors: dict[str, torch.Tensor] = {}
    for row in header["tensors"]:
        end = row["offset"] + row["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated tensor {row['name']}")
        arr = np.frombuffer(payload, dtype=row["dtype"], count=row["nbytes"] // np.dtype(row["dtype"]).itemsize,
                            offset=row["offset"]).reshape(row["shape"])
        tensors[row["name"]] = torch.from_numpy(arr.copy()).to(_TORCH[row["dtype"]])

    def section(prefix: str) -> dict[str, torch.Tensor]:
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    model_sd = section("model.")
    dtype = next(iter(model_sd.values())).dtype
    config = ModelConfig.from_dict(header["config"])
    model = MaeModel(config).to(dtype)
    model.load_state_dict(model_sd)
    bank = ProjectionBank.from_description(header["bank"], dtype).to(dtype)
    bank.load_state_dict(section("bank."))

    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = header["rng_state"]
    trainer = Trainer(model, bank, OptimConfig.from_dict(header["optim_config"]), rng,
                      step_count=header["step"], history=list(header["history"]))
    opt_state: dict[int, dict[str, torch.Tensor]] = {}
    for name, t in section("optim.").items():
        idx, key = name.split(".", 1)
        opt_state.setdefault(int(idx), {})[key] = t
    sd = trainer.optimizer.state_dict()
    for g_saved, g in zip(header["param_groups"], sd["param_groups"]):
        g.update(g_saved)
    sd["state"] = opt_state
    trainer.optimizer.load_state_dict(sd)
    return trainer
