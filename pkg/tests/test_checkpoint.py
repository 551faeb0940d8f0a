import struct

import pytest
import torch

from smarties import numerics as nx
from smarties.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from smarties.train import OptimConfig, Trainer, new_model_and_bank, prepare_pairs


@pytest.fixture
def trained(tiny_sensors, tiny_config):
    opt, sar, scenes = tiny_sensors
    data = prepare_pairs([(s.rasters["OPT"], s.rasters["SAR"]) for s in scenes], opt, sar, tiny_config,
                         dtype=torch.float64)
    model, bank = new_model_and_bank(tiny_config, [opt, sar], torch.float64)
    tr = Trainer(model, bank, OptimConfig(lr=1e-3, batch_size=4, steps=20, warmup_steps=2), nx.make_rng(0, "train"))
    tr.fit(data, steps=3)
    return tr, data


def state_of(tr):
    return {**{f"m.{k}": v for k, v in tr.model.state_dict().items()},
            **{f"b.{k}": v for k, v in tr.bank.state_dict().items()}}


class TestCheckpoint:
    def test_round_trip_bit_exact(self, trained, tmp_path):
        tr, _ = trained
        save_checkpoint(tmp_path / "c.ckpt", tr)
        back = load_checkpoint(tmp_path / "c.ckpt")
        a, b = state_of(tr), state_of(back)
        assert a.keys() == b.keys()
        assert all(torch.equal(a[k], b[k]) and a[k].dtype == b[k].dtype for k in a)
        assert back.step_count == 3 and back.history == tr.history
        assert back.bank.describe() == tr.bank.describe()

    def test_resumed_training_matches_uninterrupted(self, trained, tmp_path):
        tr, data = trained
        save_checkpoint(tmp_path / "c.ckpt", tr)
        resumed = load_checkpoint(tmp_path / "c.ckpt")
        assert resumed.fit(data, steps=2) == tr.fit(data, steps=2)
        assert all(torch.equal(a, b) for a, b in zip(state_of(tr).values(), state_of(resumed).values()))

    def test_header(self, trained, tmp_path):
        tr, _ = trained
        save_checkpoint(tmp_path / "c.ckpt", tr)
        header, _ = read_header(tmp_path / "c.ckpt")
        assert header["config"]["embed_dim"] == 16
        assert [s["name"] for s in header["bank"]["sensors"]] == ["OPT", "SAR"]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_truncated(self, trained, tmp_path):
        tr, _ = trained
        save_checkpoint(tmp_path / "c.ckpt", tr)
        raw = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_future_version_rejected(self, trained, tmp_path):
        tr, _ = trained
        save_checkpoint(tmp_path / "c.ckpt", tr)
        raw = bytearray((tmp_path / "c.ckpt").read_bytes())
        raw[4:6] = struct.pack("<H", 99)
        (tmp_path / "v.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "v.ckpt")
