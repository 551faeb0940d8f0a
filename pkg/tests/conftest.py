import dataclasses

import numpy as np
import pytest
import torch

from smarties import numerics as nx
from smarties.data import compute_stats, synth_scenes
from smarties.model import ModelConfig
from smarties.registry import Band, SensorSpec, SpectralRange, build_bank, bundled_sensor

nx.configure_determinism()


@pytest.fixture
def paper_sensors():
    return [bundled_sensor("S2"), bundled_sensor("Maxar"), bundled_sensor("S1")]


@pytest.fixture
def paper_bank(paper_sensors):
    return build_bank(paper_sensors, 16, 4, nx.make_rng(0, "bank"), dtype=torch.float64).double()


def make_sensor(name, ranges):
    return SensorSpec(name, [Band(f"b{i}", SpectralRange(lo, hi)) for i, (lo, hi) in enumerate(ranges)])


@pytest.fixture
def tiny_sensors():
    """Two small sensors with statistics from a handful of synthetic scenes."""
    opt = make_sensor("OPT", [(450, 520), (630, 690), (760, 900)])
    sar = make_sensor("SAR", [(5.5e7, 5.6e7), (5.5e7, 5.6e7)])
    scenes, _ = synth_scenes(6, [opt, sar], 3, nx.make_rng(3, "data"), size=16)
    opt = dataclasses.replace(opt, stats=compute_stats([s.rasters["OPT"] for s in scenes]))
    sar = dataclasses.replace(sar, stats=compute_stats([s.rasters["SAR"] for s in scenes]))
    return opt, sar, scenes


@pytest.fixture
def tiny_config():
    return ModelConfig(embed_dim=16, depth=1, heads=2, decoder_dim=16, decoder_depth=1, decoder_heads=2,
                       patch_size=4, img_size=16, mask_ratio=0.75, mixup_ratio=0.5, seed=0)
