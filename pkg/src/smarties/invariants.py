"""Fast self-check of the library's core invariants, used by ``smarties verify``."""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import numerics as nx
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SceneRaster, compute_stats, decode_ssr, encode_ssr, harmonize_array, unharmonize_array
from .mixup import mix_tensors, sample_mix_mask
from .model import ModelConfig, reconstruct_and_loss, sincos_pe
from .registry import Band, SensorSpec, SpectralRange, build_bank, bundled_sensor, resolve_band, resolve_sensor
from .tokenizer import project_tensor
from .train import OptimConfig, Trainer, masked_loss, new_model_and_bank, sample_step_masks


def _expect(cond: object, msg: str) -> None:
    if not cond:
        raise AssertionError(msg)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float

    def to_json(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail, "seconds": round(self.seconds, 3)}


def _tiny_setup(seed: int):
    opt = SensorSpec("OPT", [Band("b0", SpectralRange(630, 690))])
    sar = SensorSpec("SAR", [Band("vv", SpectralRange(5.5e7, 5.6e7)), Band("vh", SpectralRange(5.5e7, 5.6e7))])
    cfg = ModelConfig(embed_dim=16, depth=1, heads=2, decoder_dim=8, decoder_depth=1, decoder_heads=2,
                      patch_size=4, img_size=16, seed=seed)
    model, bank = new_model_and_bank(cfg, [opt, sar], torch.float64)
    rng = nx.make_rng(seed, "verify")
    pa = torch.as_tensor(rng.standard_normal((2, 16, 1, 16)))
    pb = torch.as_tensor(rng.standard_normal((2, 16, 2, 16)))
    masks = sample_step_masks(2, cfg, rng)
    return model, bank, pa, pb, resolve_sensor(opt, bank), resolve_sensor(sar, bank), masks


def check_mixup_conservation(seed: int) -> str:
    for s in range(100):
        rng = nx.make_rng(seed + s, "verify-mix")
        ta = torch.as_tensor(rng.standard_normal((196, 32)))
        tb = torch.as_tensor(rng.standard_normal((196, 32)))
        keep = torch.as_tensor(sample_mix_mask(14, 14, 0.5, rng).m.ravel())
        a2, b2 = mix_tensors(ta, tb, keep)
        _expect(torch.equal(a2 + b2, ta + tb), f"seed {seed + s}")
    return "100 seeds, 14x14 grid, exact"


def check_ssr_round_trip(seed: int) -> str:
    for s in range(100):
        rng = nx.make_rng(seed + s, "verify-ssr")
        c, h, w = (int(v) for v in rng.integers(1, 6, size=3))
        bands = [SpectralRange(400.0 + 100 * j, 450.0 + 100 * j) for j in range(c)]
        r = SceneRaster(w, h, bands, rng.standard_normal((c, h, w)).astype(np.float32))
        back = decode_ssr(encode_ssr(r))
        same = back.pixels.tobytes() == r.pixels.tobytes() and back.bands == r.bands
        _expect(same, f"raster {seed + s} changed")
    return "100 random rasters, bit-exact"


def check_harmonize_inverse(seed: int) -> str:
    rng = nx.make_rng(seed, "verify-harm")
    r = SceneRaster(32, 32, [SpectralRange(400, 500)], rng.gamma(2.0, size=(1, 32, 32)).astype(np.float32))
    stats = compute_stats([r])
    x = r.pixels.astype(np.float64)
    inside = (x > stats.p1[0]) & (x < stats.p99[0])
    back = unharmonize_array(harmonize_array(x, stats), stats)
    err = float(np.max(np.abs(back[inside] - x[inside]) / np.abs(x[inside])))
    _expect(err <= 1e-6, f"relative error {err:.3g}")
    return f"max relative error {err:.2e}"


def check_interpolation(seed: int) -> str:
    bank = build_bank([bundled_sensor(n) for n in ("S2", "Maxar", "S1")], 8, 2, nx.make_rng(seed))
    res = resolve_band(SpectralRange(1050, 1150), bank)
    _expect(res.describe() == "Interpolated f_10:0.7652 f_11:0.2348", res.describe())
    rng = nx.make_rng(seed, "verify-interp")
    for c in rng.uniform(300.0, 5e7, size=200):
        r = resolve_band(SpectralRange(c * 0.999, c * 1.001), bank)
        _expect(sum(w for _, w in r.terms) == 1.0, f"weights at {c} nm")
    return "1100 nm row and 200 weight sums"


def check_projection_scale(seed: int) -> str:
    bank = build_bank([bundled_sensor("S1")], 8, 2, nx.make_rng(seed), dtype=torch.float64)
    res = resolve_sensor(bundled_sensor("S1"), bank)
    p = torch.as_tensor(nx.make_rng(seed, "verify-proj").standard_normal((3, 2, 4)))
    ref = 6.0 * sum(p[:, j] @ bank.f_weight[j].T + bank.f_bias[j] for j in range(2))
    torch.testing.assert_close(project_tensor(p, res, bank), ref, rtol=1e-12, atol=1e-12)
    return "S1 token = 6 * (f_VV + f_VH)"


def check_positional_encoding(seed: int) -> str:
    a, b = sincos_pe(14, 14, 32), sincos_pe(14, 14, 32)
    _expect(a.tobytes() == b.tobytes(), "table differs between calls")
    origin_ok = np.all(a[0, 0:8] == 0.0) and np.all(a[0, 8:16] == 1.0)
    _expect(origin_ok, "origin row is not sin 0 / cos 1")
    return "deterministic; origin row sin 0, cos 1"


def check_masking_invariance(seed: int) -> str:
    model, bank, pa, pb, ra, rb, masks = _tiny_setup(seed)
    target = pa.clone().requires_grad_()
    loss = masked_loss(model, bank, pa, pb, ra, rb, masks)
    # tokens come from a no-grad forward so only the target tensor carries gradient
    with torch.no_grad():
        ta, tb = mix_tensors(project_tensor(pa, ra, bank), project_tensor(pb, rb, bank), masks.keep_a)
        da = model.decode(model.encode(ta, masks.ids_keep_a), masks.ids_keep_a)
        db = model.decode(model.encode(tb, masks.ids_keep_b), masks.ids_keep_b)
    l2 = reconstruct_and_loss(model, bank, da, db, target, pb, ra, rb, masks.keep_a, masks.masked_a, masks.masked_b)
    (grad,) = torch.autograd.grad(l2, target)
    scored = masks.masked_a | masks.masked_b
    _expect(torch.count_nonzero(grad[~scored]) == 0, "unmasked target pixels received gradient")
    _expect(l2.item() == loss.item(), "loss changed when recomputed from targets")
    return "zero gradient on never-scored target pixels"


def check_loss_symmetry(seed: int) -> str:
    model, bank, pa, pb, ra, rb, masks = _tiny_setup(seed)
    fwd = masked_loss(model, bank, pa, pb, ra, rb, masks).item()
    rev = masked_loss(model, bank, pb, pa, rb, ra, masks.swapped()).item()
    _expect(abs(fwd - rev) <= 1e-12 * max(1.0, abs(fwd)), f"{fwd} vs {rev}")
    return f"L = {fwd:.6f} both ways"


def check_kernel_gradients(seed: int) -> str:
    rng = nx.make_rng(seed, "verify-grad")
    p = lambda *s: torch.as_tensor(rng.standard_normal(s)).requires_grad_()  # noqa: E731
    x, w, b = p(2, 3, 8), p(8), p(8)
    r = torch.as_tensor(rng.standard_normal((2, 3, 8)))
    err = nx.grad_check(lambda: (nx.layer_norm(x, w, b) * r).sum(), [x, w, b], h=1e-5)
    _expect(err < 1e-5, f"layer norm rel err {err:.2e}")
    return f"layer norm rel err {err:.2e}"


def check_checkpoint_round_trip(seed: int) -> str:
    model, bank, *_ = _tiny_setup(seed)
    tr = Trainer(model, bank, OptimConfig(), nx.make_rng(seed, "verify-ckpt"))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "c.ckpt"
        save_checkpoint(path, tr)
        back = load_checkpoint(path)
    for a, b in zip(list(tr.model.state_dict().values()) + list(tr.bank.state_dict().values()),
                    list(back.model.state_dict().values()) + list(back.bank.state_dict().values())):
        _expect(torch.equal(a, b), "reloaded weights differ")
    return "bit-exact weights"


CHECKS: dict[str, Callable[[int], str]] = {
    "mixup-conservation": check_mixup_conservation,
    "ssr-round-trip": check_ssr_round_trip,
    "harmonize-inverse": check_harmonize_inverse,
    "interpolation-weights": check_interpolation,
    "projection-scale": check_projection_scale,
    "positional-encoding": check_positional_encoding,
    "masking-invariance": check_masking_invariance,
    "loss-symmetry": check_loss_symmetry,
    "kernel-gradients": check_kernel_gradients,
    "checkpoint-round-trip": check_checkpoint_round_trip,
}


def run_checks(seed: int = 0, only: list[str] | None = None) -> list[Check]:
    out = []
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        try:
            detail, ok = fn(seed), True
        except Exception as exc:  # a failing check is reported, not raised
            detail, ok = f"{type(exc).__name__}: {exc}", False
        out.append(Check(name, ok, detail, time.perf_counter() - t0))
    return out
