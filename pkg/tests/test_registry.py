import copy
import itertools
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from smarties import numerics as nx
from smarties.registry import (
    BandResolution,
    HarmonizeStats,
    Mode,
    ProjectionBank,
    RegistryError,
    SensorSpec,
    SpectralRange,
    build_bank,
    bundled_sensor,
    center_nm,
    register_sensor,
    resolve_band,
    resolve_sensor,
)
from smarties.tokenizer import project_tensor

from conftest import make_sensor

# Table S1 of the source material, transcribed independently of the bundled JSON.
TABLE_S1 = [
    (422, 463), (427, 558), (524, 595), (634, 696), (689, 719), (726, 755),
    (761, 802), (728, 938), (843, 886), (923, 964), (1516, 1704), (2002, 2376),
    (430, 545), (466, 620), (590, 710),
    (5.5e7, 5.6e7), (5.5e7, 5.6e7),
]


class TestRegistration:
    def test_three_sensors_give_seventeen_layers(self, paper_bank):
        assert len(paper_bank) == 17
        got = [(l.range.lambda_min_nm, l.range.lambda_max_nm) for l in paper_bank.layers]
        assert got == [(float(a), float(b)) for a, b in TABLE_S1]
        assert [l.layer_id for l in paper_bank.layers] == list(range(1, 18))

    def test_duplicate_sensor_rejected_and_bank_unchanged(self, paper_bank):
        before = [p.detach().clone() for p in paper_bank.parameters()]
        with pytest.raises(RegistryError, match="already registered"):
            register_sensor(bundled_sensor("S2"), paper_bank, nx.make_rng(1))
        assert len(paper_bank) == 17
        assert all(torch.equal(a, b) for a, b in zip(before, paper_bank.parameters()))

    def test_exact_range_reuses_layer(self, paper_bank):
        out = register_sensor(make_sensor("coastal", [(422, 463)]), paper_bank, nx.make_rng(1))
        assert len(out) == 17

    def test_register_returns_copy(self, paper_bank):
        out = register_sensor(make_sensor("new", [(1000, 1100)]), paper_bank, nx.make_rng(1))
        assert len(out) == 18 and len(paper_bank) == 17

    def test_too_many_bands_for_cmax(self):
        bank = ProjectionBank(8, 2, c_max=2)
        with pytest.raises(RegistryError, match="C_max"):
            register_sensor(make_sensor("wide", [(400, 500), (500, 600), (600, 700)]), bank, nx.make_rng(0))

    def test_fresh_layer_init(self):
        bank = build_bank([make_sensor("x", [(400, 500)])], 32, 4, nx.make_rng(0))
        w = bank.f_weight[0].detach().numpy()
        assert np.abs(w).max() <= 1 / 4
        assert abs(w.mean()) < 0.05
        assert torch.count_nonzero(bank.f_bias[0]) == 0

    def test_sensor_json_round_trip(self, tmp_path):
        spec = bundled_sensor("S1")
        spec.stats = HarmonizeStats([0.1, 0.2], [0.9, 0.8], [0.5, 0.4], [0.25, 0.3])
        spec.save(tmp_path / "s1.json")
        back = SensorSpec.load(tmp_path / "s1.json")
        assert back.to_json() == spec.to_json()
        assert json.loads((tmp_path / "s1.json").read_text())["stats"]["p1"] == [0.1, 0.2]


class TestSpectralRange:
    @pytest.mark.parametrize("lo,hi,expected", [(923, 964, 943.5), (1516, 1704, 1610.0)])
    def test_center(self, lo, hi, expected):
        assert center_nm(SpectralRange(lo, hi)) == expected

    @pytest.mark.parametrize("lo,hi", [(500, 500), (600, 500), (float("nan"), 500), (0, 10), (1, float("inf"))])
    def test_invalid(self, lo, hi):
        with pytest.raises(RegistryError):
            SpectralRange(lo, hi)


def bracket_oracle(c, centers):
    """Brute force: the closest pair (lo <= c < hi) of distinct centers, or None outside the span."""
    best = None
    for (i, ci), (j, cj) in itertools.product(enumerate(centers), repeat=2):
        if ci <= c <= cj and ci < cj:
            if best is None or (cj - ci, ci, i, j) < best[0]:
                best = ((cj - ci, ci, i, j), i, j)
    return best


class TestResolveBand:
    def test_worked_example_1100nm(self, paper_bank):
        res = resolve_band(SpectralRange(1050, 1150), paper_bank)
        assert res.mode is Mode.INTERPOLATED
        (lo, w_lo), (hi, w_hi) = res.terms
        assert (lo, hi) == (10, 11)
        # (1610 - 1100) / 666.5 and (1100 - 943.5) / 666.5
        assert round(w_lo, 4) == 0.7652 and round(w_hi, 4) == 0.2348
        assert res.describe() == "Interpolated f_10:0.7652 f_11:0.2348"

    def test_bracket_matches_brute_force(self, paper_bank):
        centers = [center_nm(SpectralRange(a, b)) for a, b in TABLE_S1]
        for c in [450.0, 500.0, 700.0, 850.0, 1100.0, 3000.0, 1e6]:
            res = resolve_band(SpectralRange(c - 1, c + 1), paper_bank)
            _, i, j = bracket_oracle(c, centers)
            assert [t[0] for t in res.terms] == [i + 1, j + 1]

    def test_center_on_layer_center_degenerates(self, paper_bank):
        res = resolve_band(SpectralRange(933, 954), paper_bank)
        assert res.mode is Mode.INTERPOLATED
        assert res.terms == ((10, 1.0), (11, 0.0))
        x = torch.randn(5, 1, 16, dtype=torch.float64)
        exact = resolve_band(SpectralRange(923, 964), paper_bank)
        assert torch.equal(project_tensor(x, [res], paper_bank), project_tensor(x, [exact], paper_bank))

    def test_exact(self, paper_bank):
        assert resolve_band(SpectralRange(923, 964), paper_bank) == BandResolution(Mode.EXACT, ((10, 1.0),))

    def test_extrapolated_far_outside(self):
        bank = build_bank([bundled_sensor("S2"), bundled_sensor("Maxar")], 8, 2, nx.make_rng(0))
        res = resolve_band(SpectralRange(3e8 - 1, 3e8 + 1), bank)
        assert res.mode is Mode.EXTRAPOLATED and res.extrapolated
        assert res.terms == ((12, 1.0),)
        below = resolve_band(SpectralRange(100, 120), bank)
        assert below.extrapolated and below.terms == ((1, 1.0),)

    def test_exact_only_without_match(self, paper_bank):
        with pytest.raises(RegistryError):
            resolve_band(SpectralRange(1050, 1150), paper_bank, "exact_only")

    def test_nearest(self, paper_bank):
        res = resolve_band(SpectralRange(1050, 1150), paper_bank, "nearest")
        assert res.layer_ids()[0] == 10 and res.terms[0][1] == 1.0
        assert res.describe() == "Nearest f_10:1.0000"

    def test_nearest_tie_prefers_lower_wavelength(self):
        bank = build_bank([make_sensor("x", [(100, 200), (300, 400)])], 8, 2, nx.make_rng(0))
        res = resolve_band(SpectralRange(240, 260), bank, "nearest")
        assert res.terms[0] == (1, 1.0)

    def test_repeated_range_resolves_per_occurrence(self, paper_bank):
        res = resolve_sensor(bundled_sensor("S1"), paper_bank, "exact_only")
        assert [r.terms for r in res] == [((16, 1.0),), ((17, 1.0),)]

    def test_independent_of_registration_order(self, paper_sensors):
        fwd = build_bank(paper_sensors, 8, 2, nx.make_rng(0))
        rev = build_bank(paper_sensors[::-1], 8, 2, nx.make_rng(0))
        probe = make_sensor("probe", [(1050, 1150), (500, 520), (634, 696)])
        rng_of = lambda bank, res: [(bank.layers[lid - 1].key, w) for lid, w in res.terms]  # noqa: E731
        for a, b in zip(resolve_sensor(probe, fwd), resolve_sensor(probe, rev)):
            assert a.mode == b.mode
            assert sorted(rng_of(fwd, a)) == sorted(rng_of(rev, b))


@settings(max_examples=200, deadline=None)
@given(c=st.floats(min_value=300.0, max_value=6e7, allow_nan=False))
def test_weights_sum_to_one_exactly(c):
    bank = _SHARED_BANK
    res = resolve_band(SpectralRange(c * 0.999, c * 1.001), bank)
    assert sum(w for _, w in res.terms) == 1.0
    assert all(0.0 <= w <= 1.0 for _, w in res.terms)
    assert resolve_band(SpectralRange(c * 0.999, c * 1.001), bank) == res


def test_weight_monotone_between_brackets():
    lo_c, hi_c = 943.5, 1610.0
    prev = -1.0
    for c in np.linspace(lo_c, hi_c, 60)[:-1]:
        res = resolve_band(SpectralRange(c - 0.25, c + 0.25), _SHARED_BANK)
        (l1, _), (l2, w_hi) = res.terms
        assert (l1, l2) == (10, 11)
        assert w_hi > prev
        prev = w_hi
    assert prev < 1.0


def test_interpolated_token_is_convex_combination(paper_bank):
    res = resolve_band(SpectralRange(1050, 1150), paper_bank)
    (lo, w_lo), (hi, w_hi) = res.terms
    x = torch.randn(7, 16, dtype=torch.float64)
    ref = w_lo * (x @ paper_bank.f_weight[lo - 1].T + paper_bank.f_bias[lo - 1]) \
        + w_hi * (x @ paper_bank.f_weight[hi - 1].T + paper_bank.f_bias[hi - 1])
    # one band -> scale C_max / 1
    got = project_tensor(x[:, None, :], [res], paper_bank) / paper_bank.c_max
    torch.testing.assert_close(got, ref, rtol=1e-6, atol=0)


_SHARED_BANK = build_bank([bundled_sensor(n) for n in ("S2", "Maxar", "S1")], 8, 2, nx.make_rng(0))
