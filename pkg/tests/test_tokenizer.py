import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from smarties import numerics as nx
from smarties.data import SceneRaster
from smarties.registry import RegistryError, SpectralRange, build_bank, bundled_sensor, resolve_sensor
from smarties.tokenizer import (
    PatchGrid,
    TokenGrid,
    patchify,
    patchify_tensor,
    project,
    project_tensor,
    reproject,
    reproject_tensor,
    unpatchify_tensor,
)

from conftest import make_sensor


def zero_biases(bank):
    with torch.no_grad():
        for p in list(bank.f_bias) + list(bank.r_bias):
            p.zero_()
    return bank


class TestPatchify:
    @pytest.mark.parametrize("side,s,rows", [(224, 16, 14), (32, 16, 2), (64, 8, 8)])
    def test_grid_shape(self, side, s, rows):
        img = np.zeros((3, side, side), dtype=np.float32)
        g = patchify(img, s, (side, side))
        assert g.grid_shape == (rows, rows)
        assert g.patches.shape[-1] == 3 * s * s

    def test_constant_image(self):
        g = patchify(np.full((2, 32, 32), 0.75), 16, (32, 32))
        assert torch.all(g.patches == 0.75)

    def test_band_major_row_major_layout(self):
        # pixel value encodes (band, y, x) so every position in the patch is traceable
        c, h, w, s = 2, 4, 6, 2
        pix = np.array([[[100 * b + 10 * y + x for x in range(w)] for y in range(h)] for b in range(c)], dtype=float)
        g = patchify(pix, s, (w, h))
        assert g.grid_shape == (2, 3)
        # patch at row 1, col 2 covers y in {2, 3}, x in {4, 5}
        expected = [24, 25, 34, 35, 124, 125, 134, 135]
        assert g.patches[1, 2].tolist() == expected

    def test_resize_to_target(self):
        g = patchify(np.ones((1, 20, 30)), 8, (64, 32))
        assert g.grid_shape == (4, 8)
        torch.testing.assert_close(g.patches, torch.ones_like(g.patches), rtol=0, atol=1e-12)

    def test_indivisible_target(self):
        with pytest.raises(ValueError, match="does not divide"):
            patchify(np.ones((1, 8, 8)), 3, (8, 8))

    def test_unpatchify_inverts(self):
        x = torch.randn(2, 3, 8, 12, dtype=torch.float64)
        p = patchify_tensor(x, 4)
        assert p.shape == (2, 6, 3, 16)
        assert torch.equal(unpatchify_tensor(p, 4, 2, 3), x)


@pytest.fixture
def s1_bank():
    return build_bank([bundled_sensor("S2"), bundled_sensor("S1")], 16, 4, nx.make_rng(0), dtype=torch.float64)


class TestProject:
    def test_s1_scale_factor_six(self, s1_bank):
        s1 = bundled_sensor("S1")
        res = resolve_sensor(s1, s1_bank, "exact_only")
        assert [r.layer_ids() for r in res] == [[13], [14]]
        p = torch.randn(5, 2, 16, dtype=torch.float64)
        f = lambda i, x: x @ s1_bank.f_weight[i - 1].T + s1_bank.f_bias[i - 1]  # noqa: E731
        expected = 6 * (f(13, p[:, 0]) + f(14, p[:, 1]))
        torch.testing.assert_close(project_tensor(p, res, s1_bank), expected, rtol=1e-12, atol=1e-12)

    def test_full_optical_sensor_is_plain_sum(self, s1_bank):
        s2 = bundled_sensor("S2")
        res = resolve_sensor(s2, s1_bank, "exact_only")
        p = torch.randn(3, 12, 16, dtype=torch.float64)
        expected = sum(p[:, j] @ s1_bank.f_weight[j].T + s1_bank.f_bias[j] for j in range(12))
        torch.testing.assert_close(project_tensor(p, res, s1_bank), expected, rtol=1e-12, atol=1e-12)

    def test_zero_weights_give_zero_token(self, s1_bank):
        with torch.no_grad():
            for p in s1_bank.parameters():
                p.zero_()
        res = resolve_sensor(bundled_sensor("S1"), s1_bank)
        assert torch.count_nonzero(project_tensor(torch.randn(4, 2, 16, dtype=torch.float64), res, s1_bank)) == 0

    @settings(max_examples=50, deadline=None)
    @given(alpha=st.floats(min_value=-10, max_value=10, allow_nan=False))
    def test_linear_without_bias(self, alpha):
        bank = zero_biases(build_bank([bundled_sensor("S1")], 8, 2, nx.make_rng(1), dtype=torch.float64))
        res = resolve_sensor(bundled_sensor("S1"), bank)
        p = torch.as_tensor(nx.make_rng(2).standard_normal((3, 2, 4)))
        torch.testing.assert_close(project_tensor(alpha * p, res, bank), alpha * project_tensor(p, res, bank),
                                   rtol=1e-12, atol=1e-12)

    def test_band_permutation_invariant(self, s1_bank):
        s2 = bundled_sensor("S2")
        res = resolve_sensor(s2, s1_bank, "exact_only")
        p = torch.randn(4, 12, 16, dtype=torch.float64)
        perm = nx.make_rng(3).permutation(12)
        got = project_tensor(p[:, perm], [res[i] for i in perm], s1_bank)
        torch.testing.assert_close(got, project_tensor(p, res, s1_bank), rtol=1e-12, atol=1e-12)

    def test_shared_ranges_share_tokens(self):
        a = make_sensor("A", [(500, 600), (700, 800)])
        b = make_sensor("B", [(500, 600), (700, 800)])
        bank = build_bank([a, b], 8, 2, nx.make_rng(0), dtype=torch.float64)
        assert len(bank) == 2
        p = torch.randn(2, 2, 4, dtype=torch.float64)
        assert torch.equal(project_tensor(p, resolve_sensor(a, bank), bank),
                           project_tensor(p, resolve_sensor(b, bank), bank))

    @pytest.mark.parametrize("name", ["S2", "Maxar", "S1"])
    def test_token_dim_is_sensor_agnostic(self, paper_bank, name):
        sensor = bundled_sensor(name)
        g = patchify(np.ones((sensor.n_bands, 8, 8)), 4, (8, 8), sensor)
        tg = project(g, paper_bank, resolve_sensor(sensor, paper_bank))
        assert tg.tokens.shape == (2, 2, 16)
        assert set(tg.provenance.ravel()) == {name}

    def test_band_count_mismatch(self, s1_bank):
        res = resolve_sensor(bundled_sensor("S1"), s1_bank)
        with pytest.raises(RegistryError):
            project_tensor(torch.zeros(1, 3, 16, dtype=torch.float64), res, s1_bank)


class TestReproject:
    def test_zero_token_zero_bias_gives_zero_patch(self, s1_bank):
        zero_biases(s1_bank)
        s1 = bundled_sensor("S1")
        out = reproject(torch.zeros(16, dtype=torch.float64), s1, s1_bank, resolve_sensor(s1, s1_bank))
        assert out.shape == (2 * 16,) and torch.count_nonzero(out) == 0

    def test_matches_per_band_layers(self, s1_bank):
        s1 = bundled_sensor("S1")
        res = resolve_sensor(s1, s1_bank)
        t = torch.randn(16, dtype=torch.float64)
        expected = torch.cat([t @ s1_bank.r_weight[i].T + s1_bank.r_bias[i] for i in (12, 13)])
        torch.testing.assert_close(reproject(t, s1, s1_bank, res), expected, rtol=1e-12, atol=1e-12)

    def test_batched(self, s1_bank):
        res = resolve_sensor(bundled_sensor("S2"), s1_bank)
        assert reproject_tensor(torch.randn(2, 5, 16, dtype=torch.float64), res, s1_bank).shape == (2, 5, 12, 16)

    def test_rejects_non_finite(self, s1_bank):
        s1 = bundled_sensor("S1")
        with pytest.raises(ValueError):
            reproject(torch.full((16,), float("nan"), dtype=torch.float64), s1, s1_bank, resolve_sensor(s1, s1_bank))


def test_token_grid_requires_full_provenance():
    with pytest.raises(ValueError):
        TokenGrid(torch.zeros(2, 2, 3), np.full((2, 1), "x", dtype=object))


def test_patch_grid_band_view():
    g = PatchGrid(torch.arange(2 * 3 * 8, dtype=torch.float64).reshape(2, 3, 8), None, 2)
    assert g.n_bands == 2
    assert g.as_band_patches().shape == (6, 2, 4)


def test_raster_input_accepted():
    r = SceneRaster(8, 8, [SpectralRange(400, 500)], np.ones((1, 8, 8), dtype=np.float32))
    assert patchify(r, 4, (8, 8)).grid_shape == (2, 2)
