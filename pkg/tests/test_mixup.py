import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from smarties import numerics as nx
from smarties.mixup import MixMask, mix, mix_tensors, round_half_up, sample_mix_mask
from smarties.tokenizer import TokenGrid


def grid(values, name):
    t = torch.as_tensor(values, dtype=torch.float64)
    return TokenGrid.uniform(t, name)


class TestSampleMask:
    def test_half_of_14x14_is_98(self):
        assert sample_mix_mask(14, 14, 0.5, nx.make_rng(0)).m.sum() == 98

    @pytest.mark.parametrize("ratio,count", [(0.0, 0), (1.0, 196)])
    def test_extremes(self, ratio, count):
        assert sample_mix_mask(14, 14, ratio, nx.make_rng(0)).m.sum() == count

    @pytest.mark.parametrize("x,expected", [(0.5, 1), (1.5, 2), (2.5, 3), (2.49, 2), (0.0, 0)])
    def test_round_half_up(self, x, expected):
        assert round_half_up(x) == expected

    def test_invalid_ratio(self):
        with pytest.raises(ValueError):
            sample_mix_mask(2, 2, 1.5, nx.make_rng(0))

    def test_cell_frequency_near_half(self):
        rng = nx.make_rng(0, "freq")
        freq = np.mean([sample_mix_mask(14, 14, 0.5, rng).m for _ in range(1000)], axis=0)
        assert freq.min() >= 0.45 and freq.max() <= 0.55

    def test_complement(self):
        m = sample_mix_mask(3, 3, 0.5, nx.make_rng(1))
        assert np.array_equal(m.complement().m, ~m.m)


class TestMix:
    def test_toy_example(self):
        ta, tb = grid([[[1.0], [2.0]]], "A"), grid([[[10.0], [20.0]]], "B")
        a2, b2 = mix(ta, tb, MixMask(np.array([[True, False]]), 0.5))
        assert a2.tokens.ravel().tolist() == [1.0, 20.0]
        assert b2.tokens.ravel().tolist() == [10.0, 2.0]
        assert a2.provenance.tolist() == [["A", "B"]]
        assert b2.provenance.tolist() == [["B", "A"]]

    def test_all_ones_keeps_streams(self):
        ta, tb = grid(torch.randn(2, 3, 4), "A"), grid(torch.randn(2, 3, 4), "B")
        a2, b2 = mix(ta, tb, MixMask(np.ones((2, 3), dtype=bool), 1.0))
        assert torch.equal(a2.tokens, ta.tokens) and torch.equal(b2.tokens, tb.tokens)

    @pytest.mark.parametrize("seed", range(20))
    def test_conservation_and_verbatim_copies(self, seed):
        rng = nx.make_rng(seed)
        ta = grid(rng.standard_normal((14, 14, 8)) * 1e3, "A")
        tb = grid(rng.standard_normal((14, 14, 8)) * 1e-3, "B")
        m = sample_mix_mask(14, 14, 0.5, rng)
        a2, b2 = mix(ta, tb, m)
        assert torch.equal(a2.tokens + b2.tokens, ta.tokens + tb.tokens)
        for r, c in np.ndindex(14, 14):
            src = ta if m.m[r, c] else tb
            assert torch.equal(a2.tokens[r, c], src.tokens[r, c])

    def test_mixing_twice_restores(self):
        rng = nx.make_rng(5)
        ta, tb = grid(rng.standard_normal((4, 4, 3)), "A"), grid(rng.standard_normal((4, 4, 3)), "B")
        m = sample_mix_mask(4, 4, 0.5, rng)
        a2, b2 = mix(*mix(ta, tb, m), m)
        assert torch.equal(a2.tokens, ta.tokens) and torch.equal(b2.tokens, tb.tokens)
        assert (a2.provenance == "A").all() and (b2.provenance == "B").all()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mix(grid(torch.zeros(2, 2, 3), "A"), grid(torch.zeros(2, 3, 3), "B"), MixMask(np.ones((2, 2), bool), 1.0))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), batch=st.integers(1, 4))
    def test_batched_conservation(self, seed, batch):
        rng = nx.make_rng(seed)
        ta = torch.as_tensor(rng.standard_normal((batch, 9, 5)))
        tb = torch.as_tensor(rng.standard_normal((batch, 9, 5)))
        keep = torch.as_tensor(rng.random((batch, 9)) < 0.5)
        a2, b2 = mix_tensors(ta, tb, keep)
        assert torch.equal(a2 + b2, ta + tb)
