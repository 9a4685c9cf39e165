import numpy as np
import pytest
import torch

from glare.backbone import AttentionMap, PatchGrid
from glare.regions import (CrossAttention, RegionConfig, argmax_patch,
                           make_region, region_context, region_share,
                           sample_attention_regions, sample_random_regions)

import oracles


def grid(rows=14, cols=14, p=16):
    return PatchGrid(rows=rows, cols=cols, patch_size=p)


def linear_scan_argmax(values):
    best, best_idx = None, 0
    for i, v in enumerate(values):
        if best is None or v > best:
            best, best_idx = v, i
    return best_idx


def test_random_regions_shapes_and_bounds():
    g = grid()
    regs = sample_random_regions(g, 6, 2, 6, torch.Generator().manual_seed(0))
    assert len(regs) == 6
    for r in regs:
        assert 2 <= r.n_rows <= 6 and 2 <= r.n_cols <= 6
        assert r.start_row + r.n_rows <= g.rows
        assert r.start_col + r.n_cols <= g.cols
        assert len(r.indices) == r.n_rows * r.n_cols


def test_random_regions_full_grid_when_bounds_pin():
    g = grid(4, 4)
    regs = sample_random_regions(g, 3, 4, 4, torch.Generator().manual_seed(1))
    assert all(r.n_rows == 4 and r.n_cols == 4 and r.start_row == 0
               and r.start_col == 0 for r in regs)


def test_random_regions_deterministic():
    g = grid()
    a = sample_random_regions(g, 5, 2, 6, torch.Generator().manual_seed(2))
    b = sample_random_regions(g, 5, 2, 6, torch.Generator().manual_seed(2))
    assert a == b


def test_region_sampler_rejects_impossible_bounds():
    with pytest.raises(ValueError):
        sample_random_regions(grid(4, 4), 2, 2, 6, torch.Generator().manual_seed(0))


def test_attention_regions_start_at_forced_argmax():
    g = grid()
    attn = torch.zeros(1, 196)
    attn[0, 37] = 1.0
    amap = AttentionMap(per_head=attn, grid=g)
    regs = sample_attention_regions(amap, g, 4, 2, 6,
                                    torch.Generator().manual_seed(3))
    for r in regs:
        assert (r.start_row, r.start_col) == divmod(37, 14)
        assert 37 in r.indices


def test_attention_regions_per_head_argmax_matches_linear_scan():
    g = grid()
    gen = torch.Generator().manual_seed(4)
    attn = torch.rand(6, 196, generator=gen)
    amap = AttentionMap(per_head=attn, grid=g)
    regs = sample_attention_regions(amap, g, 6, 2, 2,
                                    torch.Generator().manual_seed(5))
    for k, r in enumerate(regs):
        want = linear_scan_argmax(attn[k].tolist())
        assert g.flat_index(r.start_row, r.start_col) == want


def test_attention_regions_uniform_ties_to_zero():
    g = grid()
    amap = AttentionMap(per_head=torch.full((2, 196), 1 / 196.0), grid=g)
    regs = sample_attention_regions(amap, g, 2, 2, 3,
                                    torch.Generator().manual_seed(6))
    assert all((r.start_row, r.start_col) == (0, 0) for r in regs)


def test_attention_regions_cycle_heads_beyond_m():
    g = grid(8, 8)
    attn = torch.zeros(2, 64)
    attn[0, 9] = 1.0
    attn[1, 18] = 1.0
    amap = AttentionMap(per_head=attn, grid=g)
    regs = sample_attention_regions(amap, g, 4, 1, 2,
                                    torch.Generator().manual_seed(7))
    starts = [g.flat_index(r.start_row, r.start_col) for r in regs]
    assert starts == [9, 18, 9, 18]


def test_attention_region_clip_keeps_argmax_inside():
    g = grid(14, 14)
    attn = torch.zeros(1, 196)
    attn[0, 195] = 1.0  # bottom-right corner
    amap = AttentionMap(per_head=attn, grid=g)
    regs = sample_attention_regions(amap, g, 3, 2, 6,
                                    torch.Generator().manual_seed(8))
    for r in regs:
        assert 195 in r.indices
        assert r.start_row + r.n_rows <= 14 and r.start_col + r.n_cols <= 14
        assert r.n_rows >= 2 and r.n_cols >= 2


def test_argmax_patch_tie_break():
    assert argmax_patch(torch.tensor([0.1, 0.9, 0.9, 0.2])) == 1
    assert argmax_patch(torch.zeros(7)) == 0


def test_make_region_bounds():
    with pytest.raises(ValueError):
        make_region(13, 13, 2, 2, grid(14, 14))


def test_cross_attention_single_key_returns_value_projection():
    gen = torch.Generator().manual_seed(9)
    ca = CrossAttention(6, generator=gen)
    queries = torch.randn(4, 6, generator=gen)
    key = torch.randn(1, 6, generator=gen)
    out = region_context(queries, key, ca)
    want = ca.w_v(key).expand(4, -1)
    assert torch.allclose(out, want, atol=1e-6)


def test_cross_attention_tau_zero_is_uniform_average():
    gen = torch.Generator().manual_seed(10)
    ca = CrossAttention(5, tau=0.0, generator=gen)
    queries = torch.randn(3, 5, generator=gen)
    keys = torch.randn(7, 5, generator=gen)
    out = ca(queries, keys)
    want = ca.w_v(keys).mean(dim=0, keepdim=True).expand(3, -1)
    assert torch.allclose(out, want, atol=1e-6)


def test_cross_attention_matches_scalar_oracle():
    gen = torch.Generator().manual_seed(11)
    ca = CrossAttention(3, generator=gen).double()
    queries = torch.randn(2, 3, generator=gen, dtype=torch.float64)
    keys = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        out = ca(queries, keys)
    want = oracles.o_cross_attention(
        queries.numpy(), keys.numpy(), ca.w_q.weight.detach().numpy(),
        ca.w_k.weight.detach().numpy(), ca.w_v.weight.detach().numpy(), ca.tau)
    assert np.allclose(out.numpy(), want, rtol=1e-10, atol=1e-12)


def test_region_share_matches_context_on_same_inputs():
    gen = torch.Generator().manual_seed(12)
    ca = CrossAttention(4, generator=gen)
    z = torch.randn(5, 4, generator=gen)
    assert torch.equal(region_share(z, z, ca), region_context(z, z, ca))
    assert region_share(z, torch.zeros(0, 4), ca) is None


def test_cross_attention_outputs_in_value_box():
    gen = torch.Generator().manual_seed(13)
    ca = CrossAttention(6, generator=gen)
    queries = torch.randn(8, 6, generator=gen)
    keys = torch.randn(10, 6, generator=gen)
    values = ca.w_v(keys)
    out = ca(queries, keys)
    eps = 1e-6
    assert (out >= values.min(dim=0).values - eps).all()
    assert (out <= values.max(dim=0).values + eps).all()


def test_cross_attention_gradients_match_finite_differences():
    gen = torch.Generator().manual_seed(14)
    ca = CrossAttention(4, generator=gen).double()
    queries = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    keys = torch.randn(5, 4, generator=gen, dtype=torch.float64)
    target = torch.randn(3, 4, generator=gen, dtype=torch.float64)

    def loss_fn():
        return ((ca(queries, keys) - target) ** 2).sum()

    loss = loss_fn()
    ca.zero_grad()
    loss.backward()
    rng = np.random.default_rng(0)
    for lin in (ca.w_q, ca.w_k, ca.w_v):
        grad = lin.weight.grad.reshape(-1)
        for _ in range(6):
            idx = int(rng.integers(0, grad.numel()))
            fd = oracles.central_difference(loss_fn, lin.weight, idx, h=1e-6)
            an = grad[idx].item()
            denom = max(abs(an), abs(fd), 1e-8)
            assert abs(an - fd) / denom < 1e-4


def test_region_config_validation():
    with pytest.raises(ValueError):
        RegionConfig(sampler="grid")
    with pytest.raises(ValueError):
        RegionConfig(min_p=3, max_p=2)
