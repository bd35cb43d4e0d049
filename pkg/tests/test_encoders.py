import numpy as np
import pytest
import torch

from dualmix.encoders import (
    ContextEncoder, OccupancyGrid, SocialAttention, SpatialEncoder, TemporalEncoder, augment_grid_with_coords,
    coord_channels, social_attention,
)

D = torch.float64


def seeded(cls, *a, seed=0):
    torch.manual_seed(seed)
    return cls(*a).double()


def test_temporal_rest_embedding():
    enc = seeded(TemporalEncoder, 16)
    a = enc(torch.zeros(1, 5, 2, dtype=D))
    b = enc(torch.zeros(3, 5, 2, dtype=D))
    assert torch.allclose(a[0], b[0], atol=1e-12) and torch.allclose(b[0], b[2], atol=1e-12)


def test_temporal_pure():
    enc = seeded(TemporalEncoder, 16)
    x = torch.randn(4, 8, 2, dtype=D)
    assert torch.equal(enc(x), enc(x.clone()))


def test_temporal_variable_length():
    enc = seeded(TemporalEncoder, 16)
    path = torch.cumsum(torch.randn(1, 8, 2, dtype=D), 1)
    h2, h8 = enc(path[:, -2:]), enc(path)
    assert h2.shape == h8.shape == (1, 16)
    assert torch.all(torch.isfinite(h2)) and not torch.allclose(h2, h8)


def test_temporal_too_short():
    with pytest.raises(ValueError):
        seeded(TemporalEncoder, 16)(torch.zeros(1, 1, 2, dtype=D))


def odd_grid(n=9, res=0.5):
    cells = np.zeros((n, n), dtype=np.uint8)
    cells[2, 5] = 1
    return OccupancyGrid(cells, res, np.array([-n * res / 2, -n * res / 2]))


def test_coords_center_and_corners():
    aug = augment_grid_with_coords(odd_grid())
    assert aug.shape == (3, 9, 9)
    assert aug[1, 4, 4].item() == 0.0 and aug[2, 4, 4].item() == 0.0
    for (r, c), (x, y) in {(0, 0): (-1, -1), (0, 8): (1, -1), (8, 0): (-1, 1), (8, 8): (1, 1)}.items():
        assert (aug[1, r, c].item(), aug[2, r, c].item()) == (x, y)


def test_coords_occupancy_unchanged():
    g = odd_grid()
    aug = augment_grid_with_coords(g)
    assert np.array_equal(aug[0].numpy(), g.cells.astype(np.float64))


def test_coord_channels_match():
    g = OccupancyGrid(np.zeros((12, 10), np.uint8), 0.3, np.zeros(2))
    assert torch.allclose(augment_grid_with_coords(g)[1:].float(), coord_channels(12, 10), atol=1e-6)


def test_grid_validation():
    with pytest.raises(ValueError):
        OccupancyGrid(np.zeros((7, 8)), 0.5, np.zeros(2))
    with pytest.raises(ValueError):
        OccupancyGrid(np.zeros((8, 8)), 0.0, np.zeros(2))


def grid_batch(cells):
    cells = torch.as_tensor(cells, dtype=D)
    H, W = cells.shape
    return torch.cat([cells[None], coord_channels(H, W, D)])[None]


def test_spatial_free_vs_occupied():
    enc = seeded(SpatialEncoder, 16, 4)
    free, full = enc(grid_batch(np.zeros((32, 32)))), enc(grid_batch(np.ones((32, 32))))
    assert not torch.allclose(free, full)


def test_spatial_translation_sensitive():
    enc = seeded(SpatialEncoder, 16, 4)
    a = np.zeros((32, 32))
    a[10:14, 10:14] = 1
    b = np.roll(a, 1, axis=1)
    with torch.no_grad():
        diff = (enc(grid_batch(a)) - enc(grid_batch(b))).abs().max()
    assert float(diff) >= 1e-6


def test_spatial_pure_and_minimum():
    enc = seeded(SpatialEncoder, 16, 4)
    x = grid_batch(np.random.default_rng(0).integers(0, 2, (16, 16)))
    assert torch.equal(enc(x), enc(x.clone()))
    with pytest.raises(ValueError):
        enc(grid_batch(np.zeros((7, 16))))


def test_social_empty_is_target_plus_null():
    mod = seeded(SocialAttention, 8)
    with torch.no_grad():
        mod.null.copy_(torch.randn(8, dtype=D))
    t = torch.randn(8, dtype=D)
    assert torch.equal(social_attention(t, [], mod), t + mod.null)


def test_social_gate_zero_matches_empty():
    mod = seeded(SocialAttention, 8)
    with torch.no_grad():
        mod.gate.weight.zero_()
        mod.gate.bias.fill_(-1e4)
    t = torch.randn(8, dtype=D)
    assert torch.equal(social_attention(t, [torch.randn(8, dtype=D)], mod), social_attention(t, [], mod))


def test_social_permutation_invariant():
    mod = seeded(SocialAttention, 8)
    t = torch.randn(8, dtype=D)
    nb = [torch.randn(8, dtype=D) for _ in range(5)]
    a = social_attention(t, nb, mod)
    b = social_attention(t, nb[::-1], mod)
    c = social_attention(t, [nb[i] for i in (2, 0, 4, 1, 3)], mod)
    assert torch.allclose(a, b, atol=1e-14) and torch.allclose(a, c, atol=1e-14)


def test_social_mask_excludes_padding():
    mod = seeded(SocialAttention, 8)
    t = torch.randn(1, 8, dtype=D)
    nb = torch.randn(1, 3, 8, dtype=D)
    masked = mod(t, nb, torch.tensor([[True, False, True]]))
    direct = mod(t, nb[:, [0, 2]])
    assert torch.allclose(masked, direct, atol=1e-14)
    none = mod(t, nb, torch.zeros(1, 3, dtype=torch.bool))
    assert torch.allclose(none, t + mod.null, atol=1e-14)


def test_context_concatenation():
    torch.manual_seed(0)
    enc = ContextEncoder(8, 6, 4).double()
    ctx = enc(torch.randn(2, 5, 2, dtype=D), torch.randn(2, 3, 5, 2, dtype=D), torch.ones(2, 3, dtype=torch.bool),
              grid_batch(np.zeros((16, 16))).expand(2, -1, -1, -1))
    assert ctx.h_context.shape == (2, 14)
    assert torch.equal(ctx.h_context[:, :8], ctx.h_temporal) and torch.equal(ctx.h_context[:, 8:], ctx.h_spatial)
    assert ctx.h_social.shape == (2, 8)
