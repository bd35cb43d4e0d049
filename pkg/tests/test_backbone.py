import math

import numpy as np
import pytest
import torch

from dualmix.backbone import (
    FiLM, Denoiser, DualMixtureModel, LatentState, MixtureHeads, ModelConfig, decode_heads, denoise_step,
    film_modulate, forward, mixtures_from_core, prob_loss, run_chain, tau_embedding,
)
from dualmix.data import SceneSample, collate, default_grid
from dualmix.gm import step_nll, anchor_nll, covariance

D = torch.float64


def tiny(**kw):
    base = dict(t_fut=3, n_modes=2, latent_dim=8, diffusion_steps=2, d_temporal=8, d_spatial=8, cnn_width=4,
                hidden=16, tau_dim=8, residual_hidden=16, scale_dim=8)
    base.update(kw)
    return ModelConfig(**base)


def model(seed=0, **kw):
    torch.manual_seed(seed)
    return DualMixtureModel(tiny(**kw)).double()


def scene(rng, T_obs=4, T_fut=3, n_nb=2):
    pos = np.cumsum(rng.normal(0.5, 0.2, (T_obs + T_fut, 2)), 0)
    nbs = [np.cumsum(rng.normal(0.3, 0.2, (T_obs, 2)), 0) for _ in range(n_nb)]
    grid = default_grid(pos[T_obs - 1], 16, 0.5)
    grid.cells[3:5, 6:9] = 1
    return SceneSample(pos[:T_obs], nbs, pos[T_obs:], grid)


def batch(n=3, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return collate([scene(rng, **kw) for _ in range(n)], dtype=D)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(diffusion_steps=0)
    with pytest.raises(ValueError):
        ModelConfig(backbone="transformer")


def test_film_identity_when_zeroed():
    torch.manual_seed(0)
    film = FiLM(6, 8, 8, 16, 2, zero_init=True).double()
    scale, shift = film(torch.randn(4, 6, dtype=D), 3)
    assert torch.equal(scale, torch.ones(4, 2, 8, dtype=D)) and torch.equal(shift, torch.zeros(4, 2, 8, dtype=D))
    film2 = FiLM(6, 8, 8, 16, 2, zero_init=False).double()
    with torch.no_grad():
        film2.residual.weight.zero_()
        film2.residual.bias.zero_()
    scale, shift = film2(torch.randn(4, 6, dtype=D), 3)
    assert torch.equal(scale, torch.ones_like(scale)) and torch.equal(shift, torch.zeros_like(shift))


def test_film_pure_and_tau_dependent():
    m = model()
    h = torch.randn(2, 16, dtype=D)
    a = film_modulate(h, 1, m.denoiser)
    b = film_modulate(h.clone(), 1, m.denoiser)
    c = film_modulate(h, 2, m.denoiser)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert not torch.allclose(a[0], c[0])


def test_tau_embedding_injective():
    emb = tau_embedding(torch.arange(1, 10001, dtype=D), 32, D)
    assert torch.unique(emb, dim=0).shape[0] == 10000


def test_denoise_identity_when_g_zero():
    m = model()
    for blk in m.denoiser.blocks:
        with torch.no_grad():
            blk.fc2.weight.zero_()
            blk.fc2.bias.zero_()
    z = LatentState(torch.randn(2, 8, dtype=D), 0)
    out = denoise_step(z, film_modulate(torch.randn(2, 16, dtype=D), 1, m.denoiser), m.denoiser)
    assert torch.equal(out.z, z.z) and out.tau == 1


def test_denoise_jacobian_finite_nonzero():
    m = model()
    h = torch.randn(1, 16, dtype=D)
    mod = film_modulate(h, 1, m.denoiser)
    z = torch.randn(1, 8, dtype=D)
    J = torch.autograd.functional.jacobian(lambda x: m.denoiser.step(x, mod), z)
    assert torch.all(torch.isfinite(J)) and J.abs().sum() > 0
    # finite-difference cross-check of one column
    e = torch.zeros_like(z)
    e[0, 3] = 1e-6
    fd = (m.denoiser.step(z + e, mod) - m.denoiser.step(z - e, mod)) / 2e-6
    assert torch.allclose(fd, J[0, :, 0, 3][None], atol=1e-7)


def test_chain_single_step_and_determinism():
    m = model(diffusion_steps=1)
    h = torch.randn(2, 16, dtype=D)
    s = run_chain(h, m.cfg, m.denoiser, torch.Generator().manual_seed(1))
    assert s.tau == 1
    z0 = torch.randn(2, 8, generator=torch.Generator().manual_seed(1), dtype=D)
    manual = m.denoiser.step(z0, film_modulate(h, 1, m.denoiser))
    assert torch.equal(s.z, manual)
    again = run_chain(h, m.cfg, m.denoiser, torch.Generator().manual_seed(1))
    assert torch.equal(s.z, again.z)


def test_chain_norm_bounded():
    torch.manual_seed(0)
    cfg = ModelConfig()
    den = Denoiser(cfg)
    h = torch.randn(1000, cfg.context_dim)
    with torch.no_grad():
        z = run_chain(h, cfg, den, torch.Generator().manual_seed(0)).z
    assert float(z.norm(dim=-1).max()) <= 100 * math.sqrt(cfg.latent_dim)


def test_step_noise_flag_changes_chain():
    m = model()
    m.cfg.step_noise = True
    h = torch.randn(2, 16, dtype=D)
    a = run_chain(h, m.cfg, m.denoiser, torch.Generator().manual_seed(1)).z
    m.cfg.step_noise = False
    b = run_chain(h, m.cfg, m.denoiser, torch.Generator().manual_seed(1)).z
    assert not torch.allclose(a, b)


def test_heads_contract():
    torch.manual_seed(0)
    cfg = tiny(n_modes=3)
    heads = MixtureHeads(cfg).double()
    core = decode_heads(LatentState(torch.randn(5, 8, dtype=D) * 10, 2), heads)
    assert core.means.shape == (5, 3, 3, 2) and core.cov_raw.shape == (5, 3, 3, 3)
    assert core.step_weight_logits.shape == (5, 3, 3) and core.anchor_weight_logits.shape == (5, 3)
    assert torch.all(torch.linalg.eigvalsh(covariance(core.scale_tril)) > 0)
    step, anchor = mixtures_from_core(core)
    assert torch.allclose(step.weights.sum(-1), torch.ones(5, 3, dtype=D), atol=1e-12)
    assert torch.allclose(anchor.weights.sum(-1), torch.ones(5, dtype=D), atol=1e-12)
    step.validate()
    anchor.validate()


def test_diagonal_cov_flag():
    torch.manual_seed(0)
    heads = MixtureHeads(tiny(diagonal_cov=True)).double()
    core = heads(torch.randn(4, 8, dtype=D))
    assert torch.count_nonzero(core.scale_tril[..., 1, 0]) == 0


@pytest.mark.parametrize("backbone", ["diffusion", "plain"])
def test_forward_contract(backbone):
    m = model(backbone=backbone)
    b = batch()
    out = m(b, torch.Generator().manual_seed(0))
    step, anchor = out.step, out.anchor
    assert step.means.shape == (3, 3, 2, 2)
    assert torch.equal(anchor.means, step.means.transpose(1, 2).reshape(3, 2, 6))
    assert anchor.means.data_ptr() == out.core.means.data_ptr()
    step.validate()
    anchor.validate()
    again = m(b, torch.Generator().manual_seed(0))
    assert torch.equal(again.step.means, step.means) and torch.equal(again.anchor.logits, anchor.logits)


def test_forward_single_scene():
    m = model()
    s = scene(np.random.default_rng(3))
    step, anchor = forward(s, m.float(), torch.Generator().manual_seed(0))
    assert step.means.shape == (1, 3, 2, 2) and anchor.means.shape == (1, 2, 6)


def test_shared_parameter_identity():
    m = model()
    out = m(batch(), torch.Generator().manual_seed(0))
    with torch.no_grad():
        out.step.means[1, 2, 0, 1] += 5.0
        assert out.anchor.means[1, 0, 2 * 2 + 1] == out.step.means[1, 2, 0, 1]
        out.anchor.means[0, 1, 0] -= 3.0
        assert out.step.means[0, 0, 1, 0] == out.anchor.means[0, 1, 0]


def test_prob_loss_examples():
    m = model()
    b = batch()
    out = m(b, torch.Generator().manual_seed(0))
    _, s = step_nll(out.step, b.future)
    assert torch.allclose(prob_loss(out.step, out.anchor, b.future, 1.0, 0.0), s.mean(), atol=1e-12)
    ref = (s + 0.05 * anchor_nll(out.anchor, b.future)).mean()
    assert torch.allclose(prob_loss(out.step, out.anchor, b.future), ref, atol=1e-12)
    with pytest.raises(ValueError):
        prob_loss(out.step, out.anchor, b.future, -1.0, 0.0)


def test_prob_loss_single_mode():
    m = model(n_modes=1)
    b = batch()
    out = m(b, torch.Generator().manual_seed(0))
    _, s = step_nll(out.step, b.future)
    assert torch.allclose(prob_loss(out.step, out.anchor, b.future, 1.0, 0.05), 1.05 * s.mean(), atol=1e-10)


def test_overfit_single_batch():
    torch.manual_seed(0)
    m = DualMixtureModel(tiny(n_modes=2, diffusion_steps=2))
    b = collate([scene(np.random.default_rng(i)) for i in range(8)])
    opt = torch.optim.AdamW(m.parameters(), lr=3e-3)
    losses = []
    for i in range(200):
        out = m(b, torch.Generator().manual_seed(i))
        loss = prob_loss(out.step, out.anchor, b.future)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    assert losses[-1] <= 0.5 * losses[0]
