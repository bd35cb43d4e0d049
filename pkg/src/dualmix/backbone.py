"""Parameter-space denoising backbone and the dual-mixture heads.

A latent ``z_0 ~ N(0, I)`` is refined for ``steps`` iterations by FiLM-modulated
residual blocks conditioned on the scene context; three heads then read out
the shared Gaussian parameters, per-timestep weights and anchor weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .encoders import ContextEncoder, ContextFeatures
from .gm import EPS_VAR, AnchorMixture, StepMixture, anchor_nll, build_anchor_mixture, factor_from_raw, step_nll


@dataclass
class ModelConfig:
    t_fut: int = 12
    n_modes: int = 3
    latent_dim: int = 64
    diffusion_steps: int = 10
    d_temporal: int = 64
    d_spatial: int = 64
    cnn_width: int = 16
    hidden: int = 128
    tau_dim: int = 32
    n_blocks: int = 2
    backbone: str = "diffusion"   # or "plain"
    step_noise: bool = False
    eps_var: float = EPS_VAR
    position_scale: float = 5.0   # head outputs in units of 5 m
    residual_hidden: int = 128
    scale_dim: int = 32
    film_zero_init: bool = False
    diagonal_cov: bool = False

    def __post_init__(self):
        if self.diffusion_steps < 1:
            raise ValueError("diffusion_steps must be >= 1")
        if self.backbone not in ("diffusion", "plain"):
            raise ValueError(f"unknown backbone {self.backbone!r}")

    @property
    def context_dim(self) -> int:
        return self.d_temporal + self.d_spatial


@dataclass
class CoreParams:
    means: torch.Tensor                 # (B, M, T, 2) mode-major storage
    cov_raw: torch.Tensor               # (B, M, T, 3) pre-activation factor entries
    scale_tril: torch.Tensor            # (B, M, T, 2, 2)
    step_weight_logits: torch.Tensor    # (B, T, M)
    anchor_weight_logits: torch.Tensor  # (B, M)


def tau_embedding(tau, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal embedding of the diffusion step index."""
    tau = torch.as_tensor(tau, dtype=dtype)
    half = dim // 2
    freqs = torch.exp(-math.log(1e4) * torch.arange(half, dtype=dtype) / half)
    ang = tau[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class FiLM(nn.Module):
    """Maps (context, tau) to per-block (scale, shift); scale = 1 + residual."""

    def __init__(self, context_dim: int, latent_dim: int, tau_dim: int, hidden: int, n_blocks: int,
                 zero_init: bool = True):
        super().__init__()
        self.tau_dim = tau_dim
        self.n_blocks = n_blocks
        self.latent_dim = latent_dim
        self.hidden = nn.Linear(context_dim + tau_dim, hidden)
        self.residual = nn.Linear(hidden, 2 * n_blocks * latent_dim)
        if zero_init:
            nn.init.zeros_(self.residual.weight)
            nn.init.zeros_(self.residual.bias)

    def forward(self, h_context: torch.Tensor, tau) -> tuple[torch.Tensor, torch.Tensor]:
        emb = tau_embedding(tau, self.tau_dim, h_context.dtype).expand(h_context.shape[0], -1)
        r = self.residual(F.silu(self.hidden(torch.cat([h_context, emb], dim=-1))))
        r = r.view(-1, self.n_blocks, 2, self.latent_dim)
        return 1.0 + r[:, :, 0], r[:, :, 1]


class ResidualBlock(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, z, scale, shift):
        h = scale * F.layer_norm(z, z.shape[-1:]) + shift
        return z + self.fc2(F.silu(self.fc1(h)))


class Denoiser(nn.Module):
    """f_phi: residual blocks shared across steps, step identity via FiLM."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.film = FiLM(cfg.context_dim, cfg.latent_dim, cfg.tau_dim, cfg.hidden, cfg.n_blocks,
                         cfg.film_zero_init)
        self.blocks = nn.ModuleList([ResidualBlock(cfg.latent_dim, cfg.hidden) for _ in range(cfg.n_blocks)])

    def step(self, z, mod):
        scale, shift = mod
        for i, block in enumerate(self.blocks):
            z = block(z, scale[:, i], shift[:, i])
        return z


@dataclass
class LatentState:
    z: torch.Tensor
    tau: int = 0


def film_modulate(h_context, tau, denoiser: Denoiser):
    return denoiser.film(h_context, tau)


def denoise_step(prev: LatentState, mod, denoiser: Denoiser) -> LatentState:
    return LatentState(denoiser.step(prev.z, mod), prev.tau + 1)


def run_chain(h_context: torch.Tensor, cfg: ModelConfig, denoiser: Denoiser,
              rng: torch.Generator | None) -> LatentState:
    B = h_context.shape[0]
    z0 = torch.randn(B, cfg.latent_dim, generator=rng, dtype=h_context.dtype)
    state = LatentState(z0, 0)
    for tau in range(1, cfg.diffusion_steps + 1):
        if cfg.step_noise and tau > 1:
            noise = torch.randn(B, cfg.latent_dim, generator=rng, dtype=h_context.dtype)
            state = LatentState(state.z + noise / math.sqrt(cfg.diffusion_steps), state.tau)
        state = denoise_step(state, film_modulate(h_context, tau, denoiser), denoiser)
    return state


class PlainBackbone(nn.Module):
    """Direct feed-forward map from context to latent (ablation)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(cfg.context_dim, cfg.hidden), nn.SiLU(),
            nn.Linear(cfg.hidden, cfg.hidden), nn.SiLU(),
            nn.Linear(cfg.hidden, cfg.latent_dim),
        )

    def forward(self, h_context):
        return self.net(h_context)


class MixtureHeads(nn.Module):
    """Three heads: core Gaussian params, step weight logits, anchor weight logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        T, M, H = cfg.t_fut, cfg.n_modes, cfg.hidden
        self.cfg = cfg
        self.core = nn.Sequential(nn.Linear(cfg.latent_dim, H), nn.SiLU(), nn.Linear(H, M * T * 5))
        self.step = nn.Sequential(nn.Linear(cfg.latent_dim, H), nn.SiLU(), nn.Linear(H, T * M))
        self.anchor = nn.Sequential(nn.Linear(cfg.latent_dim, H), nn.SiLU(), nn.Linear(H, M))

    def forward(self, z: torch.Tensor) -> CoreParams:
        cfg = self.cfg
        B, T, M = z.shape[0], cfg.t_fut, cfg.n_modes
        core = self.core(z).view(B, M, T, 5)
        means = core[..., :2] * cfg.position_scale
        cov_raw = core[..., 2:]
        if cfg.diagonal_cov:
            cov_raw = cov_raw * cov_raw.new_tensor([1.0, 0.0, 1.0])
        tril = factor_from_raw(cov_raw, cfg.eps_var)
        step_logits = self.step(z).view(B, T, M)
        anchor_logits = self.anchor(z)
        return CoreParams(means, cov_raw, tril, step_logits, anchor_logits)


def mixtures_from_core(core: CoreParams) -> tuple[StepMixture, AnchorMixture]:
    """Both representations as views over the same mode-major tensors."""
    step = StepMixture(core.means.transpose(1, 2), core.scale_tril.transpose(1, 2), core.step_weight_logits)
    return step, build_anchor_mixture(step, core.anchor_weight_logits)


@dataclass
class ForwardOutput:
    step: StepMixture
    anchor: AnchorMixture
    context: ContextFeatures
    core: CoreParams
    latent: torch.Tensor = field(repr=False)


class DualMixtureModel(nn.Module):
    """Encoders -> backbone -> heads.  The hypothesis decoder lives alongside."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        from .hypotheses import ResidualDecoder

        self.cfg = cfg
        self.encoder = ContextEncoder(cfg.d_temporal, cfg.d_spatial, cfg.cnn_width)
        if cfg.backbone == "diffusion":
            self.denoiser = Denoiser(cfg)
        else:
            self.plain = PlainBackbone(cfg)
        self.heads = MixtureHeads(cfg)
        self.residuals = ResidualDecoder(cfg)

    def latent(self, h_context: torch.Tensor, rng: torch.Generator | None) -> torch.Tensor:
        if self.cfg.backbone == "diffusion":
            return run_chain(h_context, self.cfg, self.denoiser, rng).z
        return self.plain(h_context)

    def forward(self, batch, rng: torch.Generator | None = None) -> ForwardOutput:
        ctx = self.encoder(batch.target, batch.neighbors, batch.neighbor_mask, batch.grid)
        z = self.latent(ctx.h_context, rng)
        core = self.heads(z)
        step, anchor = mixtures_from_core(core)
        return ForwardOutput(step, anchor, ctx, core, z)


def decode_heads(z_final: LatentState | torch.Tensor, heads: MixtureHeads) -> CoreParams:
    z = z_final.z if isinstance(z_final, LatentState) else z_final
    return heads(z)


def forward(scene, model: DualMixtureModel, rng: torch.Generator | None = None):
    """Run one scene (or batch) and return (StepMixture, AnchorMixture)."""
    from .data import SceneSample, collate

    batch = collate([scene]) if isinstance(scene, SceneSample) else scene
    out = model(batch, rng)
    return out.step, out.anchor


def prob_loss(step: StepMixture, anchor: AnchorMixture, gt: torch.Tensor,
              lambda_step: float = 1.0, lambda_anchor: float = 0.05) -> torch.Tensor:
    """Weighted step + anchor NLL, averaged over any batch dimension."""
    if lambda_step < 0 or lambda_anchor < 0:
        raise ValueError("loss weights must be nonnegative")
    _, step_sum = step_nll(step, gt)
    return (lambda_step * step_sum + lambda_anchor * anchor_nll(anchor, gt)).mean()
