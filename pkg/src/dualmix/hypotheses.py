"""Discrete hypothesis generation from the anchor mixture.

Each active anchor mode contributes its mean path plus ``q_m - 1`` affine
perturbations ``mu_m + sigma_m * B_{m,i}``; quotas come from a largest-remainder
split of the remaining slots.  Confidences are MC percentiles under the step
mixture.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .gm import AnchorMixture, StepMixture, log_thresholds
from .pruning import PrunedWeights, PruningSchedule, gate_weights


@dataclass
class HypothesisSet:
    trajectories: torch.Tensor  # (B, K, T, 2)
    confidences: torch.Tensor   # (B, K)
    source_mode: torch.Tensor   # (B, K) long

    @property
    def k(self) -> int:
        return self.trajectories.shape[1]


@dataclass
class ResidualBundle:
    residuals: torch.Tensor  # (B, M, R + 1, T, 2); slot 0 is the zero residual
    mask: torch.Tensor       # (B, M, R + 1) bool, slot i used iff i < q_m
    scale: torch.Tensor      # (B, M)


@dataclass(frozen=True)
class HypoLossWeights:
    lambda_mse: float = 1.0
    lambda_wta: float = 1.0
    lambda_conf: float = 0.1
    beta: float = 0.05
    wta_start: float = 1.0
    wta_end: float = 0.05

    def __post_init__(self):
        if min(self.lambda_mse, self.lambda_wta, self.lambda_conf) < 0:
            raise ValueError("loss weights must be nonnegative")
        if max(self.lambda_mse, self.lambda_wta, self.lambda_conf) <= 0:
            raise ValueError("at least one hypothesis loss weight must be positive")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")

    def temperature(self, epoch: int, total_epochs: int) -> float:
        frac = min(max(epoch / max(total_epochs, 1), 0.0), 1.0)
        return self.wta_start * (self.wta_end / self.wta_start) ** frac


def sigma_scale(blocks: torch.Tensor) -> torch.Tensor:
    """RMS of the diagonal variances of (..., T, 2, 2) covariance blocks."""
    diag = torch.diagonal(blocks, dim1=-2, dim2=-1)
    return torch.sqrt(diag.flatten(-2).mean(-1))


def hamilton_allocate(pruned, K: int) -> np.ndarray:
    """Largest-remainder quotas with one guaranteed slot per active mode.

    ``pruned`` is either a PrunedWeights for a single scene (quotas are returned
    for its active modes, in ascending mode order) or a plain weight vector
    whose entries are all treated as active.  Ties in the fractional remainders
    go to the lower mode index.
    """
    if isinstance(pruned, PrunedWeights):
        w = np.asarray(pruned.weights.detach().cpu(), dtype=np.float64)
        mask = np.asarray(pruned.active_mask.cpu(), dtype=bool)
        w = w[mask]
    else:
        w = np.asarray(pruned, dtype=np.float64)
    m_star = len(w)
    if m_star < 1:
        raise ValueError("need at least one active mode")
    if K < m_star:
        raise ValueError(f"K={K} is smaller than the number of active modes {m_star}")
    total = w.sum()
    share = w / total if total > 0 else np.full(m_star, 1.0 / m_star)
    r = share * (K - m_star)
    base = np.floor(r)
    q = 1 + base.astype(np.int64)
    leftover = K - int(q.sum())
    frac = r - base
    order = sorted(range(m_star), key=lambda i: (-frac[i], i))
    for i in order[:leftover]:
        q[i] += 1
    return q


def _quota_matrix(pruned: PrunedWeights, K: int) -> np.ndarray:
    w = np.asarray(pruned.weights.detach().cpu(), dtype=np.float64)
    mask = np.asarray(pruned.active_mask.cpu(), dtype=bool)
    B, M = w.shape
    q = np.zeros((B, M), dtype=np.int64)
    for b in range(B):
        active = np.flatnonzero(mask[b])
        if K < len(active):
            raise ValueError(f"K={K} is smaller than the {len(active)} active modes of scene {b}")
        q[b, active] = hamilton_allocate(w[b, active], K)
    return q


def index_embedding(idx: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(100.0) * torch.arange(half, dtype=idx.dtype) / half)
    ang = idx[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class ResidualDecoder(nn.Module):
    """Covariance summary -> h_scale; [h_scale, h_temporal, h_social, slot] -> residual."""

    def __init__(self, cfg):
        super().__init__()
        T = cfg.t_fut
        self.t_fut = T
        self.idx_dim = 16
        self.scale_enc = nn.Sequential(nn.Linear(3 * T, cfg.scale_dim), nn.SiLU(),
                                       nn.Linear(cfg.scale_dim, cfg.scale_dim))
        inp = cfg.scale_dim + 2 * cfg.d_temporal + self.idx_dim
        self.dec = nn.Sequential(nn.Linear(inp, cfg.residual_hidden), nn.SiLU(),
                                 nn.Linear(cfg.residual_hidden, cfg.residual_hidden), nn.SiLU(),
                                 nn.Linear(cfg.residual_hidden, 2 * T))

    @staticmethod
    def cov_summary(block_covs: torch.Tensor) -> torch.Tensor:
        """(..., T, 2, 2) -> (..., 3T) log-variances and correlation."""
        vx, vy = block_covs[..., 0, 0], block_covs[..., 1, 1]
        corr = block_covs[..., 0, 1] / torch.sqrt(vx * vy)
        return torch.stack([0.5 * torch.log(vx), corr, 0.5 * torch.log(vy)], dim=-1).flatten(-2)

    def forward(self, block_covs, h_temporal, h_social, n_residuals: int) -> torch.Tensor:
        """Raw residual bank (B, M, n_residuals, T, 2)."""
        B, M = block_covs.shape[:2]
        h_scale = self.scale_enc(self.cov_summary(block_covs))  # (B, M, S)
        idx = torch.arange(1, n_residuals + 1, dtype=block_covs.dtype)
        emb = index_embedding(idx, self.idx_dim)  # (R, E)
        R = n_residuals
        feats = torch.cat([
            h_scale[:, :, None].expand(B, M, R, -1),
            h_temporal[:, None, None].expand(B, M, R, -1),
            h_social[:, None, None].expand(B, M, R, -1),
            emb[None, None].expand(B, M, R, -1),
        ], dim=-1)
        return self.dec(feats).view(B, M, R, self.t_fut, 2)


def standardize_residuals(raw: torch.Tensor, counts: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Zero-mean / unit-RMS per coordinate over the first ``counts`` residuals.

    ``raw`` (B, M, R, T, 2); ``counts`` (B, M).  A single residual cannot be
    centered, so it is only rescaled to unit RMS over its coordinates.  Unused
    slots come back as zeros.
    """
    R = raw.shape[2]
    idx = torch.arange(R)
    mask = (idx[None, None] < counts[..., None]).to(raw.dtype)[..., None, None]  # (B, M, R, 1, 1)
    n = counts.to(raw.dtype)[..., None, None, None].clamp_min(1.0)
    mean = (raw * mask).sum(2, keepdim=True) / n
    centered = (raw - mean) * mask
    rms = torch.sqrt((centered ** 2).sum(2, keepdim=True) / n + eps)
    multi = centered / rms
    single_rms = torch.sqrt((raw ** 2).mean(dim=(-1, -2), keepdim=True) + eps)
    single = raw / single_rms * mask
    use_single = (counts == 1)[..., None, None, None]
    return torch.where(use_single, single, multi)


def decode_residuals(anchor: AnchorMixture, h_temporal, h_social, quotas, decoder: ResidualDecoder,
                     detach_mixture: bool = False) -> ResidualBundle:
    """Residual bundles for every mode; ``quotas`` (B, M) ints (0 = inactive)."""
    quotas = torch.as_tensor(quotas, dtype=torch.long)
    if quotas.dim() == 1:
        quotas = quotas[None]
    covs = anchor.block_covs.detach() if detach_mixture else anchor.block_covs
    R = max(int(quotas.max()) - 1, 0)
    B, M = covs.shape[:2]
    T = anchor.horizon
    if R > 0:
        raw = decoder(covs, h_temporal, h_social, R)
        std = standardize_residuals(raw, (quotas - 1).clamp_min(0))
    else:
        std = covs.new_zeros(B, M, 0, T, 2)
    zero = covs.new_zeros(B, M, 1, T, 2)
    residuals = torch.cat([zero, std], dim=2)
    mask = torch.arange(R + 1)[None, None] < quotas[..., None]
    return ResidualBundle(residuals, mask, sigma_scale(covs))


def reparameterize(anchor_mean: torch.Tensor, sigma: torch.Tensor, residuals: torch.Tensor) -> torch.Tensor:
    """``mu + sigma * B``; anchor_mean (..., T, 2) or (..., 2T), residuals (..., q, T, 2)."""
    T = residuals.shape[-2]
    mean = anchor_mean.reshape(anchor_mean.shape[:-1] + (T, 2)) if anchor_mean.shape[-1] != 2 else anchor_mean
    sigma = torch.as_tensor(sigma, dtype=residuals.dtype)
    return mean.unsqueeze(-3) + sigma[..., None, None, None] * residuals


def confidence_scores(trajectories: torch.Tensor, step: StepMixture, n_mc: int = 1000, n_bins: int = 100,
                      rng: torch.Generator | None = None) -> torch.Tensor:
    """MC-percentile confidence in [0, 1] for each hypothesis, shape (B, K)."""
    if n_mc < 100 or n_bins < 2:
        raise ValueError("need n_mc >= 100 and n_bins >= 2")
    with torch.no_grad():
        samples = step.sample(n_mc, rng)            # (I, B, T, 2)
        logp_s = step.log_prob(samples)             # (I, B, T)
        per_k = step.map(lambda t: t.unsqueeze(1))
        logp_h = per_k.log_prob(trajectories)       # (B, K, T)
        count = (logp_s[:, :, None] >= logp_h[None]).sum(0)  # (B, K, T)
        j = torch.clamp((count * n_bins) // n_mc, max=n_bins - 1)
        c = 1.0 - j.to(logp_h.dtype) / n_bins
        return c.mean(-1)


def generate(step: StepMixture, anchor: AnchorMixture, pruned: PrunedWeights, context, K: int,
             decoder: ResidualDecoder, rng: torch.Generator | None = None, n_mc: int = 1000,
             n_bins: int = 100, detach_mixture: bool = False, with_confidence: bool = True) -> HypothesisSet:
    """K hypotheses per scene, ordered by mode then residual slot."""
    quotas = _quota_matrix(pruned, K)
    bundle = decode_residuals(anchor, context.h_temporal, context.h_social, quotas, decoder, detach_mixture)
    means = anchor.trajectories.detach() if detach_mixture else anchor.trajectories
    hyps = reparameterize(means, bundle.scale, bundle.residuals)  # (B, M, R+1, T, 2)
    B, M, S = hyps.shape[:3]
    flat = hyps.reshape(B, M * S, *hyps.shape[3:])
    order = torch.as_tensor(np.stack([np.flatnonzero(r) for r in bundle.mask.reshape(B, M * S).numpy()]))
    traj = torch.gather(flat, 1, order[..., None, None].expand(B, K, *flat.shape[2:]))
    source = order // S
    if with_confidence:
        conf = confidence_scores(traj.detach(), step.detach(), n_mc, n_bins, rng)
    else:
        conf = traj.new_zeros(B, K)
    return HypothesisSet(traj, conf, source)


def hypotheses_for(out, K: int, decoder: ResidualDecoder, sched: PruningSchedule, epoch: int, **kw) -> HypothesisSet:
    """Convenience: prune the anchor weights of a forward pass and generate."""
    pruned = gate_weights(out.anchor.weights.detach(), sched, epoch)
    return generate(out.step, out.anchor, pruned, out.context, K, decoder, **kw)


def hypo_loss(hyps: HypothesisSet, gt: torch.Tensor, step: StepMixture, weights: HypoLossWeights,
              epoch: int, total_epochs: int, rng: torch.Generator | None = None, n_mc: int = 200) -> torch.Tensor:
    """lambda_MSE * MSE + lambda_WTA * soft-min + lambda_Conf * confidence hinge."""
    traj = hyps.trajectories                       # (B, K, T, 2)
    err = ((traj - gt[:, None]) ** 2).sum(-1).mean(-1)  # (B, K)
    total = traj.new_zeros(())
    if weights.lambda_mse > 0:
        total = total + weights.lambda_mse * err.mean()
    if weights.lambda_wta > 0:
        temp = weights.temperature(epoch, total_epochs)
        w = torch.softmax(-err / temp, dim=-1)
        total = total + weights.lambda_wta * (w * err).sum(-1).mean()
    if weights.lambda_conf > 0:
        gamma = log_thresholds(step, weights.beta, n_mc, rng)            # (B, T)
        logp = step.map(lambda t: t.unsqueeze(1)).log_prob(traj)         # (B, K, T)
        deficit = F.relu(gamma[:, None] - logp).max(dim=1).values        # (B, T)
        total = total + weights.lambda_conf * deficit.mean()
    return total
