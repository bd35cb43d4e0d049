"""Accuracy and calibration metrics.

Reliability compares nominal highest-density-region levels with the observed
fraction of ground-truth points falling inside them; HDR membership is decided
by MC quantiles of log-density, exactly like the confidence machinery.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .gm import EPS_VAR, StepMixture, _lower_quantile

SCORE_LEVELS = tuple(round(0.05 * i, 2) for i in range(1, 20))
PLOT_LEVELS = (0.68, 0.95)
N_MC = 4096


@dataclass
class DisplacementResult:
    min_ade: torch.Tensor
    min_fde: torch.Tensor
    k_used: int

    def mean(self) -> tuple[float, float]:
        return float(self.min_ade.float().mean()), float(self.min_fde.float().mean())


def min_ade_fde(trajectories, gt) -> DisplacementResult:
    """Best-of-K ADE and FDE; ``trajectories`` (..., K, T, 2), ``gt`` (..., T, 2).

    The two minima are taken independently and may come from different
    hypotheses.
    """
    traj = torch.as_tensor(trajectories)
    gt = torch.as_tensor(gt, dtype=traj.dtype)
    if traj.shape[-2:] != gt.shape[-2:] or traj.shape[:-3] != gt.shape[:-2]:
        raise ValueError(f"hypotheses {tuple(traj.shape)} do not match ground truth {tuple(gt.shape)}")
    dist = torch.linalg.norm(traj - gt.unsqueeze(-3), dim=-1)  # (..., K, T)
    ade = dist.mean(-1).min(-1).values
    fde = dist[..., -1].min(-1).values
    return DisplacementResult(ade, fde, traj.shape[-3])


def ratio_score(observed, level):
    """100 * min(f/l, l/f); symmetric in its two arguments."""
    f = np.asarray(observed, dtype=np.float64)
    l = np.asarray(level, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.minimum(f / l, l / f)
    return 100.0 * np.where((f > 0) & (l > 0), s, 0.0)


@dataclass
class CalibrationReport:
    levels: np.ndarray           # (L,)
    observed: np.ndarray         # (T, L)
    n_scenes: int
    dt: float = 0.4
    level_scores: np.ndarray = field(init=False)
    r_avg: float = field(init=False)
    r_min: float = field(init=False)

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=np.float64)
        # per-level score on the horizon-pooled observed frequency
        self.level_scores = ratio_score(self.observed.mean(0), self.levels)
        self.r_avg = float(self.level_scores.mean())
        self.r_min = float(self.level_scores.min())

    @property
    def per_timestep_scores(self) -> np.ndarray:
        return ratio_score(self.observed, self.levels[None])

    def observed_at(self, level: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.levels - level)))
        if abs(self.levels[i] - level) > 1e-9:
            raise KeyError(f"level {level} not in report")
        return self.observed[:, i]

    def to_dict(self) -> dict:
        return {
            "r_avg": self.r_avg,
            "r_min": self.r_min,
            "n_scenes": self.n_scenes,
            "levels": self.levels.tolist(),
            "level_scores": self.level_scores.tolist(),
            "observed": self.observed.tolist(),
            "timestep_s": [round((t + 1) * self.dt, 6) for t in range(self.observed.shape[0])],
        }


def _coverage_counts(mix: StepMixture, gt: torch.Tensor, levels: np.ndarray, n_mc: int,
                     gen: torch.Generator) -> torch.Tensor:
    """Count of scenes with gt inside each level's HDR, shape (T, L)."""
    samples = mix.sample(n_mc, gen)
    logp_s = mix.log_prob(samples)                       # (n, B, T)
    logp_gt = mix.log_prob(gt)                           # (B, T)
    # sorted[k] <= g  iff  #{s <= g} >= k + 1, so no sort is needed
    below = (logp_s <= logp_gt[None]).sum(0)             # (B, T)
    k = torch.clamp(torch.floor(torch.as_tensor(1.0 - levels) * n_mc).long(), 0, n_mc - 1)
    inside = below[None] >= (k + 1)[:, None, None]       # (L, B, T)
    return inside.sum(1).T.to(torch.float64)             # (T, L)


def _as_batched_mixture(forecasts) -> StepMixture:
    if isinstance(forecasts, StepMixture):
        return forecasts
    mixes = list(forecasts)
    if not mixes:
        raise ValueError("no forecasts given")
    return StepMixture(torch.stack([m.means for m in mixes]), torch.stack([m.scale_tril for m in mixes]),
                       torch.stack([m.logits for m in mixes]))


def reliability(forecasts, gts, levels=SCORE_LEVELS, n_mc: int = N_MC, seed: int = 0,
                chunk: int = 64, dt: float = 0.4) -> CalibrationReport:
    """Observed HDR coverage of ``gts`` under predicted step mixtures.

    ``forecasts`` is a batched StepMixture (B, T, M, ...) or a list of
    per-scene mixtures; ``gts`` is (B, T, 2).  Chunks draw from generators
    seeded by ``seed + chunk_index`` so results do not depend on ``chunk``'s
    position in a parallel schedule.
    """
    mix = _as_batched_mixture(forecasts)
    gts = torch.as_tensor(np.asarray(gts) if not isinstance(gts, torch.Tensor) else gts, dtype=mix.means.dtype)
    if gts.dim() == 2:
        gts = gts[None]
    B = gts.shape[0]
    if B == 0:
        raise ValueError("reliability needs at least one scene")
    levels = np.asarray(levels, dtype=np.float64)
    counts = torch.zeros(gts.shape[1], len(levels), dtype=torch.float64)
    for ci, start in enumerate(range(0, B, chunk)):
        sl = slice(start, start + chunk)
        gen = torch.Generator().manual_seed(seed + ci)
        sub = mix.map(lambda t: t[sl])
        counts += _coverage_counts(sub, gts[sl], levels, n_mc, gen)
    return CalibrationReport(levels, (counts / B).numpy(), B, dt)


def kde_bandwidth(points: torch.Tensor, rule="scott") -> torch.Tensor:
    """Kernel covariance for (..., N, 2) samples: factor^2 * sample covariance.

    Eigenvalues are floored at EPS_VAR so identical samples stay proper.
    """
    n = points.shape[-2]
    d = 2
    if rule == "scott":
        factor = n ** (-1.0 / (d + 4))
    elif rule == "silverman":
        factor = (n * (d + 2) / 4.0) ** (-1.0 / (d + 4))
    else:
        factor = float(rule)
    centered = points - points.mean(-2, keepdim=True)
    cov = centered.transpose(-1, -2) @ centered / max(n - 1, 1)
    w, V = torch.linalg.eigh(cov * factor ** 2)
    w = w.clamp_min(EPS_VAR)
    return V @ torch.diag_embed(w) @ V.transpose(-1, -2)


class GaussianKDE:
    """Per-timestep Gaussian KDE over one scene's forecast samples (N, T, 2)."""

    def __init__(self, samples, rule="scott"):
        pts = torch.as_tensor(np.asarray(samples) if not isinstance(samples, torch.Tensor) else samples,
                              dtype=torch.float64).transpose(0, 1)  # (T, N, 2)
        self.points = pts
        self.cov = kde_bandwidth(pts, rule)                           # (T, 2, 2)
        self.tril = torch.linalg.cholesky(self.cov)
        inv_tril = torch.linalg.inv(self.tril)
        self.inv_tril = inv_tril
        self.white = pts @ inv_tril.transpose(-1, -2)                 # (T, N, 2)
        n = pts.shape[1]
        self.log_norm = -math.log(2 * math.pi) - torch.log(torch.diagonal(self.tril, dim1=-2, dim2=-1)).sum(-1) \
            - math.log(n)

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        """x (T, Q, 2) -> (T, Q)."""
        xw = x @ self.inv_tril.transpose(-1, -2)
        d2 = torch.cdist(xw, self.white) ** 2
        return torch.logsumexp(-0.5 * d2, dim=-1) + self.log_norm[:, None]

    def sample(self, n: int, gen: torch.Generator) -> torch.Tensor:
        T, N, _ = self.points.shape
        idx = torch.randint(N, (T, n), generator=gen)
        base = torch.gather(self.points, 1, idx[..., None].expand(T, n, 2))
        eps = torch.randn(T, n, 2, generator=gen, dtype=torch.float64)
        return base + eps @ self.tril.transpose(-1, -2)


def kde_reliability(sample_forecasts, gts, levels=SCORE_LEVELS, bandwidth_rule="scott", n_mc: int = 1024,
                    seed: int = 0, dt: float = 0.4) -> CalibrationReport:
    """Reliability for sample-only forecasters via per-timestep Gaussian KDE.

    ``sample_forecasts``: sequence of (N, T, 2) arrays, one per scene.
    """
    levels = np.asarray(levels, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if len(sample_forecasts) == 0:
        raise ValueError("kde_reliability needs at least one scene")
    T = gts.shape[1]
    counts = np.zeros((T, len(levels)))
    for i, (samp, gt) in enumerate(zip(sample_forecasts, gts)):
        if np.asarray(samp).shape[0] < 100:
            raise ValueError("need at least 100 samples per scene for a KDE")
        kde = GaussianKDE(samp, bandwidth_rule)
        gen = torch.Generator().manual_seed(seed + i)
        mc = kde.sample(n_mc, gen)                                   # (T, n, 2)
        logp_s = kde.log_prob(mc)                                    # (T, n)
        logp_gt = kde.log_prob(torch.as_tensor(gt)[:, None])[:, 0]   # (T,)
        thr = _lower_quantile(logp_s, torch.as_tensor(1.0 - levels), dim=1)  # (T, L)
        counts += (logp_gt[:, None] >= thr).numpy()
    return CalibrationReport(levels, counts / len(gts), len(gts), dt)


QQ_HEADER = ("timestep_s", "nominal_level", "observed_frequency")


def emit_qq(report: CalibrationReport, path) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(QQ_HEADER)
            for t in range(report.observed.shape[0]):
                for j, level in enumerate(report.levels):
                    w.writerow([f"{(t + 1) * report.dt:.6g}", f"{level:.6g}", f"{report.observed[t, j]:.6f}"])
    except OSError as exc:
        raise OSError(f"cannot write Q-Q table to {path}: {exc}") from exc
    return path
