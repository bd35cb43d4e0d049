"""Closed-form Gaussian / Gaussian-mixture math for 2D positions.

All functions broadcast over leading batch dimensions.  Covariances are carried
as lower-triangular 2x2 factors ``L`` with ``Sigma = L @ L.T``; the closed-form
triangular solve keeps everything cheap and twice differentiable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

LOG_2PI = math.log(2.0 * math.pi)

# variance floor in m^2; factor diagonals are floored at its square root
EPS_VAR = 1e-4


class InvalidParameterError(ValueError):
    """Raised when Gaussian parameters violate their invariants."""


class ShapeError(ValueError):
    """Raised when horizons or dimensions of inputs disagree."""


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def factor_from_raw(raw: torch.Tensor, eps_var: float = EPS_VAR) -> torch.Tensor:
    """Map unconstrained ``(..., 3)`` entries to a lower-triangular factor.

    Entries are ``(diag_x, offdiag, diag_y)``; diagonals go through softplus plus
    ``sqrt(eps_var)`` so every marginal variance is at least ``eps_var``.
    """
    floor = math.sqrt(eps_var)
    l11 = F.softplus(raw[..., 0]) + floor
    l21 = raw[..., 1]
    l22 = F.softplus(raw[..., 2]) + floor
    zero = torch.zeros_like(l11)
    row0 = torch.stack([l11, zero], dim=-1)
    row1 = torch.stack([l21, l22], dim=-1)
    return torch.stack([row0, row1], dim=-2)


def factor_from_cov(cov) -> torch.Tensor:
    cov = _as_tensor(cov)
    return torch.linalg.cholesky(cov)


def covariance(scale_tril: torch.Tensor) -> torch.Tensor:
    return scale_tril @ scale_tril.transpose(-1, -2)


def _check_factor(scale_tril: torch.Tensor) -> None:
    diag = torch.diagonal(scale_tril, dim1=-2, dim2=-1)
    if not bool(torch.all(diag > 0)):
        raise InvalidParameterError("covariance factor must have a strictly positive diagonal")


@dataclass
class Gaussian2D:
    mean: torch.Tensor
    scale_tril: torch.Tensor

    def __post_init__(self):
        self.mean = _as_tensor(self.mean)
        self.scale_tril = _as_tensor(self.scale_tril, self.mean)
        _check_factor(self.scale_tril)

    @classmethod
    def from_cov(cls, mean, cov) -> "Gaussian2D":
        cov = _as_tensor(cov)
        try:
            L = torch.linalg.cholesky(cov)
        except RuntimeError as exc:  # torch raises a LinAlgError subclass
            raise InvalidParameterError(f"covariance is not SPD: {exc}") from exc
        return cls(mean, L)

    @property
    def cov(self) -> torch.Tensor:
        return covariance(self.scale_tril)


def _whiten(x: torch.Tensor, mean: torch.Tensor, scale_tril: torch.Tensor) -> torch.Tensor:
    d = x - mean
    l11 = scale_tril[..., 0, 0]
    l21 = scale_tril[..., 1, 0]
    l22 = scale_tril[..., 1, 1]
    y1 = d[..., 0] / l11
    y2 = (d[..., 1] - l21 * y1) / l22
    return torch.stack([y1, y2], dim=-1)


def _mahalanobis_sq(x, mean, scale_tril):
    y = _whiten(x, mean, scale_tril)
    return (y * y).sum(-1)


def _log_det(scale_tril: torch.Tensor) -> torch.Tensor:
    return 2.0 * (torch.log(scale_tril[..., 0, 0]) + torch.log(scale_tril[..., 1, 1]))


def _log_normal(x, mean, scale_tril):
    return -LOG_2PI - 0.5 * _log_det(scale_tril) - 0.5 * _mahalanobis_sq(x, mean, scale_tril)


def mahalanobis_sq(x, g: Gaussian2D) -> torch.Tensor:
    _check_factor(g.scale_tril)
    return _mahalanobis_sq(_as_tensor(x, g.mean), g.mean, g.scale_tril)


def log_density_gaussian2d(x, g: Gaussian2D) -> torch.Tensor:
    _check_factor(g.scale_tril)
    return _log_normal(_as_tensor(x, g.mean), g.mean, g.scale_tril)


def unimodal_nll_terms(x, g: Gaussian2D) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Split the unimodal NLL into (error term, residual term, constant).

    ``0.5 * d^2``, ``0.5 * log det Sigma`` and ``log(2 pi)``; they sum to
    ``-log_density_gaussian2d(x, g)``.
    """
    _check_factor(g.scale_tril)
    x = _as_tensor(x, g.mean)
    err = 0.5 * _mahalanobis_sq(x, g.mean, g.scale_tril)
    res = 0.5 * _log_det(g.scale_tril)
    return err, res, torch.full_like(res, LOG_2PI)


@dataclass
class StepMixture:
    """Per-future-timestep 2D mixture.

    ``means``: (..., T, M, 2), ``scale_tril``: (..., T, M, 2, 2),
    ``logits``: (..., T, M) unnormalized step weights.
    """

    means: torch.Tensor
    scale_tril: torch.Tensor
    logits: torch.Tensor

    @property
    def horizon(self) -> int:
        return self.means.shape[-3]

    @property
    def n_modes(self) -> int:
        return self.means.shape[-2]

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def log_weights(self) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=-1)

    @classmethod
    def from_weights(cls, means, scale_tril, weights) -> "StepMixture":
        means = _as_tensor(means)
        scale_tril = _as_tensor(scale_tril, means)
        weights = _as_tensor(weights, means)
        return cls(means, scale_tril, torch.log(weights))

    def at(self, tf: int) -> "StepMixture":
        """Single-timestep view with a horizon of one."""
        T = self.horizon
        if not -T <= tf < T:
            raise IndexError(f"timestep {tf} out of range for horizon {T}")
        sl = slice(tf, tf + 1) if tf != -1 else slice(-1, None)
        return StepMixture(self.means[..., sl, :, :], self.scale_tril[..., sl, :, :, :],
                           self.logits[..., sl, :])

    def map(self, fn) -> "StepMixture":
        return StepMixture(fn(self.means), fn(self.scale_tril), fn(self.logits))

    def detach(self) -> "StepMixture":
        return StepMixture(self.means.detach(), self.scale_tril.detach(), self.logits.detach())

    def validate(self, atol: float = 1e-6) -> None:
        _check_factor(self.scale_tril)
        if self.n_modes < 1 or self.horizon < 1:
            raise ShapeError("mixture needs at least one mode and one timestep")
        s = self.weights.sum(-1)
        if not torch.allclose(s, torch.ones_like(s), atol=atol):
            raise InvalidParameterError("step weights do not sum to one")

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        """Log mixture density for points ``x`` of shape (..., T, 2).

        Extra sample dimensions may sit between the batch dims and ``T`` as long
        as the mixture broadcasts against them.
        """
        comp = _log_normal(x.unsqueeze(-2), self.means, self.scale_tril)
        return torch.logsumexp(comp + self.log_weights, dim=-1)

    def sample(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        """Draw ``n`` points per timestep; returns (n, ..., T, 2)."""
        return _sample_mixture(self.means, self.scale_tril, self.weights, n, generator)


def _sample_mixture(means, scale_tril, weights, n, generator):
    dtype = means.dtype
    batch_shape = weights.shape[:-1]
    cdf = torch.cumsum(weights, dim=-1)
    cdf = cdf / cdf[..., -1:]
    u = torch.rand((n,) + tuple(batch_shape), generator=generator, dtype=dtype)
    idx = (u.unsqueeze(-1) > cdf).sum(-1).clamp_max(weights.shape[-1] - 1)
    eps = torch.randn((n,) + tuple(batch_shape) + (2,), generator=generator, dtype=dtype)
    # gather flat per-component parameters, then apply the triangular factor by hand
    lead = (n,) + tuple(batch_shape)
    params = torch.cat([means, scale_tril[..., 0, 0, None], scale_tril[..., 1, 0, None],
                        scale_tril[..., 1, 1, None]], dim=-1)          # (..., M, 5)
    g = torch.gather(params.expand((n,) + params.shape), -2,
                     idx[..., None, None].expand(lead + (1, 5))).squeeze(-2)
    e0, e1 = eps[..., 0], eps[..., 1]
    x = g[..., 0] + g[..., 2] * e0
    y = g[..., 1] + g[..., 3] * e0 + g[..., 4] * e1
    return torch.stack([x, y], dim=-1)


@dataclass
class AnchorMixture:
    """Joint mixture in 2*T trajectory space with block-diagonal covariance.

    ``means``: (..., M, 2T) stacked per-timestep means,
    ``block_tril``: (..., M, T, 2, 2) per-timestep factors,
    ``logits``: (..., M).
    """

    means: torch.Tensor
    block_tril: torch.Tensor
    logits: torch.Tensor

    @property
    def n_modes(self) -> int:
        return self.means.shape[-2]

    @property
    def horizon(self) -> int:
        return self.block_tril.shape[-3]

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def block_covs(self) -> torch.Tensor:
        return covariance(self.block_tril)

    @property
    def trajectories(self) -> torch.Tensor:
        """Anchor means reshaped to (..., M, T, 2)."""
        return self.means.reshape(self.means.shape[:-1] + (self.horizon, 2))

    def dense_cov(self) -> torch.Tensor:
        """Explicit (..., M, 2T, 2T) block-diagonal covariance."""
        blocks = self.block_covs
        T = self.horizon
        out = blocks.new_zeros(blocks.shape[:-3] + (2 * T, 2 * T))
        for t in range(T):
            out[..., 2 * t:2 * t + 2, 2 * t:2 * t + 2] = blocks[..., t, :, :]
        return out

    def validate(self, atol: float = 1e-6) -> None:
        _check_factor(self.block_tril)
        s = self.weights.sum(-1)
        if not torch.allclose(s, torch.ones_like(s), atol=atol):
            raise InvalidParameterError("anchor weights do not sum to one")


def build_anchor_mixture(step: StepMixture, anchor_logits: torch.Tensor) -> AnchorMixture:
    """Stack the step mixture's shared parameters into the anchor mixture.

    Means and factors are reshaped views of the step tensors when the step
    tensors are stored mode-major, so both mixtures share storage.
    """
    means_mt = step.means.transpose(-3, -2)  # (..., M, T, 2)
    T, M = step.horizon, step.n_modes
    try:
        anchor_means = means_mt.view(means_mt.shape[:-2] + (2 * T,))
    except RuntimeError:
        anchor_means = means_mt.reshape(means_mt.shape[:-2] + (2 * T,))
    block_tril = step.scale_tril.transpose(-4, -3)
    anchor_logits = _as_tensor(anchor_logits, step.means)
    if anchor_logits.shape[-1] != M:
        raise ShapeError(f"expected {M} anchor weights, got {anchor_logits.shape[-1]}")
    return AnchorMixture(anchor_means, block_tril, anchor_logits)


def step_mixture_logpdf(mix: StepMixture, tf: int, x) -> torch.Tensor:
    T = mix.horizon
    if not 0 <= tf < T:
        raise IndexError(f"timestep {tf} out of range for horizon {T}")
    x = _as_tensor(x, mix.means)
    comp = _log_normal(x.unsqueeze(-2), mix.means[..., tf, :, :], mix.scale_tril[..., tf, :, :, :])
    return torch.logsumexp(comp + mix.log_weights[..., tf, :], dim=-1)


def _check_future(gt: torch.Tensor, T: int) -> None:
    if gt.shape[-2:] != (T, 2):
        raise ShapeError(f"ground truth shape {tuple(gt.shape)} does not match horizon {T}")


def step_nll(mix: StepMixture, gt) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-timestep NLL ``-log Theta_tf(x_tf)`` and its sum over the horizon."""
    gt = _as_tensor(gt, mix.means)
    _check_future(gt, mix.horizon)
    per_t = -mix.log_prob(gt)
    return per_t, per_t.sum(-1)


def anchor_log_prob(mix: AnchorMixture, traj: torch.Tensor) -> torch.Tensor:
    """Log density of trajectories (..., T, 2) under the joint mixture."""
    blocks = _log_normal(traj.unsqueeze(-3), mix.trajectories, mix.block_tril)  # (..., M, T)
    per_mode = blocks.sum(-1)
    return torch.logsumexp(per_mode + torch.log_softmax(mix.logits, dim=-1), dim=-1)


def anchor_nll(mix: AnchorMixture, gt) -> torch.Tensor:
    gt = _as_tensor(gt, mix.means)
    if gt.shape[-1] == 2 * mix.horizon and gt.dim() >= 1 and gt.shape[-2:] != (mix.horizon, 2):
        gt = gt.reshape(gt.shape[:-1] + (mix.horizon, 2))
    _check_future(gt, mix.horizon)
    return -anchor_log_prob(mix, gt)


def sample_step_mixture(mix: StepMixture, tf: int, n: int, rng: torch.Generator | None) -> torch.Tensor:
    """``n`` draws from the timestep-``tf`` mixture, shape (n, ..., 2)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    one = mix.at(tf)
    return one.sample(n, rng)[..., 0, :]


def _lower_quantile(values: torch.Tensor, beta, dim: int = 0) -> torch.Tensor:
    """Order statistic at index floor(beta * n) along ``dim``.

    At least a fraction ``1 - beta`` of the values are >= the result.
    """
    n = values.shape[dim]
    srt, _ = torch.sort(values, dim=dim)
    beta = torch.as_tensor(beta, dtype=torch.float64)
    idx = torch.clamp(torch.floor(beta * n).long(), 0, n - 1)
    if idx.dim() == 0:
        return srt.select(dim, int(idx))
    return srt.index_select(dim, idx.flatten())


def quantile_log_threshold(mix: StepMixture, tf: int, beta: float, n: int,
                           rng: torch.Generator | None) -> torch.Tensor:
    """Log-density threshold gamma_tf: mass ``1 - beta`` lies at or above it."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    if n < 100:
        raise ValueError("need at least 100 samples for a quantile threshold")
    one = mix.at(tf)
    pts = one.sample(n, rng)  # (n, ..., 1, 2)
    logp = one.log_prob(pts)[..., 0]
    return _lower_quantile(logp, beta, dim=0)


def log_thresholds(mix: StepMixture, beta: float, n: int, rng: torch.Generator | None) -> torch.Tensor:
    """Thresholds for every timestep at once, shape (..., T)."""
    pts = mix.sample(n, rng)
    logp = mix.log_prob(pts)
    return _lower_quantile(logp, beta, dim=0)


def coverage_indicator(mix: StepMixture, tf: int, x, level: float, n: int,
                       rng: torch.Generator | None) -> torch.Tensor:
    """Whether ``x`` lies in the ``level``-mass highest-density region at ``tf``."""
    gamma = quantile_log_threshold(mix, tf, 1.0 - level, n, rng)
    return step_mixture_logpdf(mix, tf, x) >= gamma
