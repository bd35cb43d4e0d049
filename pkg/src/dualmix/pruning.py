"""Epoch-scheduled soft-to-hard pruning of anchor-mode weights."""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class PruningSchedule:
    delta_0: float = 0.01
    delta_f: float = 0.10
    eta_0: float = 0.1
    eta_f: float = 0.001
    total_epochs: int = 50

    def __post_init__(self):
        if not (0.0 <= self.delta_0 <= self.delta_f < 1.0):
            raise ValueError("need 0 <= delta_0 <= delta_f < 1")
        if not (0.0 < self.eta_f <= self.eta_0):
            raise ValueError("need 0 < eta_f <= eta_0")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")

    def _frac(self, e: int) -> float:
        if not 1 <= e <= self.total_epochs:
            raise ValueError(f"epoch {e} outside [1, {self.total_epochs}]")
        return e / self.total_epochs


def threshold_at(sched: PruningSchedule, e: int) -> float:
    return sched.delta_0 + (sched.delta_f - sched.delta_0) * sched._frac(e)


def temperature_at(sched: PruningSchedule, e: int) -> float:
    return sched.eta_0 + (sched.eta_f - sched.eta_0) * sched._frac(e)


@dataclass
class PrunedWeights:
    weights: torch.Tensor      # (..., M)
    active_mask: torch.Tensor  # (..., M) bool
    active_count: torch.Tensor  # (...,) long


def gate_weights(alpha: torch.Tensor, sched: PruningSchedule, e: int) -> PrunedWeights:
    """Sigmoid-gate normalized weights ``alpha`` (..., M) and renormalize.

    The largest-weight mode always survives; if every gate underflows the
    result collapses onto that mode.
    """
    delta = threshold_at(sched, e)
    eta = temperature_at(sched, e)
    gates = torch.sigmoid((alpha - delta) / eta)
    top = alpha.argmax(-1, keepdim=True)
    forced = torch.zeros_like(alpha, dtype=torch.bool).scatter(-1, top, True)
    gated = gates * alpha
    total = gated.sum(-1, keepdim=True)
    degenerate = total < 1e-12
    onehot = forced.to(alpha.dtype)
    safe_total = torch.where(degenerate, torch.ones_like(total), total)
    pruned = torch.where(degenerate, onehot, gated / safe_total)
    mask = (pruned > delta) | forced
    return PrunedWeights(pruned, mask, mask.sum(-1))
