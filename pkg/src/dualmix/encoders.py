"""Conditioning encoders: temporal (LSTM + attention pooling), spatial
(coordinate-augmented CNN + attention pooling) and gated social attention."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


@dataclass
class OccupancyGrid:
    cells: np.ndarray          # (H, W) uint8/bool, 1 = inaccessible
    resolution: float          # meters per cell
    origin: np.ndarray         # world (x, y) of the corner of cell (0, 0)

    def __post_init__(self):
        self.cells = np.asarray(self.cells)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.cells.ndim != 2 or min(self.cells.shape) < 8:
            raise ValueError(f"grid must be 2D and at least 8x8, got {self.cells.shape}")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        H, W = self.shape
        xs = self.origin[0] + (np.arange(W) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(H) + 0.5) * self.resolution
        return xs, ys

    def translated(self, offset) -> "OccupancyGrid":
        return OccupancyGrid(self.cells.copy(), self.resolution, self.origin + np.asarray(offset))


def augment_grid_with_coords(grid: OccupancyGrid) -> torch.Tensor:
    """Stack occupancy with normalized x / y cell-center coordinates (3, H, W).

    Coordinates are mapped affinely so the first and last cell centers land on
    -1 and +1.
    """
    H, W = grid.shape
    xs, ys = grid.cell_centers()
    xn = torch.as_tensor(2.0 * (xs - xs[0]) / (xs[-1] - xs[0]) - 1.0)
    yn = torch.as_tensor(2.0 * (ys - ys[0]) / (ys[-1] - ys[0]) - 1.0)
    occ = torch.as_tensor(grid.cells.astype(np.float64))
    return torch.stack([occ, xn.expand(H, W), yn[:, None].expand(H, W)])


def coord_channels(H: int, W: int, dtype=torch.float32) -> torch.Tensor:
    xn = torch.linspace(-1.0, 1.0, W, dtype=dtype)
    yn = torch.linspace(-1.0, 1.0, H, dtype=dtype)
    return torch.stack([xn.expand(H, W), yn[:, None].expand(H, W)])


class AttentionPool(nn.Module):
    """Single-head attention pooling of a token set with a query vector."""

    def __init__(self, dim: int):
        super().__init__()
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, query: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        # query (B, D), tokens (B, N, D)
        scores = torch.einsum("bd,bnd->bn", query, self.key(tokens)) * self.scale
        attn = torch.softmax(scores, dim=-1)
        return torch.einsum("bn,bnd->bd", attn, self.value(tokens))


class TemporalEncoder(nn.Module):
    """LSTM over (displacement, position) features, then self-attention pooling
    queried by the final hidden state."""

    def __init__(self, dim: int = 64):
        super().__init__()
        self.dim = dim
        self.inp = nn.Linear(4, dim)
        self.lstm = nn.LSTM(dim, dim, batch_first=True)
        self.query = nn.Linear(dim, dim)
        self.pool = AttentionPool(dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, positions: torch.Tensor) -> torch.Tensor:
        """``positions`` (B, T_obs, 2) in the ego frame -> (B, dim)."""
        if positions.shape[-2] < 2:
            raise ValueError("temporal encoder needs at least two observed frames")
        disp = torch.diff(positions, dim=-2, prepend=positions[..., :1, :])
        feats = torch.tanh(self.inp(torch.cat([disp, positions], dim=-1)))
        seq, _ = self.lstm(feats)
        last = seq[:, -1]
        pooled = self.pool(self.query(last), seq)
        return last + self.out(pooled)


class SpatialEncoder(nn.Module):
    """Strided CNN over the 3-channel grid with attention pooling."""

    def __init__(self, dim: int = 64, width: int = 16):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.Conv2d(2 * width, dim, 3, stride=2, padding=1),
        ])
        self.query = nn.Parameter(torch.randn(dim) / math.sqrt(dim))
        self.pool = AttentionPool(dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, aug: torch.Tensor) -> torch.Tensor:
        """``aug`` (B, 3, H, W) -> (B, dim)."""
        if aug.shape[-1] < 8 or aug.shape[-2] < 8:
            raise ValueError("grid smaller than the 8x8 receptive-field minimum")
        h = aug
        for conv in self.convs:
            h = F.silu(conv(h))
        tokens = h.flatten(2).transpose(1, 2)  # (B, N, dim)
        q = self.query.expand(tokens.shape[0], -1)
        return self.out(self.pool(q, tokens) + tokens.mean(1))


class SocialAttention(nn.Module):
    """Gated cross-attention from the target feature onto neighbor features.

    Each neighbor's attention weight is multiplied by a relevance gate in
    [0, 1]; a learned null embedding is always added so the empty set is
    well defined.
    """

    def __init__(self, dim: int = 64):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.gate = nn.Linear(2 * dim, 1)
        self.o = nn.Linear(dim, dim, bias=False)
        self.null = nn.Parameter(torch.zeros(dim))
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, target: torch.Tensor, neighbors: torch.Tensor,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        """``target`` (B, D); ``neighbors`` (B, N, D); ``mask`` (B, N) True = present."""
        B, N, _ = neighbors.shape
        base = target + self.null
        if N == 0:
            return base
        if mask is None:
            mask = torch.ones(B, N, dtype=torch.bool, device=target.device)
        scores = torch.einsum("bd,bnd->bn", self.q(target), self.k(neighbors)) * self.scale
        scores = scores.masked_fill(~mask, float("-inf"))
        any_present = mask.any(-1, keepdim=True)
        scores = torch.where(any_present, scores, torch.zeros_like(scores))
        attn = torch.softmax(scores, dim=-1) * mask
        pair = torch.cat([target.unsqueeze(1).expand(-1, N, -1), neighbors], dim=-1)
        g = torch.sigmoid(self.gate(pair)).squeeze(-1)
        mixed = torch.einsum("bn,bnd->bd", attn * g, self.v(neighbors))
        return base + self.o(mixed)


def social_attention(target, neighbors, module: SocialAttention) -> torch.Tensor:
    """Functional form for a single target and a list of neighbor vectors."""
    target = torch.as_tensor(target)
    if len(neighbors) == 0:
        nb = target.new_zeros(1, 0, target.shape[-1])
    else:
        nb = torch.stack([torch.as_tensor(n) for n in neighbors]).unsqueeze(0)
    return module(target.unsqueeze(0), nb)[0]


@dataclass
class ContextFeatures:
    h_temporal: torch.Tensor
    h_spatial: torch.Tensor
    h_social: torch.Tensor

    @property
    def h_context(self) -> torch.Tensor:
        return torch.cat([self.h_temporal, self.h_spatial], dim=-1)


class ContextEncoder(nn.Module):
    def __init__(self, d_temporal: int = 64, d_spatial: int = 64, cnn_width: int = 16):
        super().__init__()
        self.temporal = TemporalEncoder(d_temporal)
        self.spatial = SpatialEncoder(d_spatial, cnn_width)
        self.social = SocialAttention(d_temporal)

    def forward(self, target: torch.Tensor, neighbors: torch.Tensor, neighbor_mask: torch.Tensor,
                grid: torch.Tensor) -> ContextFeatures:
        """target (B, T, 2); neighbors (B, N, T, 2); neighbor_mask (B, N); grid (B, 3, H, W)."""
        B, N = neighbors.shape[:2]
        h_t = self.temporal(target)
        if N > 0:
            h_n = self.temporal(neighbors.reshape(B * N, *neighbors.shape[2:])).reshape(B, N, -1)
        else:
            h_n = h_t.new_zeros(B, 0, h_t.shape[-1])
        h_soc = self.social(h_t, h_n, neighbor_mask)
        h_s = self.spatial(grid)
        return ContextFeatures(h_t, h_s, h_soc)
