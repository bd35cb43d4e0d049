"""Dataset ingestion: ETH/UCY text tables, sliding windows, ego frame, grids."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .encoders import OccupancyGrid, coord_channels

log = logging.getLogger(__name__)

T_HIST = 8
T_FUT = 12
GRID_SIZE = 64
GRID_RESOLUTION = 0.3125


class DataFormatError(ValueError):
    pass


@dataclass
class AgentTable:
    frame: np.ndarray   # (N,) int64
    agent: np.ndarray   # (N,) int64
    xy: np.ndarray      # (N, 2) float64, meters

    def __len__(self):
        return len(self.frame)

    def tracks(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """agent id -> (frames, positions), sorted by frame."""
        order = np.lexsort((self.frame, self.agent))
        agents = self.agent[order]
        cuts = np.flatnonzero(np.diff(agents)) + 1
        out = {}
        for idx in np.split(order, cuts):
            if len(idx):
                out[int(self.agent[idx[0]])] = (self.frame[idx], self.xy[idx])
        return out


def _as_int(tok: str) -> int:
    v = float(tok)
    if not np.isfinite(v) or v != int(v):
        raise ValueError(f"{tok!r} is not an integer id")
    return int(v)


def parse_ethucy(path) -> AgentTable:
    """Read whitespace-separated ``frame agent x y`` lines."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    frames, agents, xy = [], [], []
    seen: dict[tuple[int, int], int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        toks = s.split()
        if len(toks) < 4:
            raise DataFormatError(f"{path}:{lineno}: expected 4 fields, got {len(toks)}")
        try:
            f, a = _as_int(toks[0]), _as_int(toks[1])
            x, y = float(toks[2]), float(toks[3])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
        if not (np.isfinite(x) and np.isfinite(y)):
            raise DataFormatError(f"{path}:{lineno}: non-finite coordinate")
        key = (f, a)
        if key in seen:
            raise DataFormatError(f"{path}:{lineno}: duplicate (frame, agent) {key}, first seen on line {seen[key]}")
        seen[key] = lineno
        frames.append(f)
        agents.append(a)
        xy.append((x, y))
    if not frames:
        warnings.warn(f"{path} contains no trajectory rows", stacklevel=2)
        return AgentTable(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2)))
    frame = np.asarray(frames, dtype=np.int64)
    agent = np.asarray(agents, dtype=np.int64)
    order = np.lexsort((agent, frame))
    return AgentTable(frame[order], agent[order], np.asarray(xy, dtype=np.float64)[order])


def write_ethucy(path, table: AgentTable) -> None:
    lines = [f"{f} {a} {x:.6f} {y:.6f}" for f, a, (x, y) in zip(table.frame, table.agent, table.xy)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


@dataclass
class SceneSample:
    target: np.ndarray                  # (T_obs, 2)
    neighbors: list[np.ndarray]         # each (T_obs, 2), time aligned with target
    future: np.ndarray                  # (T_fut, 2)
    grid: OccupancyGrid
    world_anchor: np.ndarray = field(default_factory=lambda: np.zeros(2))
    frame_id: int = 0
    scene_id: str = ""
    ego: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        self.future = np.asarray(self.future, dtype=np.float64)
        self.neighbors = [np.asarray(n, dtype=np.float64) for n in self.neighbors]
        if self.target.ndim != 2 or self.target.shape[0] < 2:
            raise ValueError("target history needs at least two frames")
        for n in self.neighbors:
            if n.shape != self.target.shape:
                raise ValueError("neighbor histories must be time-aligned with the target")
        if not np.all(np.isfinite(self.future)):
            raise ValueError("future contains non-finite values")

    @property
    def obs_len(self) -> int:
        return self.target.shape[0]


def split_tracks(frames: np.ndarray, frame_step: int) -> list[slice]:
    """Contiguous runs of a track where successive frames differ by ``frame_step``."""
    if len(frames) == 0:
        return []
    breaks = np.flatnonzero(np.diff(frames) != frame_step) + 1
    bounds = np.concatenate([[0], breaks, [len(frames)]])
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def infer_frame_step(table: AgentTable) -> int:
    diffs = []
    for frames, _ in table.tracks().values():
        d = np.diff(frames)
        diffs.extend(d[d > 0].tolist())
    if not diffs:
        return 1
    vals, counts = np.unique(diffs, return_counts=True)
    return int(vals[np.argmax(counts)])


def default_grid(center, size: int = GRID_SIZE, resolution: float = GRID_RESOLUTION) -> OccupancyGrid:
    center = np.asarray(center, dtype=np.float64)
    origin = center - 0.5 * size * resolution
    return OccupancyGrid(np.zeros((size, size), dtype=np.uint8), resolution, origin)


def extract_windows(table: AgentTable, t_hist: int = T_HIST, t_fut: int = T_FUT, stride: int = 1,
                    frame_step: int | None = None, decimate: int = 1, target_ids=None,
                    world_map: OccupancyGrid | None = None, grid_size: int = GRID_SIZE,
                    grid_resolution: float = GRID_RESOLUTION, ego: bool = True,
                    align_heading: bool = False) -> list[SceneSample]:
    """Sliding windows of ``t_hist + t_fut`` consecutive frames per agent track.

    Windows never span a gap in a track.  Neighbors are the other agents
    present on every observed frame of the window; partially visible agents
    are dropped.
    """
    if stride < 1 or decimate < 1:
        raise ValueError("stride and decimate must be >= 1")
    if len(table) == 0:
        return []
    step = frame_step or infer_frame_step(table)
    step_d = step * decimate
    tracks = table.tracks()
    lookup = {(int(f), int(a)): i for i, (f, a) in enumerate(zip(table.frame, table.agent))}
    present: dict[int, set[int]] = {}
    for f, a in zip(table.frame.tolist(), table.agent.tolist()):
        present.setdefault(f, set()).add(a)
    wanted = None if target_ids is None else {int(t) for t in target_ids}
    span = t_hist + t_fut
    out: list[SceneSample] = []
    for aid, (frames, xy) in tracks.items():
        if wanted is not None and aid not in wanted:
            continue
        if decimate > 1:
            keep = (frames - frames[0]) % step_d == 0
            frames, xy = frames[keep], xy[keep]
        for run in split_tracks(frames, step_d):
            fr, pos = frames[run], xy[run]
            for start in range(0, len(fr) - span + 1, stride):
                obs_frames = fr[start:start + t_hist]
                history = pos[start:start + t_hist]
                future = pos[start + t_hist:start + span]
                common = set.intersection(*(present[int(f)] for f in obs_frames))
                common.discard(aid)
                neighbors = [table.xy[[lookup[(int(f), other)] for f in obs_frames]] for other in sorted(common)]
                center = history[-1]
                grid = crop_grid(world_map, center, grid_size, grid_resolution) if world_map is not None \
                    else default_grid(center, grid_size, grid_resolution)
                sample = SceneSample(history, neighbors, future, grid, frame_id=int(obs_frames[-1]),
                                     scene_id=f"{aid}@{int(obs_frames[-1])}")
                out.append(ego_transform(sample, align_heading) if ego else sample)
    return out


def _rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotate_grid(grid: OccupancyGrid, rot: np.ndarray) -> OccupancyGrid:
    """Nearest-cell resample of a grid after rotating the plane by ``rot`` about the world origin."""
    xs, ys = grid.cell_centers()
    px, py = np.meshgrid(xs, ys)
    pts = np.stack([px, py], -1) @ rot  # inverse rotation of the output cell centers
    ci = np.floor((pts[..., 0] - grid.origin[0]) / grid.resolution).astype(int)
    ri = np.floor((pts[..., 1] - grid.origin[1]) / grid.resolution).astype(int)
    H, W = grid.shape
    ok = (ri >= 0) & (ri < H) & (ci >= 0) & (ci < W)
    cells = np.zeros_like(grid.cells)
    cells[ok] = grid.cells[ri[ok], ci[ok]]
    return OccupancyGrid(cells, grid.resolution, grid.origin.copy())


def ego_transform(sample: SceneSample, align_heading: bool = False) -> SceneSample:
    """Translate so the target's last observed position is the origin.

    With ``align_heading`` the frame is also rotated so the last observed
    displacement points along +x; the angle is kept in ``meta["heading"]``.
    """
    if sample.ego:
        return sample
    anchor = sample.target[-1].copy()
    out = replace(
        sample,
        target=sample.target - anchor,
        neighbors=[n - anchor for n in sample.neighbors],
        future=sample.future - anchor,
        grid=sample.grid.translated(-anchor),
        world_anchor=sample.world_anchor + anchor,
        ego=True,
    )
    if not align_heading:
        return out
    d = out.target[-1] - out.target[-2]
    theta = float(np.arctan2(d[1], d[0])) if np.any(d != 0) else 0.0
    rot = _rotation(-theta)
    return replace(
        out,
        target=out.target @ rot.T,
        neighbors=[n @ rot.T for n in out.neighbors],
        future=out.future @ rot.T,
        grid=rotate_grid(out.grid, rot),
        meta={**out.meta, "heading": theta},
    )


def ego_inverse(sample: SceneSample, trajectories=None):
    """Restore world coordinates; with ``trajectories`` only those are mapped."""
    theta = sample.meta.get("heading") if sample.ego else None
    rot = _rotation(theta) if theta is not None else None
    unrot = (lambda x: np.asarray(x) @ rot.T) if rot is not None else np.asarray
    if trajectories is not None:
        return unrot(trajectories) + sample.world_anchor
    if not sample.ego:
        return sample
    a = sample.world_anchor
    grid = rotate_grid(sample.grid, rot) if rot is not None else sample.grid
    meta = {k: v for k, v in sample.meta.items() if k != "heading"}
    return replace(
        sample,
        target=unrot(sample.target) + a,
        neighbors=[unrot(n) + a for n in sample.neighbors],
        future=unrot(sample.future) + a,
        grid=grid.translated(a),
        world_anchor=np.zeros(2),
        ego=False,
        meta=meta,
    )


def truncate_history(sample: SceneSample, length: int | None = None, t_hist: int = T_HIST,
                     rng: np.random.Generator | None = None) -> SceneSample:
    """Keep the last ``length`` observed frames; draws uniformly from {2..T} if None."""
    if length is None:
        if rng is None:
            raise ValueError("either length or rng is required")
        length = int(rng.integers(2, min(t_hist, sample.obs_len) + 1))
    if not 2 <= length <= sample.obs_len:
        raise ValueError(f"history length {length} outside [2, {sample.obs_len}]")
    return replace(sample, target=sample.target[-length:], neighbors=[n[-length:] for n in sample.neighbors])


# --- occupancy grid raster files -------------------------------------------

def crop_grid(world: OccupancyGrid, center, size: int = GRID_SIZE,
              resolution: float = GRID_RESOLUTION) -> OccupancyGrid:
    """Nearest-cell resample of a world raster onto a square window; outside = free."""
    center = np.asarray(center, dtype=np.float64)
    origin = center - 0.5 * size * resolution
    xs = origin[0] + (np.arange(size) + 0.5) * resolution
    ys = origin[1] + (np.arange(size) + 0.5) * resolution
    ci = np.floor((xs - world.origin[0]) / world.resolution).astype(int)
    ri = np.floor((ys - world.origin[1]) / world.resolution).astype(int)
    H, W = world.shape
    cells = np.zeros((size, size), dtype=np.uint8)
    rv = (ri >= 0) & (ri < H)
    cv = (ci >= 0) & (ci < W)
    sub = world.cells[np.ix_(ri[rv], ci[cv])]
    cells[np.ix_(np.flatnonzero(rv), np.flatnonzero(cv))] = (sub > 0).astype(np.uint8)
    return OccupancyGrid(cells, resolution, origin)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".meta")


def save_grid(path, grid: OccupancyGrid) -> None:
    from PIL import Image

    path = Path(path)
    img = np.where(np.asarray(grid.cells) > 0, 255, 0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
    _sidecar(path).write_text(
        f"origin_x {float(grid.origin[0])!r}\norigin_y {float(grid.origin[1])!r}\n"
        f"resolution {float(grid.resolution)!r}\n")


def load_grid(path) -> OccupancyGrid:
    """8-bit raster (0 free, 255 occupied) plus ``.meta`` header with origin and resolution."""
    from PIL import Image

    path = Path(path)
    img = np.asarray(Image.open(path).convert("L"))
    meta = {}
    for lineno, line in enumerate(_sidecar(path).read_text().splitlines(), start=1):
        s = line.replace("=", " ").replace(":", " ").split()
        if not s:
            continue
        if len(s) != 2:
            raise DataFormatError(f"{_sidecar(path)}:{lineno}: expected 'key value'")
        meta[s[0]] = float(s[1])
    missing = {"origin_x", "origin_y", "resolution"} - meta.keys()
    if missing:
        raise DataFormatError(f"{_sidecar(path)}: missing {sorted(missing)}")
    return OccupancyGrid((img > 127).astype(np.uint8), meta["resolution"],
                         np.array([meta["origin_x"], meta["origin_y"]]))


# --- batching ---------------------------------------------------------------

@dataclass
class SceneBatch:
    target: torch.Tensor         # (B, T_obs, 2)
    neighbors: torch.Tensor      # (B, N, T_obs, 2)
    neighbor_mask: torch.Tensor  # (B, N)
    future: torch.Tensor         # (B, T_fut, 2)
    grid: torch.Tensor           # (B, 3, H, W)

    def __len__(self):
        return self.target.shape[0]

    @property
    def obs_len(self) -> int:
        return self.target.shape[1]

    def truncate(self, length: int) -> "SceneBatch":
        if not 2 <= length <= self.obs_len:
            raise ValueError(f"history length {length} outside [2, {self.obs_len}]")
        return replace(self, target=self.target[:, -length:], neighbors=self.neighbors[:, :, -length:])

    def index(self, idx) -> "SceneBatch":
        return SceneBatch(self.target[idx], self.neighbors[idx], self.neighbor_mask[idx],
                          self.future[idx], self.grid[idx])

    def to(self, dtype) -> "SceneBatch":
        return SceneBatch(self.target.to(dtype), self.neighbors.to(dtype), self.neighbor_mask,
                          self.future.to(dtype), self.grid.to(dtype))


def collate(samples: list[SceneSample], dtype=torch.float32) -> SceneBatch:
    if not samples:
        raise ValueError("cannot collate an empty sample list")
    T = samples[0].obs_len
    if any(s.obs_len != T for s in samples):
        raise ValueError("all samples in a batch must share the observation length")
    B = len(samples)
    N = max(len(s.neighbors) for s in samples)
    target = torch.as_tensor(np.stack([s.target for s in samples]), dtype=dtype)
    neighbors = torch.zeros(B, N, T, 2, dtype=dtype)
    mask = torch.zeros(B, N, dtype=torch.bool)
    for b, s in enumerate(samples):
        for j, n in enumerate(s.neighbors):
            neighbors[b, j] = torch.as_tensor(n, dtype=dtype)
            mask[b, j] = True
    future = torch.as_tensor(np.stack([s.future for s in samples]), dtype=dtype)
    H, W = samples[0].grid.shape
    coords = coord_channels(H, W, dtype)
    occ = torch.as_tensor(np.stack([s.grid.cells for s in samples]).astype(np.float32), dtype=dtype)
    grid = torch.cat([occ[:, None], coords.expand(B, 2, H, W)], dim=1)
    return SceneBatch(target, neighbors, mask, future, grid)
