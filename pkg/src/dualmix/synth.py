"""Synthetic multimodal corpora with a known generative density.

A target walks at constant speed along an approach corridor and, at its last
observed frame, commits to one of several branch polylines.  Future positions
are the branch point at the travelled arc length plus independent per-step
Gaussian noise, so the per-timestep conditional density is an exact mixture.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import AgentTable, SceneSample, crop_grid, ego_transform, extract_windows, load_grid, parse_ethucy, \
    save_grid, write_ethucy
from .encoders import OccupancyGrid
from .gm import EPS_VAR, StepMixture

FRAME_STEP = 10


def _fork_branches(angle_deg: float = 30.0, length: float = 20.0) -> list[list[list[float]]]:
    a = math.radians(angle_deg)
    return [[[0.0, 0.0], [length * math.cos(a), length * math.sin(a)]],
            [[0.0, 0.0], [length * math.cos(a), -length * math.sin(a)]]]


def _default_noise() -> list[float]:
    return [0.05 + 0.04 * t for t in range(1, 13)]


@dataclass
class OracleScenario:
    branches: list = field(default_factory=_fork_branches)       # polylines from the fork point
    branch_probs: list = field(default_factory=lambda: [0.5, 0.5])
    noise_std: list = field(default_factory=_default_noise)      # isotropic std per future step (m)
    noise_cov: list | None = None                                # optional (T, 2, 2), overrides noise_std
    speed_range: tuple = (1.0, 1.6)                              # m/s
    dt: float = 0.4
    t_hist: int = 8
    t_fut: int = 12
    fork_world: tuple = (25.0, 25.0)
    n_bystanders: int = 1
    corridor_width: float = 3.0
    map_size: float = 50.0
    map_resolution: float = 0.25
    grid_size: int = 64
    grid_resolution: float = 0.3125
    seed: int = 0

    def __post_init__(self):
        p = np.asarray(self.branch_probs, dtype=np.float64)
        if len(p) != len(self.branches) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("branch probabilities must be nonnegative, one per branch, summing to 1")
        cov = self.covariances()
        if cov.shape != (self.t_fut, 2, 2):
            raise ValueError(f"noise must describe {self.t_fut} future steps")
        if np.any(np.linalg.eigvalsh(cov) < 0):
            raise ValueError("noise covariance must be positive semi-definite")

    def covariances(self) -> np.ndarray:
        if self.noise_cov is not None:
            return np.asarray(self.noise_cov, dtype=np.float64)
        std = np.asarray(self.noise_std, dtype=np.float64)
        return std[:, None, None] ** 2 * np.eye(2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OracleScenario":
        d = dict(d)
        for k in ("speed_range", "fork_world"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def polyline_points(poly: np.ndarray, arc: np.ndarray) -> np.ndarray:
    """Points at arc lengths ``arc`` along ``poly``; extrapolates past the end."""
    poly = np.asarray(poly, dtype=np.float64)
    seg = np.diff(poly, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    arc = np.asarray(arc, dtype=np.float64)
    i = np.clip(np.searchsorted(cum, arc, side="right") - 1, 0, len(seg) - 1)
    u = (arc - cum[i]) / seg_len[i]
    return poly[i] + u[..., None] * seg[i]


class ForkOracle:
    """Exact per-timestep density of the generative process, per scene.

    The walking speed is recovered from the last observed displacement, so any
    (possibly truncated) ego-frame history identifies its conditional density.
    """

    def __init__(self, scenario: OracleScenario):
        self.scenario = scenario
        self.branches = [np.asarray(b, dtype=np.float64) for b in scenario.branches]
        self.probs = np.asarray(scenario.branch_probs, dtype=np.float64)
        # degenerate noise is floored so the density stays proper
        w, V = np.linalg.eigh(scenario.covariances())
        self.cov = np.einsum("tij,tj,tkj->tik", V, np.maximum(w, EPS_VAR), V)
        self.tril = np.linalg.cholesky(self.cov)

    def speeds(self, targets) -> np.ndarray:
        targets = np.asarray(targets, dtype=np.float64)
        return np.linalg.norm(targets[..., -1, :] - targets[..., -2, :], axis=-1) / self.scenario.dt

    def branch_means(self, speeds) -> np.ndarray:
        """(B, T, n_branches, 2) in the ego frame."""
        s = self.scenario
        arc = np.asarray(speeds)[:, None] * s.dt * np.arange(1, s.t_fut + 1)[None]
        return np.stack([polyline_points(b, arc) for b in self.branches], axis=2)

    def step_mixture(self, targets, cov_scale: float = 1.0, dtype=torch.float64) -> StepMixture:
        if isinstance(targets, torch.Tensor):
            targets = targets.detach().cpu().numpy()
        means = self.branch_means(self.speeds(targets))
        B, T, M, _ = means.shape
        tril = np.broadcast_to((math.sqrt(cov_scale) * self.tril)[None, :, None], (B, T, M, 2, 2))
        logits = np.broadcast_to(np.log(np.maximum(self.probs, 1e-300)), (B, T, M))
        return StepMixture(torch.as_tensor(means, dtype=dtype), torch.as_tensor(tril.copy(), dtype=dtype),
                           torch.as_tensor(logits.copy(), dtype=dtype))

    def sample_futures(self, targets, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` joint future trajectories per scene, shape (n, B, T, 2)."""
        if isinstance(targets, torch.Tensor):
            targets = targets.detach().cpu().numpy()
        means = self.branch_means(self.speeds(targets))  # (B, T, M, 2)
        B, T, M, _ = means.shape
        br = rng.choice(M, size=(n, B), p=self.probs)
        mu = np.take_along_axis(means[None].repeat(n, 0), br[:, :, None, None, None], axis=3)[..., 0, :]
        eps = rng.standard_normal((n, B, T, 2))
        return mu + np.einsum("tij,nbtj->nbti", self.tril, eps)


def build_world_map(s: OracleScenario) -> OccupancyGrid:
    """Occupied everywhere except the approach and branch corridors."""
    n = int(round(s.map_size / s.map_resolution))
    fork = np.asarray(s.fork_world, dtype=np.float64)
    origin = fork - 0.5 * s.map_size
    xs = origin[0] + (np.arange(n) + 0.5) * s.map_resolution
    ys = origin[1] + (np.arange(n) + 0.5) * s.map_resolution
    P = np.stack(np.meshgrid(xs, ys), axis=-1) - fork  # (H, W, 2) relative to the fork
    free = np.zeros((n, n), dtype=bool)
    half = 0.5 * s.corridor_width
    approach = [np.array([-s.map_size, 0.0]), np.zeros(2)]
    for poly in [np.stack(approach)] + [np.asarray(b) for b in s.branches]:
        for a, b in zip(poly[:-1], poly[1:]):
            d = b - a
            u = np.clip(((P - a) @ d) / (d @ d), 0.0, 1.0)
            dist = np.linalg.norm(P - (a + u[..., None] * d), axis=-1)
            free |= dist <= half
    return OccupancyGrid((~free).astype(np.uint8), s.map_resolution, origin)


def _episodes(s: OracleScenario, n: int, rng: np.random.Generator) -> list[dict]:
    """World-frame tracks covering the observation and future frames."""
    fork = np.asarray(s.fork_world, dtype=np.float64)
    w, V = np.linalg.eigh(s.covariances())
    noise_root = V * np.sqrt(np.maximum(w, 0.0))[:, None, :]
    hist_t = np.arange(-(s.t_hist - 1), 1)
    all_t = np.arange(-(s.t_hist - 1), s.t_fut + 1)
    branches = [np.asarray(b, dtype=np.float64) for b in s.branches]
    out = []
    for _ in range(n):
        speed = rng.uniform(*s.speed_range)
        branch = int(rng.choice(len(branches), p=s.branch_probs))
        hist = fork + np.stack([speed * s.dt * hist_t, np.zeros(s.t_hist)], axis=-1)
        arc = speed * s.dt * np.arange(1, s.t_fut + 1)
        eps = rng.standard_normal((s.t_fut, 2))
        fut = fork + polyline_points(branches[branch], arc) + np.einsum("tij,tj->ti", noise_root, eps)
        bystanders = []
        for _ in range(s.n_bystanders):
            r, th = rng.uniform(2.0, 8.0), rng.uniform(0.0, 2 * math.pi)
            v, phi = rng.uniform(0.0, 1.2), rng.uniform(0.0, 2 * math.pi)
            p0 = fork + r * np.array([math.cos(th), math.sin(th)])
            vel = v * np.array([math.cos(phi), math.sin(phi)])
            bystanders.append(p0 + s.dt * all_t[:, None] * vel)
        out.append(dict(target=np.concatenate([hist, fut]), bystanders=bystanders, branch=branch, speed=speed))
    return out


def _to_sample(s: OracleScenario, ep: dict, world_map: OccupancyGrid, idx: int) -> SceneSample:
    track = ep["target"]
    hist, fut = track[:s.t_hist], track[s.t_hist:]
    neighbors = [b[:s.t_hist] for b in ep["bystanders"]]
    grid = crop_grid(world_map, hist[-1], s.grid_size, s.grid_resolution)
    sample = SceneSample(hist, neighbors, fut, grid, scene_id=f"synth-{idx}",
                         meta={"branch": ep["branch"], "speed": ep["speed"]})
    return ego_transform(sample)


def synth_generate(scenario: OracleScenario, n_scenes: int, rng: np.random.Generator | int | None = None):
    """Returns (ego-frame samples, oracle) for ``n_scenes`` independent scenes."""
    if rng is None or isinstance(rng, int):
        rng = np.random.default_rng(scenario.seed if rng is None else rng)
    world_map = build_world_map(scenario)
    eps = _episodes(scenario, n_scenes, rng)
    samples = [_to_sample(scenario, ep, world_map, i) for i, ep in enumerate(eps)]
    return samples, ForkOracle(scenario)


def write_corpus(scenario: OracleScenario, n_scenes: int, out_dir, seed: int | None = None) -> Path:
    """ETH/UCY-format tracks, grid raster + header, and an oracle manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(scenario.seed if seed is None else seed)
    eps = _episodes(scenario, n_scenes, rng)
    span = scenario.t_hist + scenario.t_fut
    per_scene = 1 + scenario.n_bystanders
    frames, agents, xy, targets = [], [], [], []
    for i, ep in enumerate(eps):
        f0 = i * (span + 5) * FRAME_STEP
        fr = f0 + FRAME_STEP * np.arange(span)
        for j, track in enumerate([ep["target"]] + ep["bystanders"]):
            aid = i * per_scene + j + 1
            if j == 0:
                targets.append(aid)
            frames.append(fr)
            agents.append(np.full(span, aid))
            xy.append(track)
    table = AgentTable(np.concatenate(frames), np.concatenate(agents), np.concatenate(xy)) if eps else \
        AgentTable(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2)))
    order = np.lexsort((table.agent, table.frame))
    write_ethucy(out / "tracks.txt", AgentTable(table.frame[order], table.agent[order], table.xy[order]))
    save_grid(out / "map.png", build_world_map(scenario))
    manifest = {"format": "dualmix-synth/1", "scenario": scenario.to_dict(), "n_scenes": n_scenes,
                "seed": int(scenario.seed if seed is None else seed), "frame_step": FRAME_STEP,
                "target_ids": targets, "branches": [ep["branch"] for ep in eps]}
    (out / "oracle.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_corpus(corpus_dir) -> tuple[list[SceneSample], ForkOracle | None]:
    """Read a directory written by :func:`write_corpus` (or plain tracks + map)."""
    d = Path(corpus_dir)
    manifest = json.loads((d / "oracle.json").read_text()) if (d / "oracle.json").exists() else None
    scenario = OracleScenario.from_dict(manifest["scenario"]) if manifest else None
    table = parse_ethucy(d / "tracks.txt")
    world_map = load_grid(d / "map.png") if (d / "map.png").exists() else None
    kw = {}
    if scenario is not None:
        kw = dict(t_hist=scenario.t_hist, t_fut=scenario.t_fut, stride=scenario.t_hist + scenario.t_fut,
                  frame_step=manifest["frame_step"], target_ids=manifest["target_ids"],
                  grid_size=scenario.grid_size, grid_resolution=scenario.grid_resolution)
    samples = extract_windows(table, world_map=world_map, **kw)
    if manifest:
        order = {aid: i for i, aid in enumerate(manifest["target_ids"])}
        samples.sort(key=lambda smp: order[int(smp.scene_id.split("@")[0])])
    return samples, (ForkOracle(scenario) if scenario else None)
