"""Training, evaluation and calibration runs."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .backbone import DualMixtureModel, ModelConfig, prob_loss
from .calibration import SCORE_LEVELS, CalibrationReport, emit_qq, min_ade_fde, reliability
from .config import TrainConfig, resolve_data_path
from .data import SceneBatch, SceneSample, T_FUT, T_HIST, collate, ego_inverse, extract_windows, parse_ethucy
from .gm import StepMixture
from .hypotheses import generate, hypo_loss
from .pruning import PruningSchedule, gate_weights
from .synth import ForkOracle, OracleScenario, load_corpus, write_corpus

log = logging.getLogger("dualmix")


class TrainingDiverged(RuntimeError):
    pass


def set_reference_mode() -> None:
    """Single-threaded deterministic path."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def code_hash() -> str:
    """sha256 over the package sources, in sorted path order."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def write_json_atomic(path, obj) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    os.replace(tmp, path)
    return path


@dataclass
class RunManifest:
    config: dict
    seed: int
    code_version: str
    epochs: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"config": self.config, "seed": self.seed, "code_version": self.code_version,
                "epochs": self.epochs, "final": self.final}

    def write(self, path) -> Path:
        return write_json_atomic(path, self.to_dict())


# --- data -------------------------------------------------------------------

def load_dataset(path, t_hist: int = T_HIST, t_fut: int = T_FUT,
                 max_scenes: int | None = None) -> tuple[list[SceneSample], ForkOracle | None]:
    """A synthetic corpus directory or an ETH/UCY text file (or a directory of them)."""
    p = resolve_data_path(path)
    if p.is_dir() and (p / "tracks.txt").exists():
        samples, oracle = load_corpus(p)
    else:
        files = sorted(p.glob("*.txt")) if p.is_dir() else [p]
        if not files:
            raise FileNotFoundError(f"no trajectory files under {p}")
        samples, oracle = [], None
        for f in files:
            for s in extract_windows(parse_ethucy(f), t_hist=t_hist, t_fut=t_fut):
                s.scene_id = f"{f.stem}:{s.scene_id}"
                samples.append(s)
    if not samples:
        raise ValueError(f"{p}: no complete {t_hist}+{t_fut} windows found")
    if max_scenes is not None:
        samples = samples[:max_scenes]
    return samples, oracle


# --- training ---------------------------------------------------------------

def build_model(cfg: ModelConfig, seed: int) -> DualMixtureModel:
    torch.manual_seed(seed)
    return DualMixtureModel(cfg)


def eval_schedule(cfg: TrainConfig) -> tuple[PruningSchedule, int]:
    """Pruning schedule and epoch index used at inference (the final one)."""
    sched = cfg.schedule()
    return sched, sched.total_epochs


def _batch_loss(model: DualMixtureModel, batch: SceneBatch, cfg: TrainConfig, sched: PruningSchedule,
                epoch: int, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor, float]:
    out = model(batch, gen)
    l_prob = prob_loss(out.step, out.anchor, batch.future, cfg.lambda_step, cfg.lambda_anchor)
    pruned = gate_weights(out.anchor.weights.detach(), sched, epoch)
    hyps = generate(out.step, out.anchor, pruned, out.context, cfg.k, model.residuals, gen,
                    detach_mixture=cfg.hypo_detach_mixture, with_confidence=False)
    step = out.step.detach() if cfg.hypo_detach_mixture else out.step
    l_hypo = hypo_loss(hyps, batch.future, step, cfg.hypo, epoch, cfg.epochs, gen, n_mc=cfg.conf_mc)
    return l_prob, l_hypo, float(pruned.active_count.float().mean())


@dataclass
class TrainResult:
    model: DualMixtureModel
    manifest: RunManifest
    checkpoint: Path | None


def _save(model, cfg, opt, epoch, step, path) -> Path:
    return ckpt.save(path, ckpt.from_model(model, cfg.to_dict(), opt, epoch, step))


def train(cfg: TrainConfig, run_dir=None, samples: list[SceneSample] | None = None,
          val_samples: list[SceneSample] | None = None) -> TrainResult:
    """Joint L_prob + L_hypo optimization; returns the trained model and manifest."""
    set_reference_mode()
    if samples is None:
        if cfg.train_data is None:
            raise ValueError("no training data given")
        samples, _ = load_dataset(cfg.train_data, t_fut=cfg.model.t_fut, max_scenes=cfg.max_scenes)
    if val_samples is None and cfg.val_data is not None:
        val_samples, _ = load_dataset(cfg.val_data, t_fut=cfg.model.t_fut)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    model = build_model(cfg.model, cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    data = collate(samples)
    n = len(data)
    n_batches = math.ceil(n / cfg.batch_size)
    total_steps = max(cfg.epochs * n_batches, 1)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps, eta_min=cfg.lr_min)
    sched = cfg.schedule()
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    manifest = RunManifest(cfg.to_dict(), cfg.seed, code_hash())
    ck_path = run_dir / "model.ckpt" if run_dir is not None else None
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        sums = np.zeros(3)
        for bi in range(n_batches):
            idx = torch.as_tensor(perm[bi * cfg.batch_size:(bi + 1) * cfg.batch_size])
            batch = data.index(idx)
            if cfg.dynamic_horizon:
                batch = batch.truncate(int(rng.integers(cfg.min_obs, data.obs_len + 1)))
            l_prob, l_hypo, m_star = _batch_loss(model, batch, cfg, sched, epoch, gen)
            loss = l_prob + l_hypo
            if not torch.isfinite(loss):
                # parameters are still those of the last successful step
                if ck_path is not None:
                    _save(model, cfg, opt, epoch - 1, step, ck_path)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            lr_sched.step()
            step += 1
            sums += (float(l_prob.detach()), float(l_hypo.detach()), m_star)
        rec = {"epoch": epoch, "l_prob": sums[0] / n_batches, "l_hypo": sums[1] / n_batches,
               "loss": (sums[0] + sums[1]) / n_batches, "m_star": sums[2] / n_batches,
               "lr": opt.param_groups[0]["lr"], "seconds": round(time.perf_counter() - t0, 3)}
        manifest.epochs.append(rec)
        log.info("epoch %d  loss %.4f  prob %.4f  hypo %.4f  M* %.2f", epoch, rec["loss"], rec["l_prob"],
                 rec["l_hypo"], rec["m_star"])
        if run_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            _save(model, cfg, opt, epoch, step, run_dir / f"epoch{epoch:04d}.ckpt")

    if ck_path is not None:
        _save(model, cfg, opt, cfg.epochs, step, ck_path)
    if val_samples:
        manifest.final = evaluate(model, cfg, val_samples, per_scene=False)
    if run_dir is not None:
        manifest.write(run_dir / "manifest.json")
    return TrainResult(model, manifest, ck_path)


def load_model(path) -> tuple[DualMixtureModel, TrainConfig, ckpt.Checkpoint]:
    ck = ckpt.load(path)
    cfg = TrainConfig.from_dict(ck.config)
    model = DualMixtureModel(cfg.model)
    ckpt.load_into(model, ck)
    model.eval()
    return model, cfg, ck


# --- evaluation -------------------------------------------------------------

def _batches(samples, obs_len, batch_size):
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = collate(chunk)
        if obs_len is not None and obs_len != batch.obs_len:
            batch = batch.truncate(obs_len)
        yield chunk, batch


@torch.no_grad()
def predict(model: DualMixtureModel, cfg: TrainConfig, samples, K: int | None = None, obs_len: int | None = None,
            seed: int = 0, batch_size: int = 256, with_confidence: bool = True):
    """Yields (chunk, batch, forward output, hypotheses) per batch."""
    set_reference_mode()
    model.eval()
    K = cfg.k if K is None else K
    sched, e = eval_schedule(cfg)
    gen = torch.Generator().manual_seed(seed)
    for chunk, batch in _batches(samples, obs_len, batch_size):
        out = model(batch, gen)
        pruned = gate_weights(out.anchor.weights, sched, e)
        bad = torch.nonzero(pruned.active_count > K).flatten()
        if len(bad):
            s = chunk[int(bad[0])]
            raise ValueError(f"K={K} is smaller than the {int(pruned.active_count[bad[0]])} active modes "
                             f"of scene {s.scene_id!r}")
        hyps = generate(out.step, out.anchor, pruned, out.context, K, model.residuals, gen,
                        with_confidence=with_confidence)
        yield chunk, batch, out, hyps, pruned


def evaluate(model: DualMixtureModel, cfg: TrainConfig, samples, K: int | None = None,
             obs_len: int | None = None, seed: int = 0, repeat: int = 1, per_scene: bool = True) -> dict:
    """min_ADE / min_FDE over K hypotheses; ``repeat`` averages independent sampling passes."""
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    K = cfg.k if K is None else K
    runs, records = [], []
    for r in range(repeat):
        ade, fde, mstar = [], [], []
        for chunk, batch, out, hyps, pruned in predict(model, cfg, samples, K, obs_len, seed + r,
                                                        with_confidence=per_scene and r == 0):
            res = min_ade_fde(hyps.trajectories, batch.future)
            ade.append(res.min_ade)
            fde.append(res.min_fde)
            mstar.append(pruned.active_count)
            if per_scene and r == 0:
                for i, s in enumerate(chunk):
                    records.append({"scene_id": s.scene_id, "min_ade": float(res.min_ade[i]),
                                    "min_fde": float(res.min_fde[i]), "m_star": int(pruned.active_count[i]),
                                    "max_confidence": float(hyps.confidences[i].max())})
        ade, fde, mstar = torch.cat(ade), torch.cat(fde), torch.cat(mstar)
        runs.append({"min_ade": float(ade.mean()), "min_fde": float(fde.mean()),
                     "m_star_mean": float(mstar.float().mean()), "m_star_median": float(mstar.float().median())})
    out = {k: float(np.mean([r[k] for r in runs])) for k in runs[0]}
    out.update({"k": K, "obs_len": obs_len or samples[0].obs_len, "n_scenes": len(samples), "repeat": repeat})
    if repeat > 1:
        out["runs"] = runs
        out["min_ade_std"] = float(np.std([r["min_ade"] for r in runs]))
        out["min_fde_std"] = float(np.std([r["min_fde"] for r in runs]))
    if per_scene:
        out["scenes"] = records
    return out


def export_hypotheses(model: DualMixtureModel, cfg: TrainConfig, samples, path, K: int | None = None,
                      obs_len: int | None = None, seed: int = 0) -> Path:
    """JSON lines, one record per scene, trajectories in world-frame meters."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w") as fh:
        for chunk, _, _, hyps, _ in predict(model, cfg, samples, K, obs_len, seed):
            traj = hyps.trajectories.double().numpy()
            for i, s in enumerate(chunk):
                rec = {"scene_id": s.scene_id, "k": hyps.k,
                       "trajectories": np.round(ego_inverse(s, traj[i]), 6).tolist(),
                       "confidence": [float(c) for c in hyps.confidences[i]],
                       "source_mode": [int(m) for m in hyps.source_mode[i]]}
                fh.write(json.dumps(rec) + "\n")
    os.replace(tmp, path)
    return path


@torch.no_grad()
def step_mixtures(model: DualMixtureModel, cfg: TrainConfig, samples, obs_len: int | None = None,
                  seed: int = 0, batch_size: int = 256) -> StepMixture:
    """Concatenated per-timestep mixtures for all scenes."""
    set_reference_mode()
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    parts = []
    for _, batch in _batches(samples, obs_len, batch_size):
        parts.append(model(batch, gen).step)
    return StepMixture(torch.cat([p.means for p in parts]), torch.cat([p.scale_tril for p in parts]),
                       torch.cat([p.logits for p in parts]))


def oracle_forecasts(oracle: ForkOracle, samples, obs_len: int | None = None, cov_scale: float = 1.0,
                     dtype=torch.float32) -> StepMixture:
    targets = np.stack([s.target if obs_len is None else s.target[-obs_len:] for s in samples])
    return oracle.step_mixture(targets, cov_scale=cov_scale, dtype=dtype)


def oracle_min_ade(oracle: ForkOracle, samples, K: int = 20, seed: int = 0) -> float:
    """Best-of-K ADE of K iid joint draws from the generative process."""
    targets = np.stack([s.target for s in samples])
    gts = np.stack([s.future for s in samples])
    draws = oracle.sample_futures(targets, K, np.random.default_rng(seed))  # (K, B, T, 2)
    res = min_ade_fde(torch.as_tensor(draws.transpose(1, 0, 2, 3)), torch.as_tensor(gts))
    return res.mean()[0]


def calibrate(forecasts: StepMixture, samples, levels=SCORE_LEVELS, n_mc: int = 4096, seed: int = 0,
              out_dir=None, obs_len: int | None = None) -> CalibrationReport:
    gts = np.stack([s.future for s in samples])
    report = reliability(forecasts, torch.as_tensor(gts, dtype=forecasts.means.dtype), levels, n_mc, seed)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        d = report.to_dict()
        d["obs_len"] = obs_len or samples[0].obs_len
        write_json_atomic(out_dir / "calibration.json", d)
        emit_qq(report, out_dir / "qq.csv")
    return report


def synth(scenario: OracleScenario, n: int, out_dir, seed: int | None = None) -> Path:
    return write_corpus(scenario, n, out_dir, seed)
