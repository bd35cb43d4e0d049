"""Command-line entry point: ``dualmix {train,evaluate,calibrate,synth}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .calibration import SCORE_LEVELS
from .config import ConfigError, dump_config, load_config
from .data import DataFormatError
from .synth import OracleScenario, load_corpus
from . import train as T


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualmix", description="Dual Gaussian-mixture trajectory forecaster")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, required=True, help="run directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--data", help="training corpus (overrides train_data)")
    sp.add_argument("--val", help="validation corpus (overrides val_data)")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--k", type=int)

    sp = sub.add_parser("evaluate", help="min-ADE/FDE of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--k", type=int, default=20)
    sp.add_argument("--obs-len", type=int, choices=range(2, 9), metavar="{2..8}")
    sp.add_argument("--repeat", type=int, default=1, help="average over independent sampling passes")
    sp.add_argument("--export", action="store_true", help="also write hypotheses.jsonl (world frame)")

    sp = sub.add_parser("calibrate", help="reliability report and Q-Q table")
    common(sp)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--oracle", action="store_true", help="score the corpus' own generative mixture")
    sp.add_argument("--cov-scale", type=float, default=1.0, help="oracle covariance multiplier")
    sp.add_argument("--data", required=True)
    sp.add_argument("--obs-len", type=int, choices=range(2, 9), metavar="{2..8}")
    sp.add_argument("--levels", type=float, nargs="+", default=list(SCORE_LEVELS))
    sp.add_argument("--n-mc", type=int, default=4096)

    sp = sub.add_parser("synth", help="write a synthetic fork corpus")
    sp.add_argument("--scenario", type=Path, help="JSON scenario overrides")
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _train(a) -> dict:
    cfg = load_config(a.config, seed=a.seed, train_data=a.data, val_data=a.val, epochs=a.epochs, k=a.k)
    a.out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, a.out / "config.yaml")
    res = T.train(cfg, a.out)
    return {"checkpoint": str(res.checkpoint), "manifest": str(a.out / "manifest.json"), **res.manifest.final}


def _evaluate(a) -> dict:
    model, cfg, _ = T.load_model(a.checkpoint)
    samples, _ = T.load_dataset(a.data, t_fut=cfg.model.t_fut)
    seed = cfg.seed if a.seed is None else a.seed
    metrics = T.evaluate(model, cfg, samples, a.k, a.obs_len, seed, a.repeat)
    metrics["checkpoint"] = str(a.checkpoint)
    a.out.mkdir(parents=True, exist_ok=True)
    T.write_json_atomic(a.out / "metrics.json", metrics)
    if a.export:
        T.export_hypotheses(model, cfg, samples, a.out / "hypotheses.jsonl", a.k, a.obs_len, seed)
        metrics["hypotheses"] = str(a.out / "hypotheses.jsonl")
    return {k: v for k, v in metrics.items() if k not in ("scenes", "runs")}


def _calibrate(a) -> dict:
    seed = 0 if a.seed is None else a.seed
    if a.oracle:
        samples, oracle = T.load_dataset(a.data)
        if oracle is None:
            raise ValueError(f"{a.data} has no oracle manifest")
        forecasts = T.oracle_forecasts(oracle, samples, a.obs_len, a.cov_scale)
    else:
        model, cfg, _ = T.load_model(a.checkpoint)
        samples, _ = T.load_dataset(a.data, t_fut=cfg.model.t_fut)
        forecasts = T.step_mixtures(model, cfg, samples, a.obs_len, seed)
    report = T.calibrate(forecasts, samples, a.levels, a.n_mc, seed, a.out, a.obs_len)
    return {"r_avg": report.r_avg, "r_min": report.r_min, "n_scenes": report.n_scenes,
            "report": str(a.out / "calibration.json"), "qq": str(a.out / "qq.csv")}


def _synth(a) -> dict:
    overrides = json.loads(a.scenario.read_text()) if a.scenario else {}
    if a.seed is not None:
        overrides["seed"] = a.seed
    scenario = OracleScenario.from_dict(overrides)
    out = T.synth(scenario, a.n, a.out)
    return {"corpus": str(out), "n_scenes": a.n, "seed": scenario.seed}


COMMANDS = {"train": _train, "evaluate": _evaluate, "calibrate": _calibrate, "synth": _synth}


def main(argv=None) -> int:
    a = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    try:
        summary = COMMANDS[a.cmd](a)
    except (ConfigError, DataFormatError, FileNotFoundError, ValueError, T.TrainingDiverged) as exc:
        print(f"dualmix {a.cmd}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
