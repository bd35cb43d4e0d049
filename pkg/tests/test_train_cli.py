import json
import math

import numpy as np
import pytest
import torch
import yaml

import dualmix.train as T
from dualmix import checkpoint as ckpt
from dualmix.backbone import ModelConfig
from dualmix.cli import main
from dualmix.config import ConfigError, TrainConfig, dump_config, load_config
from dualmix.synth import OracleScenario, synth_generate, write_corpus


def tiny_model(**kw):
    base = dict(n_modes=2, latent_dim=8, diffusion_steps=2, d_temporal=8, d_spatial=8, cnn_width=4, hidden=16,
                tau_dim=8, residual_hidden=16, scale_dim=8)
    base.update(kw)
    return ModelConfig(**base)


def tiny_cfg(**kw):
    base = dict(epochs=2, batch_size=16, k=6, conf_mc=16, checkpoint_every=1, model=tiny_model())
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    return write_corpus(OracleScenario(), 40, d / "train", seed=1), write_corpus(OracleScenario(), 12, d / "val", seed=2)


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    cfg = tiny_cfg(train_data=str(corpus[0]), val_data=str(corpus[1]))
    return cfg, T.train(cfg, run), run


def test_epochs_zero_checkpoint_equals_init(tmp_path, corpus):
    cfg = tiny_cfg(epochs=0, train_data=str(corpus[0]))
    res = T.train(cfg, tmp_path)
    init = T.build_model(cfg.model, cfg.seed)
    ck = ckpt.load(res.checkpoint)
    assert ck.epoch == 0 and ck.step == 0
    for k, v in init.state_dict().items():
        np.testing.assert_array_equal(ck.tensors[k], v.numpy())
    assert res.manifest.epochs == []


def test_run_directory_contents(trained):
    cfg, res, run = trained
    names = {p.name for p in run.iterdir()}
    assert {"model.ckpt", "manifest.json", "epoch0001.ckpt", "epoch0002.ckpt"} <= names
    man = json.loads((run / "manifest.json").read_text())
    assert [e["epoch"] for e in man["epochs"]] == [1, 2]
    assert man["seed"] == cfg.seed and len(man["code_version"]) == 64
    assert {"min_ade", "min_fde", "m_star_mean"} <= man["final"].keys()
    assert man["epochs"][-1]["lr"] == pytest.approx(cfg.lr_min)


def test_config_echo(trained):
    cfg, res, run = trained
    man = json.loads((run / "manifest.json").read_text())
    assert TrainConfig.from_dict(man["config"]) == cfg
    assert man["config"] == cfg.to_dict()
    # every dataclass field appears explicitly, nested ones included
    assert set(man["config"]) == set(TrainConfig.__dataclass_fields__)
    assert set(man["config"]["model"]) == set(ModelConfig.__dataclass_fields__)


def test_determinism_bitwise(corpus, tmp_path):
    cfg = tiny_cfg(train_data=str(corpus[0]), checkpoint_every=0)
    a = T.train(cfg, tmp_path / "a")
    b = T.train(cfg, tmp_path / "b")
    strip = lambda m: [{k: v for k, v in e.items() if k != "seconds"} for e in m.epochs]
    assert strip(a.manifest) == strip(b.manifest)
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    c = T.train(cfg.replace(seed=1), tmp_path / "c")
    assert c.checkpoint.read_bytes() != a.checkpoint.read_bytes()


def test_nan_aborts_with_last_good_checkpoint(corpus, tmp_path, monkeypatch):
    cfg = tiny_cfg(train_data=str(corpus[0]), epochs=1)
    real = T._batch_loss
    calls = {"n": 0}
    snapshot = {}

    def flaky(model, *a, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            snapshot.update({k: v.clone() for k, v in model.state_dict().items()})
            nan = torch.tensor(math.nan, requires_grad=True)
            return nan, nan, 2.0
        return real(model, *a, **kw)

    monkeypatch.setattr(T, "_batch_loss", flaky)
    with pytest.raises(T.TrainingDiverged, match="epoch 1, batch 1"):
        T.train(cfg, tmp_path)
    ck = ckpt.load(tmp_path / "model.ckpt")
    assert ck.step == 1
    for k, v in snapshot.items():
        np.testing.assert_array_equal(ck.tensors[k], v.numpy())


def test_save_load_evaluate_identical(trained, corpus):
    cfg, res, run = trained
    samples, _ = T.load_dataset(corpus[1])
    live = T.evaluate(res.model, cfg, samples, seed=5)
    model, cfg2, _ = T.load_model(run / "model.ckpt")
    assert cfg2 == cfg
    assert T.evaluate(model, cfg2, samples, seed=5) == live


def test_evaluate_obs_len_and_repeat(trained, corpus):
    cfg, res, _ = trained
    samples, _ = T.load_dataset(corpus[1])
    m2 = T.evaluate(res.model, cfg, samples, K=20, obs_len=2)
    m8 = T.evaluate(res.model, cfg, samples, K=20, obs_len=8, repeat=3, per_scene=False)
    assert m2["obs_len"] == 2 and m8["obs_len"] == 8 and m2["k"] == 20
    assert len(m2["scenes"]) == len(samples) and "scenes" not in m8
    assert len(m8["runs"]) == 3
    assert m8["min_ade"] == pytest.approx(np.mean([r["min_ade"] for r in m8["runs"]]))
    assert all(math.isfinite(m[k]) for m in (m2, m8) for k in ("min_ade", "min_fde"))


def test_k_below_active_modes_cites_scene(trained, corpus):
    cfg, res, _ = trained
    samples, _ = T.load_dataset(corpus[1])
    with pytest.raises(ValueError, match=r"K=1 .* scene '\d+@\d+'"):
        T.evaluate(res.model, cfg.replace(pruning={"delta_0": 0.0, "delta_f": 0.0}), samples, K=1)


def test_export_hypotheses_world_frame(trained, corpus, tmp_path):
    cfg, res, _ = trained
    samples, _ = T.load_dataset(corpus[1])
    path = T.export_hypotheses(res.model, cfg, samples[:3], tmp_path / "h.jsonl", K=5, seed=2)
    recs = [json.loads(l) for l in path.read_text().splitlines()]
    assert [r["scene_id"] for r in recs] == [s.scene_id for s in samples[:3]]
    gen = torch.Generator().manual_seed(2)
    (_, _, _, hyps, _), = T.predict(res.model, cfg, samples[:3], 5, seed=2)
    for r, s, traj in zip(recs, samples, hyps.trajectories.double().numpy()):
        assert r["k"] == 5 and len(r["confidence"]) == 5 and len(r["source_mode"]) == 5
        np.testing.assert_allclose(np.asarray(r["trajectories"]), traj + s.world_anchor, atol=1e-5)


def test_memorize_single_scene():
    scen = OracleScenario(noise_std=[0.0] * 12, speed_range=(1.3, 1.3), n_bystanders=0)
    samples, _ = synth_generate(scen, 1, 0)
    # zero-noise scene walked 6 m over the horizon; "approximately zero" is read as under 0.1 m
    cfg = tiny_cfg(epochs=1000, batch_size=1, k=20, dynamic_horizon=False, checkpoint_every=0, lr=3e-3,
                   model=tiny_model(n_modes=1))
    res = T.train(cfg, None, samples)
    m = T.evaluate(res.model, cfg, samples, K=20, per_scene=False)
    assert m["min_ade"] < 0.1


def test_load_config_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"epochs": 3, "model": {"n_modes": 4, "backbone": "plain"}, "hypo": {"beta": 0.5}}))
    cfg = load_config(p, seed=9, epochs=None)
    assert cfg.epochs == 3 and cfg.seed == 9 and cfg.model.n_modes == 4 and cfg.hypo.beta == 0.5
    dump_config(cfg, tmp_path / "echo.yaml")
    assert load_config(tmp_path / "echo.yaml") == cfg
    p.write_text("epochz: 3\n")
    with pytest.raises(ConfigError, match="epochz"):
        load_config(p)


def test_data_root_env(corpus, monkeypatch):
    monkeypatch.setenv("DUALMIX_DATA_ROOT", str(corpus[0].parent))
    samples, oracle = T.load_dataset("train")
    assert len(samples) == 40 and oracle is not None


def test_ethucy_data_error_surfaces_line(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("0 1 0 0\n10 1 x 0\n")
    rc = main(["train", "--data", str(bad), "--out", str(tmp_path / "r")])
    assert rc == 2
    assert "bad.txt:2" in capsys.readouterr().err


def test_cli_pipeline(tmp_path, capsys):
    def run(*argv):
        assert main(list(map(str, argv))) == 0, capsys.readouterr().err
        return json.loads(capsys.readouterr().out)

    scen = tmp_path / "scen.json"
    scen.write_text(json.dumps({"n_bystanders": 0}))
    corp = run("synth", "--scenario", scen, "--n", 30, "--seed", 3, "--out", tmp_path / "c")
    assert corp["n_scenes"] == 30
    cfgp = tmp_path / "cfg.yaml"
    dump_config(tiny_cfg(epochs=1), cfgp)
    tr = run("train", "--config", cfgp, "--data", corp["corpus"], "--val", corp["corpus"], "--out", tmp_path / "run")
    assert {"checkpoint", "min_ade"} <= tr.keys()
    ev = run("evaluate", "--checkpoint", tr["checkpoint"], "--data", corp["corpus"], "--obs-len", 2,
             "--k", 8, "--export", "--out", tmp_path / "ev")
    assert ev["k"] == 8 and ev["obs_len"] == 2
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert len(metrics["scenes"]) == 30
    assert len((tmp_path / "ev" / "hypotheses.jsonl").read_text().splitlines()) == 30
    cal = run("calibrate", "--checkpoint", tr["checkpoint"], "--data", corp["corpus"], "--n-mc", 256,
              "--out", tmp_path / "cal")
    rows = (tmp_path / "cal" / "qq.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 12 * 19
    assert 0 <= cal["r_avg"] <= 100


def test_cli_calibrate_oracle(tmp_path, capsys):
    d = write_corpus(OracleScenario(), 2000, tmp_path / "c", seed=6)
    assert main(["calibrate", "--oracle", "--data", str(d), "--n-mc", "1024", "--out", str(tmp_path / "o")]) == 0
    good = json.loads(capsys.readouterr().out)
    assert main(["calibrate", "--oracle", "--cov-scale", "0.25", "--data", str(d), "--n-mc", "1024",
                 "--out", str(tmp_path / "s")]) == 0
    shrunk = json.loads(capsys.readouterr().out)
    assert good["r_avg"] >= 99.0
    assert shrunk["r_avg"] < 80.0


def test_cli_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit):
        main(["evaluate", "--data", "x", "--out", str(tmp_path), "--checkpoint", "c", "--obs-len", "9"])
    assert main(["evaluate", "--data", "x", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "nope")]) == 2
    assert "error" in capsys.readouterr().err
