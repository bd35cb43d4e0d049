import struct

import numpy as np
import pytest
import torch

from dualmix import checkpoint as ckpt
from dualmix.backbone import ModelConfig
from dualmix.train import build_model


def _tiny():
    return ModelConfig(t_fut=3, n_modes=2, latent_dim=8, diffusion_steps=2, d_temporal=8, d_spatial=8, cnn_width=4,
                       hidden=16, tau_dim=8, residual_hidden=16, scale_dim=8)


def test_bytes_round_trip():
    rng = np.random.default_rng(0)
    ck = ckpt.Checkpoint({"a": rng.standard_normal((3, 4)).astype(np.float32), "b": np.zeros((0, 3), np.float32),
                          "s": np.asarray(2.5, np.float32)},
                         {"k": [1, 2], "x": "y"}, epoch=7, step=123456789012,
                         moments={"exp_avg/a": np.ones((3, 4), np.float32)})
    back = ckpt.decode(ckpt.encode(ck))
    assert back.config == ck.config and back.epoch == 7 and back.step == 123456789012
    for k in ck.tensors:
        assert back.tensors[k].shape == np.shape(ck.tensors[k])
        np.testing.assert_array_equal(back.tensors[k], ck.tensors[k])
    np.testing.assert_array_equal(back.moments["exp_avg/a"], 1.0)
    assert ckpt.encode(back) == ckpt.encode(ck)


def test_header_layout():
    data = ckpt.encode(ckpt.Checkpoint({"w": np.arange(2, dtype=np.float32)}))
    assert data[:8] == b"DMXCKPT\0"
    assert struct.unpack("<I", data[8:12]) == (1,)


def test_model_round_trip_bit_exact(tmp_path):
    model = build_model(_tiny(), seed=3)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    loss = sum((p ** 2).sum() for p in model.parameters())
    loss.backward()
    opt.step()
    path = ckpt.save(tmp_path / "m.ckpt", ckpt.from_model(model, {"n": 1}, opt, epoch=1, step=1))
    other = build_model(_tiny(), seed=4)
    opt2 = torch.optim.AdamW(other.parameters(), lr=1e-3)
    ckpt.load_into(other, ckpt.load(path), opt2)
    for (k, a), b in zip(model.state_dict().items(), other.state_dict().values()):
        assert torch.equal(a, b), k
    for p, q in zip(model.parameters(), other.parameters()):
        assert torch.equal(opt.state[p]["exp_avg_sq"], opt2.state[q]["exp_avg_sq"])
    assert ckpt.encode(ckpt.from_model(other, {"n": 1}, opt2, 1, 1)) == path.read_bytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOTACKPT" + b"\0" * 32)
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.load(p)


def test_bad_version():
    data = bytearray(ckpt.encode(ckpt.Checkpoint({})))
    data[8:12] = struct.pack("<I", 99)
    with pytest.raises(ckpt.CheckpointError, match="version 99"):
        ckpt.decode(bytes(data))


@pytest.mark.parametrize("cut", [4, 13, 40, -5, -1])
def test_truncation_detected(cut):
    data = ckpt.encode(ckpt.Checkpoint({"w": np.ones((4, 4), np.float32)}, {"a": 1}, 2, 3))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode(data[:cut])


def test_trailing_bytes_rejected():
    with pytest.raises(ckpt.CheckpointError, match="trailing"):
        ckpt.decode(ckpt.encode(ckpt.Checkpoint({})) + b"\0")


def test_missing_tensors_rejected():
    model = build_model(_tiny(), seed=0)
    with pytest.raises(ckpt.CheckpointError, match="lacks"):
        ckpt.load_into(model, ckpt.Checkpoint({}))


def test_atomic_save_leaves_no_temp(tmp_path):
    ckpt.save(tmp_path / "a.ckpt", ckpt.Checkpoint({}))
    assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]
