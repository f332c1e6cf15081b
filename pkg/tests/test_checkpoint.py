import struct

import numpy as np
import pytest

from cloudadapt.checkpoint import MAGIC, encode, load_checkpoint, save_checkpoint
from cloudadapt.config import ExperimentConfig, TrainConfig
from cloudadapt.data import Dataset, generate
from cloudadapt.errors import CheckpointError
from cloudadapt.model import CloudAdapterNet
from cloudadapt.training import train
from conftest import small_model_config

CFG = TrainConfig(max_iters=6, warmup_iters=1, batch_size=2, val_interval=2, base_lr=1e-3)


def data(n, seed):
    return Dataset.from_samples(generate(n, 16, 16, seed=seed))


@pytest.fixture
def trained(tmp_path):
    m = CloudAdapterNet(small_model_config(), 7)
    train(m, data(6, 0), data(2, 1), CFG, out_dir=str(tmp_path))
    return m, tmp_path / "final.ckpt"


def test_round_trip_gives_identical_logits(trained):
    m, path = trained
    loaded, state, header = load_checkpoint(path)
    x = np.random.default_rng(3).random((2, 3, 16, 16)).astype(np.float32)
    assert np.array_equal(m.forward(x).data, loaded.forward(x).data)
    assert state.iteration == 6 and header["seed"] == 7
    assert header["backbone_sha256"] == m.backbone.checksum()
    assert not any(t["name"].split("/", 1)[1].startswith("backbone.") for t in header["tensors"])


def test_reencoding_is_byte_identical(trained):
    _, path = trained
    model, state, header = load_checkpoint(path)
    exp = ExperimentConfig.from_dict(header["experiment"]) if header["experiment"] else None
    assert encode(model, state, exp) == path.read_bytes()


@pytest.mark.parametrize("offset", [0, 20, -40, -1])
def test_single_byte_tamper_detected(trained, tmp_path, offset):
    _, path = trained
    raw = bytearray(path.read_bytes())
    raw[offset] ^= 0x01
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_truncation_and_version(trained, tmp_path):
    _, path = trained
    raw = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(raw[:10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)
    bad.write_bytes(MAGIC + struct.pack("<II", 9, 0) + bytes(40))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_resume_matches_uninterrupted(tmp_path):
    train_set, val_set = data(6, 0), data(2, 1)
    full = CloudAdapterNet(small_model_config(), 7)
    full_log, _ = train(full, train_set, val_set, CFG, out_dir=str(tmp_path / "full"))

    first = CloudAdapterNet(small_model_config(), 7)
    train(first, train_set, val_set, CFG, out_dir=str(tmp_path / "half"), stop_at=3)
    model, state, _ = load_checkpoint(tmp_path / "half" / "final.ckpt")
    log, _ = train(model, train_set, val_set, CFG, out_dir=str(tmp_path / "half"), resume=state)

    assert log.rows == full_log.rows
    assert (tmp_path / "half" / "final.ckpt").read_bytes() == (tmp_path / "full" / "final.ckpt").read_bytes()


def test_save_checkpoint_returns_path(trained, tmp_path):
    m, path = trained
    _, state, _ = load_checkpoint(path)
    out = tmp_path / "copy.ckpt"
    assert save_checkpoint(out, m, state) == out
    assert out.read_bytes()[:6] == MAGIC
