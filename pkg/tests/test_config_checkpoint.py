import struct

import numpy as np
import pytest
import yaml

from scratchpad import config as C
from scratchpad.checkpoint import (
    MAGIC,
    CheckpointError,
    checkpoint_bytes,
    decode_arrays,
    encode_arrays,
    load_checkpoint,
    load_metadata,
    save_checkpoint,
)
from scratchpad.model import init_parameters
from scratchpad.rng import Rng

from oracles import tiny_config


def test_defaults_fill_in(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 1\noutput_dir: out\nmodel:\n  cell: lstm\n")
    cfg = C.load(path)
    assert cfg.model.cell == "lstm" and cfg.model.hidden == 64 and cfg.training.clip_norm == 2.0
    assert cfg.training.label_smoothing == 0.1 and cfg.training.lr_decay == 0.7


def test_missing_and_unknown_fields_are_named():
    with pytest.raises(C.ConfigError) as err:
        C.from_dict({"output_dir": "x", "model": {"hiden": 3}, "training": {"lr": "fast"}})
    text = str(err.value)
    assert "seed: missing required field" in text
    assert "model.hiden: unknown field" in text
    assert "training.lr" in text


def test_overrides_take_precedence(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 1\noutput_dir: out\ntraining:\n  epochs: 3\n")
    cfg = C.load(path, ["training.epochs=7", "model.score=mlp", "seed=9"])
    assert (cfg.training.epochs, cfg.model.score, cfg.seed) == (7, "mlp", 9)
    with pytest.raises(C.ConfigError):
        C.load(path, ["no-equals-sign"])


def test_tsv_paths_checked():
    with pytest.raises(C.ConfigError, match="task.train_path"):
        C.from_dict({"seed": 0, "output_dir": "x", "task": {"kind": "tsv", "train_path": "/nope",
                                                            "valid_path": "/nope", "test_path": "/nope"}})


def test_resolved_snapshot_round_trips(tmp_path):
    cfg = C.from_dict({"seed": 2, "output_dir": "o", "decode": {"beam": 2}})
    C.save(cfg, tmp_path / "s.yaml")
    again = C.load(tmp_path / "s.yaml")
    assert again == cfg
    assert yaml.safe_load((tmp_path / "s.yaml").read_text())["model"]["emb_dim"] == 32


def test_config_hash_tracks_model_fields():
    a, b = tiny_config(), tiny_config(hidden=5)
    assert C.config_hash(a) == C.config_hash(tiny_config())
    assert C.config_hash(a) != C.config_hash(b)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = init_parameters(tiny_config(coverage=True, scratchpad=False), 3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path, {"epoch": 4})
    raw = path.read_bytes()
    assert raw.startswith(MAGIC)
    back = load_checkpoint(path)
    assert back.config == params.config
    for n in params.names():
        assert np.array_equal(back[n].data, params[n].data) and back[n].shape == params[n].shape
    assert load_metadata(path) == {"epoch": 4}
    assert checkpoint_bytes(back, {"epoch": 4}) == raw


def test_checkpoint_rejects_corruption(tmp_path):
    params = init_parameters(tiny_config(), 0)
    raw = checkpoint_bytes(params)
    with pytest.raises(CheckpointError):
        decode_arrays(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointError):
        decode_arrays(raw[:-3])
    with pytest.raises(CheckpointError):
        decode_arrays(raw[:8] + struct.pack("<I", 99) + raw[12:])


def test_checkpoint_config_mismatch_is_reported(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_parameters(tiny_config(), 0), path)
    with pytest.raises(CheckpointError, match="shape_mismatch"):
        load_checkpoint(path, tiny_config(hidden=5))
    with pytest.raises(CheckpointError, match="unexpected"):
        load_checkpoint(path, tiny_config(scratchpad=False))


def test_encode_arrays_is_order_independent():
    a = {"x": np.arange(3.0), "y": np.ones((2, 2))}
    b = {"y": np.ones((2, 2)), "x": np.arange(3.0)}
    assert encode_arrays(a, {}) == encode_arrays(b, {})


def test_rng_streams():
    a = Rng(5, ("x",)).child("y", 2)
    assert np.array_equal(a.random(4), Rng(5, ("x", "y", 2)).random(4))
    assert not np.array_equal(Rng(5, ("x", "y", 3)).random(4), Rng(5, ("x", "y", 2)).random(4))
    assert not np.array_equal(Rng(6, ("x",)).random(4), Rng(5, ("x",)).random(4))
