import struct
import zlib

import numpy as np
import pytest

from pvigcaps.backbone import ModelConfig
from pvigcaps.checkpoint import (VERSION, Checkpoint, checkpoint_load, checkpoint_save, decode, encode,
                                 model_checkpoint, restore_model)
from pvigcaps.exceptions import (CheckpointChecksumError, CheckpointError, CheckpointMismatchError,
                                 CheckpointTruncatedError, CheckpointVersionError)
from pvigcaps.model import PViGNet
from pvigcaps.training import OptState


def test_round_trip_is_bitwise(tmp_path, rng):
    model = PViGNet(ModelConfig.micro(), seed=3)
    opt = OptState({"a": rng.normal(size=(2, 3))}, {"a": rng.random(size=(2, 3))}, 17)
    checkpoint_save(tmp_path / "m.ckpt", model_checkpoint(model, opt, 4, {"x": 1}, note="hi"))
    ckpt = checkpoint_load(tmp_path / "m.ckpt")
    restored = restore_model(ckpt)
    for (k, a), (k2, b) in zip(model.state_dict().items(), restored.state_dict().items()):
        assert k == k2 and a.tobytes() == b.tobytes()
    assert ckpt.opt_state.step == 17 and ckpt.epoch == 4 and ckpt.extra == {"note": "hi"}
    np.testing.assert_array_equal(ckpt.opt_state.m["a"], opt.m["a"])
    assert restored.config == model.config


def test_scalar_and_empty_tensors_survive():
    ckpt = Checkpoint({}, {"s": np.array(2.5), "e": np.zeros((0, 3))})
    back = decode(encode(ckpt))
    assert back.tensors["s"].shape == () and back.tensors["s"] == 2.5
    assert back.tensors["e"].shape == (0, 3)


@pytest.mark.parametrize("cut", [3, 10, 100, -5])
def test_truncation(cut):
    raw = encode(model_checkpoint(PViGNet(ModelConfig.micro())))
    with pytest.raises((CheckpointTruncatedError, CheckpointError)):
        decode(raw[:cut])


def test_newer_version_rejected():
    raw = bytearray(encode(Checkpoint({}, {})))
    raw[4:8] = struct.pack("<I", VERSION + 1)
    with pytest.raises(CheckpointVersionError):
        decode(bytes(raw))


def test_corruption_detected():
    raw = bytearray(encode(Checkpoint({}, {"w": np.arange(4.0)})))
    raw[-10] ^= 0xFF
    with pytest.raises(CheckpointChecksumError):
        decode(bytes(raw))
    good = encode(Checkpoint({}, {}))
    with pytest.raises(CheckpointChecksumError):
        decode(good + b"\0")


def test_bad_magic():
    with pytest.raises(CheckpointError):
        decode(b"NOPE" + b"\0" * 20)


def test_layout_header_and_crc():
    raw = encode(Checkpoint({}, {"w": np.ones(2)}))
    assert raw[:4] == b"PVGC" and struct.unpack("<I", raw[4:8])[0] == VERSION
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])


def test_mismatched_state_rejected():
    micro = model_checkpoint(PViGNet(ModelConfig.micro()))
    other = PViGNet(ModelConfig.micro(dims=(8, 16, 24, 40)))
    with pytest.raises(CheckpointMismatchError):
        other.load_state_dict(micro.tensors)
    with pytest.raises(CheckpointMismatchError):
        other.load_state_dict({k: v for k, v in list(other.state_dict().items())[1:]})


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "none.ckpt")
