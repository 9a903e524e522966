import struct

import numpy as np
import pytest

from telinet.checkpoint import (
    MAGIC,
    CheckpointVersionError,
    CorruptCheckpointError,
    SpecMismatchError,
    load_checkpoint,
    save_checkpoint,
)
from telinet.models import TeliNetConfig, build_telinet, telinet_spec
from telinet.optim import RMSprop, bce_loss

SMALL = TeliNetConfig(input_size=16, filters=(2, 3, 3, 3), dense_units=4)


@pytest.fixture
def trained():
    """A small model after one optimizer step, so BN stats and caches are non-trivial."""
    model = build_telinet(7, SMALL)
    opt = RMSprop(learning_rate=1e-2)
    rng = np.random.default_rng(0)
    x = rng.random((4, 1, 16, 16), dtype=np.float32)
    y = np.array([[1], [0], [1], [0]], np.float32)
    _, grad = bce_loss(model.forward(x, training=True), y)
    model.backward(grad)
    opt.step(model.parameters(), model.gradients())
    return model, opt, x


def test_roundtrip_is_bitwise(tmp_path, trained):
    model, opt, x = trained
    before = model.forward(x)
    path = save_checkpoint(model, tmp_path / "a.ckpt", opt, epoch=3)
    ck = load_checkpoint(path)
    assert ck.epoch == 3 and ck.seed == 7
    for k, v in model.parameters().items():
        assert ck.model.parameters()[k].tobytes() == v.tobytes()
    for k, v in model.states().items():
        assert ck.model.states()[k].tobytes() == v.tobytes()
    assert ck.optimizer.hyperparameters() == opt.hyperparameters()
    for k, v in opt.cache.items():
        assert ck.optimizer.cache[k].tobytes() == v.tobytes()
    assert ck.model.forward(x).tobytes() == before.tobytes()


def test_save_load_save_is_byte_identical(tmp_path, trained):
    model, opt, _ = trained
    a = save_checkpoint(model, tmp_path / "a.ckpt", opt, epoch=1)
    ck = load_checkpoint(a)
    b = save_checkpoint(ck.model, tmp_path / "b.ckpt", ck.optimizer, epoch=ck.epoch)
    assert a.read_bytes() == b.read_bytes()


def test_without_optimizer(tmp_path):
    model = build_telinet(0, SMALL)
    ck = load_checkpoint(save_checkpoint(model, tmp_path / "m.ckpt"))
    assert ck.optimizer is None and ck.epoch == 0


def test_file_starts_with_magic_and_version(tmp_path):
    data = save_checkpoint(build_telinet(0, SMALL), tmp_path / "m.ckpt").read_bytes()
    assert data.startswith(MAGIC)
    assert struct.unpack_from("<I", data, len(MAGIC))[0] == 1


@pytest.mark.parametrize("keep", [0, 5, 12, 100, -1])
def test_truncated_file_is_corrupt(tmp_path, keep):
    path = save_checkpoint(build_telinet(0, SMALL), tmp_path / "m.ckpt")
    data = path.read_bytes()
    path.write_bytes(data[:keep] if keep >= 0 else data[:-1])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_flipped_byte_is_corrupt(tmp_path):
    path = save_checkpoint(build_telinet(0, SMALL), tmp_path / "m.ckpt")
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptCheckpointError, match="checksum"):
        load_checkpoint(path)


def test_version_mismatch(tmp_path):
    path = save_checkpoint(build_telinet(0, SMALL), tmp_path / "m.ckpt")
    data = bytearray(path.read_bytes())
    data[len(MAGIC):len(MAGIC) + 4] = struct.pack("<I", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError, match="99"):
        load_checkpoint(path)


def test_spec_mismatch(tmp_path):
    path = save_checkpoint(build_telinet(0, SMALL), tmp_path / "m.ckpt")
    load_checkpoint(path, expected_spec=telinet_spec(SMALL))
    other = telinet_spec(TeliNetConfig(input_size=16, filters=(2, 3, 3, 4), dense_units=4))
    with pytest.raises(SpecMismatchError):
        load_checkpoint(path, expected_spec=other)


def test_error_types_are_distinct():
    assert len({CorruptCheckpointError, CheckpointVersionError, SpecMismatchError}) == 3
    assert not issubclass(CorruptCheckpointError, CheckpointVersionError)
    assert not issubclass(SpecMismatchError, CorruptCheckpointError)


def test_failed_save_leaves_no_partial_file(tmp_path, monkeypatch):
    import telinet.checkpoint as ckpt

    def boom(*args, **kwargs):
        raise RuntimeError("disk full")

    monkeypatch.setattr(ckpt, "to_bytes", boom)
    with pytest.raises(RuntimeError):
        save_checkpoint(build_telinet(0, SMALL), tmp_path / "m.ckpt")
    assert not (tmp_path / "m.ckpt").exists()
