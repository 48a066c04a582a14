import struct

import numpy as np
import pytest

from rocksr.checkpoint import (MAGIC, CheckpointFormatError, CheckpointVersionError, SpecMismatchError,
                               TruncatedCheckpointError, load_checkpoint, read_header, save_checkpoint)
from rocksr.models import FAMILIES, ModelSpec, build_model
from rocksr.optim import AdamState, adam_step
from rocksr.tensor import sequential


def trained_model(family, dtype=np.float64):
    m = build_model(ModelSpec(family, 1, base_filters=8), rng=np.random.default_rng(0), dtype=dtype)
    rng = np.random.default_rng(1)
    x = rng.random((2, 1, 6, 6)).astype(dtype)
    opt = AdamState()
    for _ in range(2):
        out = m.forward(x, training=True)
        m.zero_grad()
        m.backward(out - 0.5)
        adam_step(m.params, opt, 1e-3)
    return m, opt


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_bit_exact(tmp_path, family, dtype):
    m, opt = trained_model(family, dtype)
    probe = np.random.default_rng(5).random((1, 1, 7, 5))
    with sequential():
        before = m.forward(probe)
        save_checkpoint(m, tmp_path / "m.ckpt", optimizer=opt, extra={"note": "x"})
        ck = load_checkpoint(tmp_path / "m.ckpt", expected_spec=m.spec)
        after = ck.model.forward(probe)
    np.testing.assert_array_equal(before, after)
    assert ck.model.dtype == np.dtype(dtype)
    assert ck.extra == {"note": "x"}
    assert ck.optimizer.step == opt.step
    for k in opt.m:
        np.testing.assert_array_equal(ck.optimizer.m[k], opt.m[k])
        np.testing.assert_array_equal(ck.optimizer.v[k], opt.v[k])


def test_bn_state_survives(tmp_path):
    m, _ = trained_model("sr-resnet")
    save_checkpoint(m, tmp_path / "m.ckpt")
    ck = load_checkpoint(tmp_path / "m.ckpt")
    for name, st in m.bn_states.items():
        other = ck.model.bn_states[name]
        assert other.initialized
        np.testing.assert_array_equal(other.running_mean, st.running_mean)
        np.testing.assert_array_equal(other.running_var, st.running_var)
        np.testing.assert_array_equal(other.gamma, ck.model.params[f"{name}.gamma"].data)


def test_header_layout(tmp_path):
    m, _ = trained_model("edsr")
    path = save_checkpoint(m, tmp_path / "m.ckpt")
    raw = open(path, "rb").read()
    magic, version, hlen = struct.unpack("<8sIQ", raw[:20])
    assert magic == MAGIC and version == 1
    header, data = read_header(path)
    assert header["spec"]["family"] == "edsr"
    assert len(data) == sum(e["nbytes"] for e in header["arrays"])


def test_corrupt_magic(tmp_path):
    m, _ = trained_model("wdsr-b")
    path = save_checkpoint(m, tmp_path / "m.ckpt")
    raw = bytearray(open(path, "rb").read())
    raw[:4] = b"JUNK"
    open(path, "wb").write(raw)
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"hello")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(p)


def test_version_mismatch(tmp_path):
    m, _ = trained_model("wdsr-a")
    path = save_checkpoint(m, tmp_path / "m.ckpt")
    raw = bytearray(open(path, "rb").read())
    raw[8:12] = struct.pack("<I", 99)
    open(path, "wb").write(raw)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [10, 40, -7])
def test_truncated(tmp_path, cut):
    m, _ = trained_model("wdsr-b")
    path = save_checkpoint(m, tmp_path / "m.ckpt")
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:cut])
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(path)


def test_spec_mismatch(tmp_path):
    m = build_model(ModelSpec("edsr", 8))
    path = save_checkpoint(m, tmp_path / "edsr.ckpt")
    with pytest.raises(SpecMismatchError):
        load_checkpoint(path, expected_spec=ModelSpec("wdsr-b", 8))


def test_distinct_error_classes():
    classes = {CheckpointFormatError, CheckpointVersionError, TruncatedCheckpointError, SpecMismatchError}
    assert len(classes) == 4


def test_atomic_write_leaves_no_temp(tmp_path):
    m, _ = trained_model("edsr")
    save_checkpoint(m, tmp_path / "a.ckpt")
    save_checkpoint(m, tmp_path / "a.ckpt")
    assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]


def test_failed_write_keeps_previous(tmp_path, monkeypatch):
    m, _ = trained_model("edsr")
    path = save_checkpoint(m, tmp_path / "a.ckpt")
    good = open(path, "rb").read()

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr("os.fsync", boom)
    with pytest.raises(OSError):
        save_checkpoint(m, path)
    assert open(path, "rb").read() == good
    assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]
