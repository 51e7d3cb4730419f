import os
import struct

import numpy as np
import pytest

from dier import store
from dier.diffusion import make_linear_schedule
from dier.errors import FormatError, VersionError
from dier.nets import dit_forward, encoder_forward, init_dit, init_encoder, nano_configs
from dier.probe import EmbeddingTable
from dier.store import (MAGIC, checkpoint_bytes, export_embeddings, import_embeddings,
                        load_checkpoint, save_checkpoint)
from dier.tensor import Tensor, no_grad
from dier.training import OptimizerState, make_train_rng

SCHED = make_linear_schedule()
DC, EC = nano_configs(8, 1)


def trained_like(seed=0):
    """Models with non-trivial weights so a forward pass is not identically zero."""
    enc, dit = init_encoder(EC, seed), init_dit(DC, seed + 1)
    rng = np.random.default_rng(seed)
    for p in list(enc.params.values()) + list(dit.params.values()):
        p.data = (p.data + rng.standard_normal(p.data.shape) * 0.05).astype(np.float32)
    opt = OptimizerState(step=7)
    for k, p in dit.params.items():
        opt.m["dit/" + k] = np.full(p.data.shape, 0.25, np.float32)
        opt.v["dit/" + k] = np.full(p.data.shape, 0.5, np.float32)
    return enc, dit, opt


def forward(enc, dit):
    x = np.random.default_rng(9).uniform(-1, 1, (3, 1, 8, 8)).astype(np.float32)
    t = np.array([0, 400, 999])
    with no_grad():
        return dit_forward(dit, Tensor(x), t, encoder_forward(enc, Tensor(x), t)).data


def test_roundtrip_bit_exact(tmp_path):
    enc, dit, opt = trained_like()
    rng = make_train_rng(3)
    rng.standard_normal(11)
    path = save_checkpoint(tmp_path / "a.dier", enc, dit, opt, SCHED, rng, 42, config={"note": "x"})
    ck = load_checkpoint(path)
    assert ck.step == 42 and ck.config == {"note": "x"}
    assert forward(ck.encoder, ck.dit).tobytes() == forward(enc, dit).tobytes()
    assert ck.optimizer.step == 7
    assert ck.optimizer.m.keys() == opt.m.keys()
    assert all(np.all(m == 0.25) for m in ck.optimizer.m.values())
    assert all(np.all(v == 0.5) for v in ck.optimizer.v.values())
    np.testing.assert_array_equal(ck.schedule.alpha_bars, SCHED.alpha_bars)
    assert ck.rng.standard_normal(5).tobytes() == rng.standard_normal(5).tobytes()


def test_same_state_same_bytes():
    enc, dit, opt = trained_like()
    a = checkpoint_bytes(enc, dit, opt, SCHED, make_train_rng(0), 5)
    b = checkpoint_bytes(enc, dit, opt, SCHED, make_train_rng(0), 5)
    assert a == b
    assert a[:4] == MAGIC


def test_layout_header(tmp_path):
    enc, dit, _ = trained_like()
    raw = checkpoint_bytes(enc, dit, None, SCHED, None, 0)
    (version,) = struct.unpack("<I", raw[4:8])
    (clen,) = struct.unpack("<Q", raw[8:16])
    (count,) = struct.unpack("<I", raw[16 + clen:20 + clen])
    assert version == 1
    assert count == len(enc.params) + len(dit.params)
    # first tensor in sorted-name order follows directly
    (nlen,) = struct.unpack("<I", raw[20 + clen:24 + clen])
    assert raw[24 + clen:24 + clen + nlen].decode() == sorted(
        ["encoder/" + k for k in enc.params] + ["dit/" + k for k in dit.params])[0]


@pytest.mark.parametrize("cut", [3, 10, 200, -9, -1])
def test_truncated_file_rejected(tmp_path, cut):
    enc, dit, opt = trained_like()
    raw = checkpoint_bytes(enc, dit, opt, SCHED, make_train_rng(0), 1)
    p = tmp_path / "t.dier"
    p.write_bytes(raw[:cut])
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_trailing_bytes_rejected(tmp_path):
    enc, dit, _ = trained_like()
    p = tmp_path / "t.dier"
    p.write_bytes(checkpoint_bytes(enc, dit, None, SCHED, None, 1) + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(p)


def test_corrupt_tensor_length_names_tensor(tmp_path):
    enc, dit, _ = trained_like()
    raw = bytearray(checkpoint_bytes(enc, dit, None, SCHED, None, 1))
    (clen,) = struct.unpack("<Q", raw[8:16])
    pos = 20 + clen
    (nlen,) = struct.unpack("<I", raw[pos:pos + 4])
    name = raw[pos + 4:pos + 4 + nlen].decode()
    dims_at = pos + 4 + nlen + 4
    raw[dims_at:dims_at + 8] = struct.pack("<Q", 10 ** 9)
    p = tmp_path / "c.dier"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match=name.replace(".", r"\.")):
        load_checkpoint(p)


def test_version_mismatch(tmp_path):
    enc, dit, _ = trained_like()
    raw = bytearray(checkpoint_bytes(enc, dit, None, SCHED, None, 1))
    raw[4:8] = struct.pack("<I", 99)
    p = tmp_path / "v.dier"
    p.write_bytes(bytes(raw))
    with pytest.raises(VersionError, match="version 99"):
        load_checkpoint(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "m.dier"
    p.write_bytes(b"NOPE" + b"\0" * 40)
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(p)


def test_crash_before_rename_keeps_previous(tmp_path, monkeypatch):
    enc, dit, opt = trained_like()
    p = tmp_path / "keep.dier"
    save_checkpoint(p, enc, dit, opt, SCHED, make_train_rng(0), 1)
    before = p.read_bytes()

    def crash(src, dst):
        raise OSError("power cut")

    monkeypatch.setattr(store.os, "replace", crash)
    with pytest.raises(OSError):
        save_checkpoint(p, enc, dit, opt, SCHED, make_train_rng(0), 2)
    assert p.read_bytes() == before
    assert [f.name for f in tmp_path.iterdir()] == ["keep.dier"]


# -- embeddings ------------------------------------------------------------

def table(n=2, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingTable(rng.standard_normal((n, d)).astype(np.float32) * 1e3, np.arange(n) % 4, 100)


def test_csv_shape_and_header(tmp_path):
    p = export_embeddings(table(), tmp_path / "e.csv", "csv")
    lines = p.read_text().splitlines()
    assert len(lines) == 3
    assert lines[0] == "label,v0,v1,v2"


def test_csv_reimport_close(tmp_path):
    t = table(50, 7)
    vec, lab = import_embeddings(export_embeddings(t, tmp_path / "e.csv", "csv"))
    np.testing.assert_allclose(vec, t.vectors, rtol=1e-6)
    np.testing.assert_array_equal(lab, t.labels)


def test_bin_roundtrip_exact(tmp_path):
    t = table(20, 5)
    p = export_embeddings(t, tmp_path / "e.bin", "bin")
    assert os.path.getsize(p) == 8 + 4 * 20 + 4 * 100
    vec, lab = import_embeddings(p)
    assert vec.tobytes() == t.vectors.tobytes()
    np.testing.assert_array_equal(lab, t.labels)


def test_bin_size_mismatch(tmp_path):
    p = export_embeddings(table(4, 2), tmp_path / "e.bin", "bin")
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError):
        import_embeddings(p)


def test_export_failure_leaves_no_partial(tmp_path, monkeypatch):
    def full(src, dst):
        raise OSError("No space left on device")

    monkeypatch.setattr(store.os, "replace", full)
    with pytest.raises(OSError):
        export_embeddings(table(), tmp_path / "e.csv")
    assert list(tmp_path.iterdir()) == []
