"""Binary checkpoints and embedding export.

Checkpoint layout (all integers little-endian)::

    b"DIER"                       magic
    u32   version                 (currently 1)
    u64   config length, bytes    UTF-8 JSON (model configs, schedule, optimiser, run config)
    u32   tensor count
    per tensor, sorted by name:
        u32 name length, name bytes (UTF-8)
        u32 ndim, u64 * ndim dims
        u8  dtype tag (0 = float32)
        f32 payload, product(dims) values
    u64   rng-state length, bytes UTF-8 JSON
    u64   step counter

Embedding ``bin`` layout: ``u32 N, u32 d, i32 labels[N], f32 vectors[N*d]``.
"""
from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, make_linear_schedule
from .errors import FormatError, VersionError
from .nets import DiTConfig, DiTModel, EncoderConfig, EncoderModel
from .tensor import Tensor
from .training import OptimizerState

MAGIC = b"DIER"
VERSION = 1
DTYPE_F32 = 0


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(o):
    if isinstance(o, np.ndarray):
        return {"__ndarray__": o.dtype.str, "values": o.tolist()}
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _json_hook(d):
    if "__ndarray__" in d:
        return np.array(d["values"], dtype=np.dtype(d["__ndarray__"]))
    return d


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, default=_json_default, separators=(",", ":")).encode()


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


@dataclass
class Checkpoint:
    encoder: EncoderModel
    dit: DiTModel
    optimizer: OptimizerState
    schedule: NoiseSchedule
    rng: np.random.Generator
    step: int
    config: dict = field(default_factory=dict)


def _encode_tensors(tensors: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(struct.pack("<B", DTYPE_F32))
        buf.write(arr.tobytes())
    return buf.getvalue()


def checkpoint_bytes(encoder: EncoderModel, dit: DiTModel, optimizer: OptimizerState | None,
                     sched: NoiseSchedule, rng: np.random.Generator | None, step: int,
                     config: dict | None = None) -> bytes:
    tensors = {f"encoder/{k}": p.data for k, p in encoder.params.items()}
    tensors.update({f"dit/{k}": p.data for k, p in dit.params.items()})
    opt_meta = None
    if optimizer is not None:
        for k, m in optimizer.m.items():
            tensors[f"opt.m/{k}"] = m
            tensors[f"opt.v/{k}"] = optimizer.v[k]
        opt_meta = {"step": optimizer.step, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                    "eps": optimizer.eps, "weight_decay": optimizer.weight_decay}
    meta = {
        "encoder": encoder.config.to_dict(),
        "dit": dit.config.to_dict(),
        "schedule": {"T": sched.T, "beta_start": sched.beta_start, "beta_end": sched.beta_end},
        "optimizer": opt_meta,
        "run": config or {},
    }
    blob = _dumps(meta)
    rng_blob = _dumps(rng_state(rng)) if rng is not None else b"{}"
    return b"".join([
        MAGIC, struct.pack("<I", VERSION),
        struct.pack("<Q", len(blob)), blob,
        _encode_tensors(tensors),
        struct.pack("<Q", len(rng_blob)), rng_blob,
        struct.pack("<Q", int(step)),
    ])


def save_checkpoint(path, encoder: EncoderModel, dit: DiTModel, optimizer: OptimizerState | None,
                    sched: NoiseSchedule, rng: np.random.Generator | None, step: int,
                    config: dict | None = None) -> Path:
    """Serialise everything needed to resume training; written atomically."""
    path = Path(path)
    _atomic_write(path, checkpoint_bytes(encoder, dit, optimizer, sched, rng, step, config))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated checkpoint: {what} needs {n} bytes at offset {self.pos}, "
                f"file has {len(self.data) - self.pos} left")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(
            f"{path}: checkpoint format version {version}, this build reads version {VERSION}; "
            "re-export it with a matching build")
    (clen,) = r.unpack("<Q", "config length")
    meta = json.loads(r.take(clen, "config"), object_hook=_json_hook)
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I", "tensor name length")
        name = r.take(nlen, "tensor name").decode()
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        (ndim,) = r.unpack("<I", f"ndim of {name}")
        dims = r.unpack(f"<{ndim}Q", f"dims of {name}") if ndim else ()
        (tag,) = r.unpack("<B", f"dtype of {name}")
        if tag != DTYPE_F32:
            raise FormatError(f"tensor {name!r}: unknown dtype tag {tag}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * 4
        try:
            raw = r.take(nbytes, f"payload of tensor {name!r}")
        except FormatError as err:
            raise FormatError(f"corrupt length for tensor {name!r}: {err}") from None
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    (rlen,) = r.unpack("<Q", "rng state length")
    rng_meta = json.loads(r.take(rlen, "rng state"), object_hook=_json_hook)
    (step,) = r.unpack("<Q", "step counter")
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes after step counter")

    enc_cfg = EncoderConfig(**meta["encoder"])
    dit_cfg = DiTConfig(**meta["dit"])
    enc = EncoderModel(params=_collect(tensors, "encoder/"), config=enc_cfg)
    dit = DiTModel(params=_collect(tensors, "dit/"), config=dit_cfg)
    opt = OptimizerState()
    if meta.get("optimizer"):
        om = meta["optimizer"]
        opt = OptimizerState(step=om["step"], beta1=om["beta1"], beta2=om["beta2"],
                             eps=om["eps"], weight_decay=om["weight_decay"])
        for name, arr in tensors.items():
            if name.startswith("opt.m/"):
                opt.m[name[6:]] = arr.copy()
            elif name.startswith("opt.v/"):
                opt.v[name[6:]] = arr.copy()
    s = meta["schedule"]
    sched = make_linear_schedule(s["T"], s["beta_start"], s["beta_end"])
    rng = rng_from_state(rng_meta) if rng_meta else np.random.default_rng()
    return Checkpoint(enc, dit, opt, sched, rng, int(step), meta.get("run", {}))


def _collect(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: Tensor(v.copy(), requires_grad=True)
            for k, v in tensors.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------


def export_embeddings(table, path, fmt: str = "csv") -> Path:
    """Write ``table.vectors`` / ``table.labels`` as CSV or the little-endian bin layout."""
    path = Path(path)
    vectors = np.asarray(table.vectors, dtype=np.float32)
    labels = np.asarray(table.labels)
    n, d = vectors.shape
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label"] + [f"v{i}" for i in range(d)])
        for lab, row in zip(labels, vectors):
            w.writerow([int(lab)] + [f"{float(x):.9g}" for x in row])
        payload = buf.getvalue().encode()
    elif fmt == "bin":
        payload = (struct.pack("<II", n, d) + labels.astype("<i4").tobytes()
                   + vectors.astype("<f4").tobytes())
    else:
        raise ValueError(f"unknown embedding format {fmt!r}")
    _atomic_write(path, payload)
    return path


def import_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an exported file back as ``(vectors f32[N, d], labels i64[N])``."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".csv" or raw[:5] == b"label":
        rows = list(csv.reader(io.StringIO(raw.decode())))
        body = rows[1:]
        labels = np.array([int(r[0]) for r in body], dtype=np.int64)
        vectors = np.array([[float(x) for x in r[1:]] for r in body], dtype=np.float32)
        return vectors.reshape(len(body), len(rows[0]) - 1), labels
    if len(raw) < 8:
        raise FormatError(f"{path}: too short for an embedding header")
    n, d = struct.unpack("<II", raw[:8])
    expect = 8 + 4 * n + 4 * n * d
    if len(raw) != expect:
        raise FormatError(f"{path}: expected {expect} bytes for N={n}, d={d}, got {len(raw)}")
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=8).astype(np.int64)
    vectors = np.frombuffer(raw, dtype="<f4", count=n * d, offset=8 + 4 * n).reshape(n, d)
    return vectors.astype(np.float32), labels
