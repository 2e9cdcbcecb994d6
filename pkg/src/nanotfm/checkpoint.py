"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"NTPF"  u32 format_version  u32 kind (0 = model, 1 = training)
    u32 n  + n bytes UTF-8 JSON ModelConfig
    params section
    [kind 1]  u32 n + JSON TrainConfig,  u64 step,  f64 gamma_sq_sum,
              params section (z),  params section (v)

    params section := u32 count, then per array:
        u32 name_len, name (UTF-8), u32 ndim, ndim x u32 dims, float32 values

The params section of a training checkpoint holds the averaged iterate
``x``; that is the set of weights used for inference. Arrays are stored as
float32, so float64 parameters lose precision on save.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"NTPF"
FORMAT_VERSION = 1
KIND_MODEL = 0
KIND_TRAINING = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    params: dict
    train_config: dict | None = None
    step: int = 0
    gamma_sq_sum: float = 0.0
    z: dict | None = None
    v: dict | None = None

    @property
    def is_training(self):
        return self.train_config is not None


def _write_json(buf, obj):
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _write_arrays(buf, arrays):
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def save(path, model_config, params, train_config=None, optimizer_state=None):
    """Write a checkpoint atomically (temp file + rename).

    ``params`` maps names to arrays. Passing ``train_config`` together with
    ``optimizer_state`` (see ``ScheduleFreeAdamW.state_dict``) writes a
    training checkpoint.
    """
    buf = io.BytesIO()
    kind = KIND_TRAINING if optimizer_state is not None else KIND_MODEL
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, kind))
    _write_json(buf, model_config)
    _write_arrays(buf, params)
    if kind == KIND_TRAINING:
        _write_json(buf, train_config or {})
        buf.write(struct.pack("<Qd", optimizer_state["t"], optimizer_state["gamma_sq_sum"]))
        _write_arrays(buf, optimizer_state["z"])
        _write_arrays(buf, optimizer_state["v"])
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json(self):
        (n,) = self.unpack("<I")
        try:
            return json.loads(self.take(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"{self.path}: corrupt config block ({exc})") from exc

    def arrays(self):
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<I")
            name = self.take(n).decode("utf-8")
            (ndim,) = self.unpack("<I")
            shape = self.unpack(f"<{ndim}I")
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        return out


def load(path):
    """Parse a checkpoint completely before returning anything."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic (not an NTPF checkpoint)")
    version, kind = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if kind not in (KIND_MODEL, KIND_TRAINING):
        raise CheckpointFormatError(f"{path}: unknown checkpoint kind {kind}")
    ckpt = Checkpoint(model_config=r.json(), params=r.arrays())
    if kind == KIND_TRAINING:
        ckpt.train_config = r.json()
        ckpt.step, ckpt.gamma_sq_sum = r.unpack("<Qd")
        ckpt.z = r.arrays()
        ckpt.v = r.arrays()
    if r.pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    return ckpt
