"""Single-file binary checkpoints.

Layout (all integers little-endian)::

    b"DFSQ" | version u32 | header length u32 | header JSON (UTF-8)
    then per tensor, in model order:
    name length u32 | name (UTF-8) | rank u32 | extents u64 * rank | raw floats

The header holds the model configuration echo, the training step, the data
RNG state, the float width of the payload, and the task settings.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .model import Model

MAGIC = b"DFSQ"
VERSION = 1
_FLOAT = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    rng_state: dict | None = None
    task: dict | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, step: int = 0, rng_state: dict | None = None,
                   task: dict | None = None, params: dict[str, np.ndarray] | None = None) -> "Checkpoint":
        return cls(model.config, params if params is not None else model.state_arrays(), step,
                   rng_state, task)

    def build_model(self) -> Model:
        model = Model(self.config)
        model.load_arrays(self.params)
        return model

    def header(self) -> dict:
        return {"config": self.config.to_dict(), "dtype": self.config.precision, "step": self.step,
                "rng_state": self.rng_state, "task": self.task, "extra": self.extra}

    def to_bytes(self) -> bytes:
        dtype = _FLOAT[self.config.precision]
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, len(head)))
        buf.write(head)
        for name, arr in self.params.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype=dtype)
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(arr.tobytes(order="C"))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        if bytes(view[:4]) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, head_len = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        head = json.loads(bytes(view[pos:pos + head_len]).decode("utf-8"))
        pos += head_len
        dtype = _FLOAT[head["dtype"]]
        params: dict[str, np.ndarray] = {}
        while pos < len(view):
            (n,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", view, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            nbytes = count * dtype.itemsize
            if pos + nbytes > len(view):
                raise CheckpointError(f"truncated tensor {name!r}")
            params[name] = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
            pos += nbytes
        return cls(ModelConfig.from_dict(head["config"]), params, head["step"], head.get("rng_state"),
                   head.get("task"), head.get("extra") or {})


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
