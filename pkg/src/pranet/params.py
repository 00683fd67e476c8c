"""Named parameter storage and the ``PRAK`` checkpoint container.

Binary layout (all integers little-endian)::

    b"PRAK" | version:u32 | count:u32 |
    repeated: name_len:u32 | name:utf-8 | rank:u32 | extents:u32*rank | values:f64*prod(extents)

Entries whose name ends in ``.running_mean`` or ``.running_var`` are batch
norm buffers: stored like parameters but never handed to an optimizer.
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import Iterator

import numpy as np

from .tensor import Tensor

MAGIC = b"PRAK"
VERSION = 1
BUFFER_SUFFIXES = (".running_mean", ".running_var")


def is_buffer_name(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


class ParameterStore:
    """Ordered mapping from names to learnable tensors plus batch-norm buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor | np.ndarray:
        if name in self._params or name in self._buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        if trainable and not is_buffer_name(name):
            t = Tensor(arr, requires_grad=True, name=name)
            self._params[name] = t
            return t
        self._buffers[name] = arr
        return arr

    def __getitem__(self, name: str):
        if name in self._params:
            return self._params[name]
        return self._buffers[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params or name in self._buffers

    def __len__(self) -> int:
        return len(self._params) + len(self._buffers)

    @property
    def dtype(self):
        for t in self._params.values():
            return t.data.dtype
        return np.dtype(np.float64)

    def names(self) -> list[str]:
        return list(self._params) + list(self._buffers)

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def buffers(self) -> dict[str, np.ndarray]:
        return self._buffers

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype) -> "ParameterStore":
        """Copy with every array cast to ``dtype`` (float32 for benchmarking and fast training)."""
        out = ParameterStore()
        for name, t in self._params.items():
            out._params[name] = Tensor(t.data.astype(dtype), requires_grad=True, name=name)
        for name, b in self._buffers.items():
            out._buffers[name] = b.astype(dtype)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        d = {k: t.data.copy() for k, t in self._params.items()}
        d.update({k: v.copy() for k, v in self._buffers.items()})
        return d

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self.names()) - set(state)
            extra = set(state) - set(self.names())
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, value in state.items():
            if name in self._params:
                target = self._params[name].data
            elif name in self._buffers:
                target = self._buffers[name]
            else:
                continue
            if target.shape != np.shape(value):
                raise ValueError(f"{name}: shape {np.shape(value)} does not match {target.shape}")
            target[...] = value

    # ------------------------------------------------------------ PRAK I/O

    def to_bytes(self) -> bytes:
        chunks = [MAGIC, struct.pack("<II", VERSION, len(self))]
        for name, arr in self.state_dict().items():
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<I", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterStore":
        if len(blob) < 12 or blob[:4] != MAGIC:
            raise ValueError("not a PRAK container (bad magic)")
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise ValueError(f"unsupported PRAK version {version}")
        try:
            return cls._parse_entries(blob, count)
        except struct.error:
            raise ValueError("truncated PRAK container") from None

    @classmethod
    def _parse_entries(cls, blob: bytes, count: int) -> "ParameterStore":
        pos = 12
        store = cls()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if pos + 8 * size > len(blob):
                raise struct.error("value block runs past the end")
            values = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            store.add(name, values.astype(np.float64))
        if pos != len(blob):
            raise ValueError("trailing bytes after last PRAK entry")
        return store

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ParameterStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
