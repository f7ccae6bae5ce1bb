"""Named parameter collections and the checkpoint file format."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

CHECKPOINT_MAGIC = b"BSSLCKPT"
CHECKPOINT_VERSION = 1


class ParamSet(Mapping[str, np.ndarray]):
    """Ordered map of name -> float64 array with element-wise arithmetic.

    Iteration follows insertion order. Arithmetic between two sets requires
    identical names and shapes; scalars broadcast.
    """

    __slots__ = ("_data",)

    def __init__(self, data: Mapping[str, np.ndarray] | None = None):
        self._data: dict[str, np.ndarray] = {}
        for name, value in (data or {}).items():
            self._data[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value) -> None:
        self._data[name] = np.array(value, dtype=np.float64)

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v.shape}" for k, v in self._data.items())
        return f"ParamSet({inner})"

    def copy(self) -> "ParamSet":
        return ParamSet(self._data)

    def subset(self, prefix: str) -> "ParamSet":
        return ParamSet({k: v for k, v in self._data.items() if k.startswith(prefix)})

    def merged(self, other: Mapping[str, np.ndarray]) -> "ParamSet":
        out = self.copy()
        for k, v in other.items():
            out[k] = v
        return out

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self._data.values()))

    def flat(self) -> np.ndarray:
        if not self._data:
            return np.zeros(0)
        return np.concatenate([v.reshape(-1) for v in self._data.values()])

    def unflatten(self, vector: np.ndarray) -> "ParamSet":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.size:
            raise ValueError(f"expected {self.size} values, got {vector.size}")
        out, pos = {}, 0
        for k, v in self._data.items():
            out[k] = vector[pos:pos + v.size].reshape(v.shape)
            pos += v.size
        return ParamSet(out)

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self._data.values())))

    def dot(self, other: "ParamSet") -> float:
        self._check(other)
        return float(sum(float(np.sum(v * other[k])) for k, v in self._data.items()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self._data.values())

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, shapes and values."""
        if list(self) != list(other):
            return False
        return all(
            v.shape == other[k].shape and v.tobytes() == other[k].tobytes()
            for k, v in self._data.items()
        )

    def _check(self, other: Mapping[str, np.ndarray]) -> None:
        if list(self._data) != list(other):
            raise KeyError(f"parameter names differ: {list(self._data)} vs {list(other)}")
        for k, v in self._data.items():
            if v.shape != np.shape(other[k]):
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {np.shape(other[k])}")

    def _binary(self, other, fn) -> "ParamSet":
        if isinstance(other, Mapping):
            self._check(other)
            return ParamSet({k: fn(v, other[k]) for k, v in self._data.items()})
        return ParamSet({k: fn(v, other) for k, v in self._data.items()})

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, other):
        return self._binary(other, np.multiply)

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return ParamSet({k: -v for k, v in self._data.items()})


# -- checkpoint file ---------------------------------------------------------
#
# little-endian throughout
#   magic     8 bytes  b"BSSLCKPT"
#   version   u32
#   count     u32      number of tensors
#   per tensor:
#     name_len u16, name utf-8 bytes
#     ndim     u8, dims u32 * ndim
#     data     f64 * prod(dims), row-major

def save_params(params: ParamSet, path: str | Path) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> ParamSet:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return ParamSet(out)
