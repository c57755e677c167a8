"""Dtypes and the immutable byte-backed tensor exchanged everywhere."""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass

import numpy as np

MAX_RANK = 4


class DType(enum.Enum):
    F64 = ("F64", 8, "<f8")
    F32 = ("F32", 4, "<f4")
    F16 = ("F16", 2, "<f2")
    U8 = ("U8", 1, "<u1")
    I32 = ("I32", 4, "<i4")
    BOOL = ("BOOL", 1, "|b1")

    def __init__(self, label: str, width: int, np_code: str):
        self.label = label
        self.width = width
        self.np_dtype = np.dtype(np_code)

    @property
    def is_float(self) -> bool:
        return self in (DType.F64, DType.F32, DType.F16)

    @classmethod
    def parse(cls, name: str) -> "DType":
        try:
            return cls[name]
        except KeyError:
            raise ValueError(f"unknown dtype {name!r}") from None

    @classmethod
    def from_numpy(cls, dt: np.dtype) -> "DType":
        dt = np.dtype(dt)
        for d in cls:
            if d.np_dtype.kind == dt.kind and d.np_dtype.itemsize == dt.itemsize:
                return d
        raise ValueError(f"no DType for numpy dtype {dt}")

    def __str__(self) -> str:
        return self.label


def numel(shape) -> int:
    return math.prod(shape)


@dataclass(frozen=True)
class Tensor:
    """Row-major little-endian payload plus its dtype and shape.

    ``data`` is ``bytes`` so a Tensor can be hashed, compared and shared
    between threads without copying.
    """

    dtype: DType
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        if len(shape) > MAX_RANK:
            raise ValueError(f"rank {len(shape)} exceeds {MAX_RANK}")
        if any(s < 0 for s in shape):
            raise ValueError(f"negative extent in {shape}")
        expected = numel(shape) * self.dtype.width
        if len(self.data) != expected:
            raise ValueError(
                f"payload is {len(self.data)} bytes, {self.dtype}{list(shape)} needs {expected}"
            )

    @classmethod
    def from_array(cls, arr, dtype: DType | None = None) -> "Tensor":
        arr = np.asarray(arr)
        if dtype is None:
            dtype = DType.from_numpy(arr.dtype)
        out = np.array(arr, dtype=dtype.np_dtype, order="C", copy=None)
        return cls(dtype, out.shape, out.tobytes())

    @classmethod
    def zeros(cls, dtype: DType, shape) -> "Tensor":
        return cls(dtype, tuple(shape), bytes(numel(shape) * dtype.width))

    def array(self) -> np.ndarray:
        """Read-only numpy view of the payload."""
        return np.frombuffer(self.data, dtype=self.dtype.np_dtype).reshape(self.shape)

    @property
    def nbytes(self) -> int:
        return len(self.data)

    @property
    def numel(self) -> int:
        return numel(self.shape)

    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()

    def signature(self) -> tuple[DType, tuple[int, ...]]:
        return self.dtype, self.shape

    def __repr__(self) -> str:
        return f"Tensor({self.dtype}{list(self.shape)}, sha256={self.sha256()[:12]})"
