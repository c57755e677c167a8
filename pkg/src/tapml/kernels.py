"""Reference semantics for every operator kind.

Both interpreters share these formulas; they differ only in the
:class:`NumericPolicy` that picks the dtype each intermediate lives in.
All reductions run sequentially in ascending index order so that results
are reproducible bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import KernelError
from .graph import OpKind
from .tensor import DType

GELU_COEFF = 0.044715
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class NumericPolicy:
    """Where intermediates live.

    ``native=False`` (golden): every intermediate is ``accumulate`` (F64) and
    the result is rounded once to the node dtype on write.
    ``native=True`` (target): elementwise steps run in the node dtype and
    round after every operation; reductions accumulate in ``accumulate``.
    """

    name: str
    accumulate: DType
    native: bool
    round_outputs: bool = True

    def dtypes(self, out: DType) -> tuple[np.dtype, np.dtype]:
        """(elementwise dtype, accumulator dtype) for a node writing ``out``."""
        acc = self.accumulate.np_dtype
        if not self.native or not out.is_float:
            return acc, acc
        elem = out.np_dtype
        if elem.itemsize > acc.itemsize:
            acc = elem
        return elem, acc


GOLDEN = NumericPolicy("golden", DType.F64, native=False)
NATIVE = NumericPolicy("native", DType.F32, native=True)


def seqsum(x: np.ndarray, acc: np.dtype) -> np.ndarray:
    """Sum over the last axis, strictly left to right."""
    total = np.zeros(x.shape[:-1], dtype=acc)
    for k in range(x.shape[-1]):
        total = (total + x[..., k].astype(acc)).astype(acc)
    return total


def matmul(a: np.ndarray, b: np.ndarray, acc: np.dtype) -> np.ndarray:
    A = a.astype(acc)
    B = b.astype(acc)
    out = np.zeros((A.shape[0], B.shape[1]), dtype=acc)
    for k in range(A.shape[1]):
        out = (out + A[:, k : k + 1] * B[k : k + 1, :]).astype(acc)
    return out


def gelu_tanh(x: np.ndarray, elem: np.dtype, coeff: float = GELU_COEFF) -> np.ndarray:
    t = elem.type
    x = x.astype(elem)
    inner = t(SQRT_2_OVER_PI) * (x + t(coeff) * (x * x * x))
    return t(0.5) * x * (t(1.0) + np.tanh(inner))


def softmax(x: np.ndarray, elem: np.dtype, acc: np.dtype) -> np.ndarray:
    x = x.astype(elem)
    if x.size == 0:
        return x
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = seqsum(e, acc)
    return (e.astype(acc) / s[..., None]).astype(elem)


def rms_norm(x: np.ndarray, gamma: np.ndarray, eps: float, elem: np.dtype, acc: np.dtype) -> np.ndarray:
    xa = x.astype(acc)
    n = x.shape[-1]
    mean = seqsum(xa * xa, acc) / acc.type(n)
    denom = np.sqrt(mean + acc.type(eps))
    return (xa / denom[..., None]).astype(elem) * gamma.astype(elem)


def dequantize_u8(u: np.ndarray, scale: float, zero_point: int, elem: np.dtype) -> np.ndarray:
    t = elem.type
    return (u.astype(elem) - t(zero_point)) * t(scale)


def embedding(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise KernelError(f"Embedding id out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}")
    return table[ids]


KernelFn = Callable[[Sequence[np.ndarray], Mapping[str, Any], np.dtype, np.dtype], np.ndarray]


def _elementwise(op):
    def k(xs, attrs, elem, acc):
        return op(xs[0].astype(elem), xs[1].astype(elem))

    return k


KERNELS: dict[OpKind, KernelFn] = {
    OpKind.Constant: lambda xs, a, e, c: xs[0],
    OpKind.Add: _elementwise(np.add),
    OpKind.Sub: _elementwise(np.subtract),
    OpKind.Mul: _elementwise(np.multiply),
    OpKind.MatMul: lambda xs, a, e, c: matmul(xs[0], xs[1], c),
    OpKind.Relu: lambda xs, a, e, c: np.maximum(xs[0].astype(e), e.type(0)),
    OpKind.Silu: lambda xs, a, e, c: (lambda x: x * (e.type(1) / (e.type(1) + np.exp(-x))))(xs[0].astype(e)),
    OpKind.GeluTanh: lambda xs, a, e, c: gelu_tanh(xs[0], e),
    OpKind.Softmax: lambda xs, a, e, c: softmax(xs[0], e, c),
    OpKind.RmsNorm: lambda xs, a, e, c: rms_norm(xs[0], xs[1], a["eps"], e, c),
    OpKind.Embedding: lambda xs, a, e, c: embedding(xs[0], xs[1]),
    OpKind.Transpose2D: lambda xs, a, e, c: xs[0].T,
    OpKind.Reshape: lambda xs, a, e, c: xs[0].reshape(tuple(a["target_shape"])),
    OpKind.DequantizeU8: lambda xs, a, e, c: dequantize_u8(xs[0], a["scale"], a["zero_point"], e),
}


def evaluate(
    kind: OpKind,
    attrs: Mapping[str, Any],
    inputs: Sequence[np.ndarray],
    out_dtype: DType,
    policy: NumericPolicy,
    kernel: KernelFn | None = None,
) -> np.ndarray:
    """Run one kernel and round its result to ``out_dtype``."""
    elem, acc = policy.dtypes(out_dtype)
    fn = kernel or KERNELS[OpKind(kind)]
    with np.errstate(all="ignore"):
        out = np.asarray(fn(inputs, attrs, elem, acc))
        return np.array(out, dtype=out_dtype.np_dtype, order="C", copy=None)
