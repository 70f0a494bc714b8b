"""Minimal dense tensor kernel.

Exactly the local array operations the IR needs: elementwise arithmetic
(with rank-0 broadcast only), the two batched contractions, and the
leading-axis shape ops. Reductions use a fixed pairwise (balanced tree)
accumulation order so that results are bit-reproducible and so that the
runtime can split the tree across workers without changing the answer.

numpy supplies storage and elementwise loops; everything order-sensitive
is written out here.
"""

from __future__ import annotations

import numbers
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

F64 = np.dtype(np.float64)
F32 = np.dtype(np.float32)
DEFAULT_DTYPE = F64

_DTYPE_NAMES = {F64: "f64", F32: "f32"}
_NAMES_DTYPE = {"f64": F64, "f32": F32}


def dtype_name(dt: np.dtype) -> str:
    return _DTYPE_NAMES[np.dtype(dt)]


def dtype_from_name(name: str) -> np.dtype:
    try:
        return _NAMES_DTYPE[name]
    except KeyError:
        raise ShapeError(f"unknown dtype name {name!r}; expected f64 or f32") from None


def _check_dtype(dt: np.dtype) -> np.dtype:
    dt = np.dtype(dt)
    if dt not in _DTYPE_NAMES:
        raise ShapeError(f"unsupported dtype {dt}; only f64 and f32")
    return dt


class Tensor:
    """Immutable row-major array of f64 (default) or f32. Rank 0 permitted."""

    __slots__ = ("_data",)

    def __init__(self, data: np.ndarray):
        if not isinstance(data, np.ndarray):
            raise TypeError("Tensor wraps an ndarray; use tensor() to coerce")
        _check_dtype(data.dtype)
        # np.ascontiguousarray would promote rank-0 to rank-1; avoid it
        if not data.flags.c_contiguous:
            arr = np.array(data, order="C")
        elif data.flags.writeable:
            arr = data.copy()
        else:
            arr = data
        arr.flags.writeable = False
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying buffer."""
        return self._data

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs exactly one element, got shape {self.shape}")
        return float(self._data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor({self._data!r})"

    # operator sugar mirroring traced values: python scalars enter as rank-0
    # constants (or a scale for multiplication), so a function written with
    # operators computes the same floats eagerly and under trace.

    def _coerce(self, other) -> "Tensor | None":
        if isinstance(other, Tensor):
            return other
        if isinstance(other, numbers.Real) and not isinstance(other, bool):
            return Tensor(np.asarray(float(other), dtype=self.dtype))
        return None

    def _binary(self, op: str, other, reflect: bool = False):
        rhs = self._coerce(other)
        if rhs is None:
            return NotImplemented
        a, b = (rhs, self) if reflect else (self, rhs)
        return ew_binary(op, a, b)

    def __add__(self, other):
        return self._binary("add", other)

    def __radd__(self, other):
        return self._binary("add", other, reflect=True)

    def __sub__(self, other):
        return self._binary("sub", other)

    def __rsub__(self, other):
        return self._binary("sub", other, reflect=True)

    def __mul__(self, other):
        if isinstance(other, numbers.Real) and not isinstance(other, bool):
            return scale(self, float(other))
        return self._binary("mul", other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return self._binary("div", other)

    def __rtruediv__(self, other):
        return self._binary("div", other, reflect=True)

    def __pow__(self, k):
        return integer_pow(self, k)

    def __neg__(self):
        return neg(self)


def tensor(data, dtype=None) -> Tensor:
    """Coerce array-likes (nested lists, scalars, ndarrays) to a Tensor."""
    if isinstance(data, Tensor):
        if dtype is None or np.dtype(dtype) == data.dtype:
            return data
        return Tensor(data.numpy().astype(_check_dtype(dtype)))
    arr = np.asarray(data, dtype=_check_dtype(dtype) if dtype is not None else None)
    if arr.dtype not in _DTYPE_NAMES:
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr)


def zeros(shape: Sequence[int], dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=_check_dtype(dtype)))


def ones(shape: Sequence[int], dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=_check_dtype(dtype)))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack along a new leading axis; all operands must agree in shape/dtype."""
    if not tensors:
        raise ShapeError("stack of zero tensors")
    first = tensors[0]
    for t in tensors[1:]:
        if t.shape != first.shape or t.dtype != first.dtype:
            raise ShapeError(
                f"stack mismatch: {t.shape}/{t.dtype} vs {first.shape}/{first.dtype}"
            )
    return Tensor(np.stack([t.numpy() for t in tensors], axis=0))


def concat_leading(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the existing leading axis."""
    if not tensors:
        raise ShapeError("concat of zero tensors")
    return Tensor(np.concatenate([t.numpy() for t in tensors], axis=0))


def has_nonfinite(a: Tensor) -> bool:
    """Division may legitimately produce inf/nan; callers opt in to flagging it."""
    return not bool(np.isfinite(a.numpy()).all())


# ---------------------------------------------------------------------------
# elementwise ops: equal shapes, or one operand rank-0. No other broadcasting.

_EW_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def _binary_check(op: str, a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def ew_binary(op: str, a: Tensor, b: Tensor) -> Tensor:
    if op not in _EW_BINARY:
        raise ShapeError(f"unknown elementwise op {op!r}")
    _binary_check(op, a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        # asarray: ufuncs on two rank-0 operands return numpy scalars
        return Tensor(np.asarray(_EW_BINARY[op](a.numpy(), b.numpy())))


def add(a: Tensor, b: Tensor) -> Tensor:
    return ew_binary("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return ew_binary("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return ew_binary("mul", a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    return ew_binary("div", a, b)


def neg(a: Tensor) -> Tensor:
    return Tensor(np.asarray(np.negative(a.numpy())))


def integer_pow(a: Tensor, k: int) -> Tensor:
    if not isinstance(k, (int, np.integer)) or isinstance(k, bool) or k < 0:
        raise ShapeError(f"integer_pow exponent must be a non-negative int, got {k!r}")
    # np.power with a python int keeps the float dtype
    return Tensor(np.asarray(np.power(a.numpy(), int(k))))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise ShapeError(f"scale factor must be finite, got {c!r}")
    return Tensor(np.asarray(a.numpy() * a.dtype.type(c)))


# ---------------------------------------------------------------------------
# pairwise-tree reductions

def _tree_sum_axis0(x: np.ndarray) -> np.ndarray:
    """Sum along axis 0 by recursive midpoint split.

    For a power-of-two extent the recursion is identical to iterative
    even/odd pair halving, which is what the fast path below does.
    """
    m = x.shape[0]
    if m == 1:
        return x[0]
    if m & (m - 1) == 0:
        while m > 1:
            x = x[0::2] + x[1::2]
            m >>= 1
        return x[0]
    mid = m // 2
    return _tree_sum_axis0(x[:mid]) + _tree_sum_axis0(x[mid:])


def reduce_leading(op: str, a: Tensor, keepdims: bool = False) -> Tensor:
    """Sum or mean over axis 0 in pairwise-tree order.

    Result drops the leading axis unless keepdims is set (the lowered form
    of the federated aggregations keeps it so placements stay axis-shaped).
    """
    if a.ndim == 0:
        raise ShapeError("reduce_leading needs rank >= 1")
    if op not in ("sum", "mean"):
        raise ShapeError(f"reduce_leading op must be sum or mean, got {op!r}")
    n = a.shape[0]
    if n == 0:
        raise ShapeError("reduce_leading over empty leading axis")
    out = _tree_sum_axis0(a.numpy())
    if op == "mean":
        out = out / a.dtype.type(n)
    out = np.asarray(out, dtype=a.dtype)
    if keepdims:
        out = out[None, ...]
    return Tensor(out)


def tile_leading(a: Tensor, n: int) -> Tensor:
    if a.ndim == 0 or a.shape[0] != 1:
        raise ShapeError(f"tile_leading needs leading extent 1, got shape {a.shape}")
    if n < 1:
        raise ShapeError(f"tile count must be positive, got {n}")
    return Tensor(np.broadcast_to(a.numpy(), (n,) + a.shape[1:]).copy())


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two rank-1 tensors, pairwise-tree accumulation."""
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"dot needs two rank-1 operands, got {a.shape} and {b.shape}")
    _binary_check("dot", a, b)
    return Tensor(np.asarray(_tree_sum_axis0(a.numpy() * b.numpy()), dtype=a.dtype))


def batched_dot(a: Tensor, b: Tensor) -> Tensor:
    """out[i] = sum_j a[i,j] * b[i,j] for (n, d) operands.

    The contraction runs the same pairwise tree as dot() over each row, so
    a batched row agrees bit-for-bit with the per-slice inner product.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"batched_dot needs (n, d) operands, got {a.shape} and {b.shape}")
    _binary_check("batched_dot", a, b)
    prod = a.numpy() * b.numpy()
    # tree over the contraction axis; rows stay independent
    out = _tree_sum_axis0(np.moveaxis(prod, 1, 0))
    return Tensor(np.asarray(out, dtype=a.dtype))


def batched_outer(m: Tensor, b: Tensor) -> Tensor:
    """out[i, j] = m[i] * b[i, j] for m (n,) and b (n, d)."""
    if m.ndim != 1 or b.ndim != 2:
        raise ShapeError(f"batched_outer needs (n,) and (n, d), got {m.shape} and {b.shape}")
    if m.dtype != b.dtype:
        raise ShapeError(f"batched_outer: dtype mismatch {m.dtype} vs {b.dtype}")
    if m.shape[0] != b.shape[0]:
        raise ShapeError(f"batched_outer: batch mismatch {m.shape[0]} vs {b.shape[0]}")
    return Tensor(m.numpy()[:, None] * b.numpy())
