"""Minimal reverse-mode autodiff over float64 numpy arrays.

Design constraints:
  - every value is a scalar () or a 2-D matrix; 64-bit floats throughout
  - broadcasting limited to row (1,m) or column (n,1) vectors against a
    matrix; anything else must be expanded explicitly
  - forward evaluation is deterministic; a fresh op graph is recorded per
    forward pass and freed once the caller drops its references
  - backward() accumulates into .grad, so repeated calls without zero_grad()
    add up; recorded .data arrays are never mutated in place

Checkpoint I/O lives here too: a flat little-endian binary of named float64
tensors (magic, version, count, then per tensor: name length, name, rank,
dims, payload).
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable

import numpy as np

from .errors import DataError, DimensionError, NumericError

_MAGIC = b"MDCP"
_VERSION = 1


class DiffValue:
    """Node in the autodiff graph: data, accumulated grad, op provenance."""

    __slots__ = ("data", "grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data: np.ndarray,
        parents: tuple["DiffValue", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim not in (0, 2):
            raise DimensionError(f"DiffValue must be scalar or 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"DiffValue(shape={self.data.shape}, op={self.op})"

    def __add__(self, other: "DiffValue") -> "DiffValue":
        return add(self, other)

    def __sub__(self, other: "DiffValue") -> "DiffValue":
        return sub(self, other)

    def __mul__(self, other: "DiffValue") -> "DiffValue":
        return mul(self, other)

    def __matmul__(self, other: "DiffValue") -> "DiffValue":
        return matmul(self, other)


def value(data) -> DiffValue:
    """Leaf node (parameter or constant)."""
    return DiffValue(data)


def _check_binary_shapes(a: DiffValue, b: DiffValue, op: str) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    if len(sa) == 2 and len(sb) == 2:
        n, m = sa
        if sb == (1, m) or sb == (n, 1):
            return
        n, m = sb
        if sa == (1, m) or sa == (n, 1):
            return
    raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    return g.sum(axis=1, keepdims=True)


def add(a: DiffValue, b: DiffValue) -> DiffValue:
    _check_binary_shapes(a, b, "add")
    out = DiffValue(a.data + b.data, (a, b), op="add")

    def backward(g: np.ndarray) -> None:
        a.grad += _reduce_to(g, a.data.shape)
        b.grad += _reduce_to(g, b.data.shape)

    out._backward = backward
    return out


def sub(a: DiffValue, b: DiffValue) -> DiffValue:
    _check_binary_shapes(a, b, "sub")
    out = DiffValue(a.data - b.data, (a, b), op="sub")

    def backward(g: np.ndarray) -> None:
        a.grad += _reduce_to(g, a.data.shape)
        b.grad -= _reduce_to(g, b.data.shape)

    out._backward = backward
    return out


def mul(a: DiffValue, b: DiffValue) -> DiffValue:
    _check_binary_shapes(a, b, "mul")
    out = DiffValue(a.data * b.data, (a, b), op="mul")

    def backward(g: np.ndarray) -> None:
        a.grad += _reduce_to(g * b.data, a.data.shape)
        b.grad += _reduce_to(g * a.data, b.data.shape)

    out._backward = backward
    return out


def div(a: DiffValue, b: DiffValue) -> DiffValue:
    _check_binary_shapes(a, b, "div")
    out = DiffValue(a.data / b.data, (a, b), op="div")

    def backward(g: np.ndarray) -> None:
        a.grad += _reduce_to(g / b.data, a.data.shape)
        b.grad += _reduce_to(-g * a.data / (b.data * b.data), b.data.shape)

    out._backward = backward
    return out


def scale(a: DiffValue, c: float) -> DiffValue:
    """Multiply by a python-float constant."""
    c = float(c)
    out = DiffValue(a.data * c, (a,), op="scale")

    def backward(g: np.ndarray) -> None:
        a.grad += g * c

    out._backward = backward
    return out


def add_const(a: DiffValue, c: float) -> DiffValue:
    c = float(c)
    out = DiffValue(a.data + c, (a,), op="add_const")

    def backward(g: np.ndarray) -> None:
        a.grad += g

    out._backward = backward
    return out


def neg(a: DiffValue) -> DiffValue:
    return scale(a, -1.0)


def matmul(a: DiffValue, b: DiffValue) -> DiffValue:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = DiffValue(a.data @ b.data, (a, b), op="matmul")

    def backward(g: np.ndarray) -> None:
        a.grad += g @ b.data.T
        b.grad += a.data.T @ g

    out._backward = backward
    return out


def transpose(a: DiffValue) -> DiffValue:
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    out = DiffValue(a.data.T.copy(), (a,), op="transpose")

    def backward(g: np.ndarray) -> None:
        a.grad += g.T

    out._backward = backward
    return out


def relu(a: DiffValue) -> DiffValue:
    out = DiffValue(np.maximum(a.data, 0.0), (a,), op="relu")

    def backward(g: np.ndarray) -> None:
        a.grad += g * (a.data > 0.0)

    out._backward = backward
    return out


def sigmoid(a: DiffValue) -> DiffValue:
    y = _sigmoid(a.data)
    out = DiffValue(y, (a,), op="sigmoid")

    def backward(g: np.ndarray) -> None:
        a.grad += g * y * (1.0 - y)

    out._backward = backward
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function (plain ndarray helper)."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a: DiffValue) -> DiffValue:
    y = np.exp(a.data)
    out = DiffValue(y, (a,), op="exp")

    def backward(g: np.ndarray) -> None:
        a.grad += g * y

    out._backward = backward
    return out


def log(a: DiffValue) -> DiffValue:
    if np.any(a.data <= 0.0):
        raise NumericError("log: non-positive input")
    out = DiffValue(np.log(a.data), (a,), op="log")

    def backward(g: np.ndarray) -> None:
        a.grad += g / a.data

    out._backward = backward
    return out


def pow_const(a: DiffValue, p: float) -> DiffValue:
    """a**p for a float constant p; requires positive base unless p is a
    non-negative integer."""
    p = float(p)
    if p != int(p) or p < 0:
        if np.any(a.data <= 0.0):
            raise NumericError("pow_const: non-positive base with non-integer exponent")
    y = a.data**p
    out = DiffValue(y, (a,), op="pow_const")

    def backward(g: np.ndarray) -> None:
        if p == 0.0:
            return
        a.grad += g * p * a.data ** (p - 1.0)

    out._backward = backward
    return out


def clamp(a: DiffValue, lo: float, hi: float) -> DiffValue:
    """Clip to [lo, hi]; gradient passes only strictly inside the interval."""
    out = DiffValue(np.clip(a.data, lo, hi), (a,), op="clamp")
    inside = (a.data > lo) & (a.data < hi)

    def backward(g: np.ndarray) -> None:
        a.grad += g * inside

    out._backward = backward
    return out


def maximum_const(a: DiffValue, c: float) -> DiffValue:
    """Elementwise max(a, c); gradient passes where a > c."""
    c = float(c)
    out = DiffValue(np.maximum(a.data, c), (a,), op="maximum_const")
    keep = a.data > c

    def backward(g: np.ndarray) -> None:
        a.grad += g * keep

    out._backward = backward
    return out


def sum_rows(a: DiffValue) -> DiffValue:
    """Row sums as an (n,1) column vector."""
    out = DiffValue(a.data.sum(axis=1, keepdims=True), (a,), op="sum_rows")

    def backward(g: np.ndarray) -> None:
        a.grad += np.broadcast_to(g, a.data.shape)

    out._backward = backward
    return out


def sum_cols(a: DiffValue) -> DiffValue:
    """Column sums as a (1,m) row vector."""
    out = DiffValue(a.data.sum(axis=0, keepdims=True), (a,), op="sum_cols")

    def backward(g: np.ndarray) -> None:
        a.grad += np.broadcast_to(g, a.data.shape)

    out._backward = backward
    return out


def sum_all(a: DiffValue) -> DiffValue:
    out = DiffValue(np.asarray(a.data.sum()), (a,), op="sum_all")

    def backward(g: np.ndarray) -> None:
        a.grad += g

    out._backward = backward
    return out


def mean_all(a: DiffValue) -> DiffValue:
    n = a.data.size
    out = DiffValue(np.asarray(a.data.mean()), (a,), op="mean_all")

    def backward(g: np.ndarray) -> None:
        a.grad += g / n

    out._backward = backward
    return out


def softmax_rows(a: DiffValue) -> DiffValue:
    """Row-wise softmax, max-shifted for stability."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = DiffValue(y, (a,), op="softmax_rows")

    def backward(g: np.ndarray) -> None:
        dot = (g * y).sum(axis=1, keepdims=True)
        a.grad += y * (g - dot)

    out._backward = backward
    return out


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    mx = x.max(axis=axis, keepdims=True)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(x - safe).sum(axis=axis, keepdims=True))


def logsumexp_rows(a: DiffValue) -> DiffValue:
    """Row-wise log-sum-exp as an (n,1) column vector."""
    lse = _logsumexp(a.data, axis=1)
    out = DiffValue(lse, (a,), op="logsumexp_rows")
    soft = np.exp(a.data - lse)

    def backward(g: np.ndarray) -> None:
        a.grad += g * soft

    out._backward = backward
    return out


def logsumexp_cols(a: DiffValue) -> DiffValue:
    """Column-wise log-sum-exp as a (1,m) row vector."""
    lse = _logsumexp(a.data, axis=0)
    out = DiffValue(lse, (a,), op="logsumexp_cols")
    soft = np.exp(a.data - lse)

    def backward(g: np.ndarray) -> None:
        a.grad += g * soft

    out._backward = backward
    return out


def concat_channels(a: DiffValue, b: DiffValue) -> DiffValue:
    """Concatenate two matrices along the channel (column) axis."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise DimensionError(
            f"concat_channels: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    da = a.data.shape[1]
    out = DiffValue(np.concatenate([a.data, b.data], axis=1), (a, b), op="concat_channels")

    def backward(g: np.ndarray) -> None:
        a.grad += g[:, :da]
        b.grad += g[:, da:]

    out._backward = backward
    return out


def layer_norm(a: DiffValue, eps: float = 1e-8) -> DiffValue:
    """Row-wise normalization to zero mean, unit variance (no learned affine)."""
    if a.data.ndim != 2:
        raise DimensionError("layer_norm expects a matrix")
    m = a.data.shape[1]
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = DiffValue(y, (a,), op="layer_norm")

    def backward(g: np.ndarray) -> None:
        gsum = g.sum(axis=1, keepdims=True)
        gysum = (g * y).sum(axis=1, keepdims=True)
        a.grad += inv * (g - gsum / m - y * gysum / m)

    out._backward = backward
    return out


def pad_slack(a: DiffValue) -> DiffValue:
    """Append one zero row and one zero column (log-domain slack entries)."""
    n, m = a.data.shape
    padded = np.zeros((n + 1, m + 1))
    padded[:n, :m] = a.data
    out = DiffValue(padded, (a,), op="pad_slack")

    def backward(g: np.ndarray) -> None:
        a.grad += g[:n, :m]

    out._backward = backward
    return out


def crop(a: DiffValue, n: int, m: int) -> DiffValue:
    """Keep the top-left n-by-m block."""
    if n > a.data.shape[0] or m > a.data.shape[1]:
        raise DimensionError(f"crop to ({n},{m}) exceeds shape {a.data.shape}")
    out = DiffValue(a.data[:n, :m].copy(), (a,), op="crop")

    def backward(g: np.ndarray) -> None:
        a.grad[:n, :m] += g

    out._backward = backward
    return out


def rotate_channel_pairs(a: DiffValue, cos: np.ndarray, sin: np.ndarray) -> DiffValue:
    """Rotate consecutive channel pairs (2i, 2i+1) of each row by constant
    per-row angles given as cos/sin of shape (n, d/2)."""
    n, d = a.data.shape
    if d % 2 != 0 or cos.shape != (n, d // 2) or sin.shape != (n, d // 2):
        raise DimensionError(
            f"rotate_channel_pairs: features {a.data.shape} vs angles {cos.shape}"
        )
    ev, od = a.data[:, 0::2], a.data[:, 1::2]
    y = np.empty_like(a.data)
    y[:, 0::2] = cos * ev - sin * od
    y[:, 1::2] = sin * ev + cos * od
    out = DiffValue(y, (a,), op="rotate_channel_pairs")

    def backward(g: np.ndarray) -> None:
        ge, go = g[:, 0::2], g[:, 1::2]
        ga = np.empty_like(g)
        ga[:, 0::2] = cos * ge + sin * go
        ga[:, 1::2] = -sin * ge + cos * go
        a.grad += ga

    out._backward = backward
    return out


def backward(loss: DiffValue) -> None:
    """Reverse-mode sweep from a scalar loss; accumulates into .grad fields."""
    if loss.data.shape != ():
        raise DimensionError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order: list[DiffValue] = []
    seen: set[int] = set()
    stack: list[tuple[DiffValue, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = loss.grad + 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grad(values: Iterable[DiffValue]) -> None:
    for v in values:
        v.grad = np.zeros_like(v.data)


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 tensors as a flat little-endian binary file."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(tensors)))
        for name in sorted(tensors):
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d,
            # and tobytes() below already serializes in C order
            arr = np.asarray(tensors[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read a checkpoint written by save_checkpoint; values round-trip exactly."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise DataError(f"not a checkpoint file: {path}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            n_items = int(np.prod(dims)) if rank else 1
            end = off + 8 * n_items
            if end > len(blob):
                raise DataError(f"truncated checkpoint: {path}")
            arr = np.frombuffer(blob[off:end], dtype="<f8").reshape(dims).copy()
            off = end
            tensors[name] = arr
    except struct.error as e:
        raise DataError(f"truncated checkpoint: {path}") from e
    return tensors
