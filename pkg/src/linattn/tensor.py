"""Head tensors: a (G, N, D) block of reals with an explicit storage layout.

``G`` is the flattened batch*heads count.  Two layouts are supported:

* ``FEATURE_MAJOR``  -- element (g, i, j) lives at ``g*N*D + j*N + i``
* ``SEQUENCE_MAJOR`` -- element (g, i, j) lives at ``g*N*D + i*D + j``

Kernels read feature-major tensors as contiguous ``(G, D, N)`` arrays and
sequence-major tensors as contiguous ``(G, N, D)`` arrays.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import InvalidShape, NonFiniteInput, ShapeMismatch


class Layout(enum.Enum):
    FEATURE_MAJOR = "feature"
    SEQUENCE_MAJOR = "sequence"


class Fill(enum.Enum):
    ZEROS = "zeros"
    ONES = "ones"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class Shape:
    batch: int
    heads: int
    seq_len: int
    dim: int

    def __post_init__(self):
        for name in ("batch", "heads", "seq_len", "dim"):
            value = getattr(self, name)
            if int(value) != value or value <= 0:
                raise InvalidShape(f"{name} must be a positive integer, got {value!r}")
        if self.groups * self.seq_len * self.dim >= np.iinfo(np.int64).max:
            raise InvalidShape("tensor does not fit the platform index range")

    @property
    def groups(self) -> int:
        return self.batch * self.heads


@dataclass(frozen=True)
class LinearKernelCoeffs:
    """Coefficients of the attention kernel ``f(x) = a + b*x``."""

    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if self.a == 0 and self.b == 0:
            raise ValueError("at least one of a, b must be nonzero")
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError("kernel coefficients must be finite")


class HeadTensor:
    """Immutable (groups, seq_len, dim) tensor stored flat in a declared layout."""

    __slots__ = ("groups", "seq_len", "dim", "layout", "data")

    def __init__(self, groups, seq_len, dim, layout, data, *, check_finite=True, copy=True):
        if min(groups, seq_len, dim) <= 0:
            raise InvalidShape(f"zero-sized dimension in ({groups}, {seq_len}, {dim})")
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        data = np.ascontiguousarray(data.reshape(-1))
        if data.size != groups * seq_len * dim:
            raise InvalidShape(
                f"data length {data.size} != {groups}*{seq_len}*{dim}"
            )
        if check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteInput("head tensor contains NaN or Inf")
        if copy:
            data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "groups", int(groups))
        object.__setattr__(self, "seq_len", int(seq_len))
        object.__setattr__(self, "dim", int(dim))
        object.__setattr__(self, "layout", Layout(layout))
        object.__setattr__(self, "data", data)

    def __setattr__(self, name, value):
        raise AttributeError("HeadTensor is immutable")

    def __repr__(self):
        return (
            f"HeadTensor(groups={self.groups}, seq_len={self.seq_len}, dim={self.dim}, "
            f"layout={self.layout.name}, dtype={self.data.dtype})"
        )

    @classmethod
    def from_array(cls, array, layout=Layout.SEQUENCE_MAJOR):
        """Build from a logical ``(G, N, D)`` array, storing it in ``layout``."""
        array = np.asarray(array)
        if array.ndim != 3:
            raise InvalidShape(f"expected a 3-d (G, N, D) array, got ndim={array.ndim}")
        if not np.all(np.isfinite(array)):
            raise NonFiniteInput("head tensor contains NaN or Inf")
        g, n, d = array.shape
        if Layout(layout) is Layout.FEATURE_MAJOR:
            flat = np.ascontiguousarray(array.transpose(0, 2, 1)).reshape(-1)
        else:
            flat = np.ascontiguousarray(array).reshape(-1)
        return cls(g, n, d, layout, flat.copy(), check_finite=False, copy=False)

    @classmethod
    def _wrap(cls, stored, layout):
        """Adopt a contiguous kernel buffer without copying or re-checking."""
        if Layout(layout) is Layout.FEATURE_MAJOR:
            g, d, n = stored.shape
        else:
            g, n, d = stored.shape
        return cls(g, n, d, layout, stored.reshape(-1), check_finite=False, copy=False)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def shape(self):
        return (self.groups, self.seq_len, self.dim)

    def offset(self, g, i, j) -> int:
        n, d = self.seq_len, self.dim
        if self.layout is Layout.FEATURE_MAJOR:
            return g * n * d + j * n + i
        return g * n * d + i * d + j

    def at(self, g, i, j):
        return self.data[self.offset(g, i, j)]

    def stored(self) -> np.ndarray:
        """Read-only view in storage order: (G, D, N) or (G, N, D)."""
        if self.layout is Layout.FEATURE_MAJOR:
            return self.data.reshape(self.groups, self.dim, self.seq_len)
        return self.data.reshape(self.groups, self.seq_len, self.dim)

    def array(self) -> np.ndarray:
        """Read-only logical (G, N, D) view, whatever the storage layout."""
        if self.layout is Layout.FEATURE_MAJOR:
            return self.stored().transpose(0, 2, 1)
        return self.stored()

    def astype(self, dtype) -> HeadTensor:
        if self.data.dtype == dtype:
            return self
        return HeadTensor(self.groups, self.seq_len, self.dim, self.layout,
                          self.data.astype(dtype), check_finite=False, copy=False)


def make_tensor(shape: Shape, layout=Layout.SEQUENCE_MAJOR, fill=Fill.ZEROS, *,
                seed=0, lo=-1.0, hi=1.0, dtype=np.float64) -> HeadTensor:
    """Allocate a head tensor for ``shape``.

    ``Fill.UNIFORM`` draws from ``U[lo, hi)`` with a PCG64 generator seeded by
    ``seed``.  Values are always drawn in logical (g, i, j) order, so the same
    seed gives the same logical tensor whichever layout is requested.
    """
    fill = Fill(fill)
    g, n, d = shape.groups, shape.seq_len, shape.dim
    if fill is Fill.ZEROS:
        logical = np.zeros((g, n, d), dtype=dtype)
    elif fill is Fill.ONES:
        logical = np.ones((g, n, d), dtype=dtype)
    else:
        if not lo < hi:
            raise ValueError(f"uniform fill needs lo < hi, got lo={lo}, hi={hi}")
        rng = np.random.default_rng(seed)
        logical = rng.uniform(lo, hi, size=(g, n, d)).astype(dtype)
    return HeadTensor.from_array(logical, layout)


def relayout(t: HeadTensor, target: Layout) -> HeadTensor:
    target = Layout(target)
    if t.layout is target:
        return t
    return HeadTensor.from_array(t.array(), target)


def max_abs_diff(x: HeadTensor, y: HeadTensor) -> float:
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    diff = np.abs(x.array().astype(np.float64) - y.array().astype(np.float64))
    return float(diff.max())


def check_same_shape(*tensors: HeadTensor):
    first = tensors[0]
    for t in tensors[1:]:
        if t.shape != first.shape:
            raise ShapeMismatch(f"{first.shape} vs {t.shape}")


class Mask(enum.Enum):
    CAUSAL = "causal"
    NONE = "none"


@dataclass(frozen=True)
class Gradients:
    dQ: HeadTensor
    dK: HeadTensor
    dV: HeadTensor

    def __iter__(self):
        return iter((self.dQ, self.dK, self.dV))
