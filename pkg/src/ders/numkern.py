"""Deterministic dense numeric kernels and seeded randomness.

Matrices are 2-D ``numpy.ndarray`` values (row-major) in the module-wide default
dtype (float64 by default, float32 selectable). Every kernel here is pure and
has a fixed, platform-independent summation order, so results are bit-reproducible:

* ``matmul`` accumulates over the inner dimension in increasing index order,
  which is exactly the naive triple-loop order per output element. BLAS is
  deliberately not used (its blocked summation is not bit-stable across shapes).
* Randomness comes from counter-based Philox streams keyed by
  ``(seed, stream_id)``; identical keys give identical draws on any platform,
  independent of call order elsewhere in the program.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

_MASK64 = (1 << 64) - 1

_DTYPE = np.float64


def set_default_dtype(name: str) -> None:
    """Select the global float dtype: ``"float64"`` (default) or ``"float32"``."""
    global _DTYPE
    if name == "float64":
        _DTYPE = np.float64
    elif name == "float32":
        _DTYPE = np.float32
    else:
        raise ParameterError(f"unsupported dtype {name!r}; use 'float64' or 'float32'")


def get_default_dtype() -> np.dtype:
    return np.dtype(_DTYPE)


def dtype_bits(dtype=None) -> int:
    """Bit width of ``dtype`` (default: the current default dtype)."""
    return np.dtype(dtype if dtype is not None else get_default_dtype()).itemsize * 8


def as_matrix(data) -> np.ndarray:
    """Coerce nested sequences / arrays to a C-contiguous 2-D matrix."""
    m = np.ascontiguousarray(data, dtype=_DTYPE)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def check_finite(arr: np.ndarray, context: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {context}")
    return arr


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible random stream.

    The pair (seed, stream_id) keys a counter-based Philox generator, so two
    streams with different ids are statistically independent and each stream
    yields the same draw sequence on every run and platform.
    """

    seed: int
    stream_id: int = 0

    @cached_property
    def generator(self) -> np.random.Generator:
        key = ((self.seed & _MASK64) << 64) | (self.stream_id & _MASK64)
        return np.random.Generator(np.random.Philox(key=key))


def derive_stream_id(*parts: int | str) -> int:
    """Mix structured coordinates (layer, matrix, expert, purpose...) into a
    64-bit stream id.

    Uses a splitmix64-style finalizer; strings are folded in with FNV-1a so the
    result never depends on Python's salted ``hash``.
    """
    h = 0
    for part in parts:
        if isinstance(part, str):
            v = 0xCBF29CE484222325
            for byte in part.encode("utf-8"):
                v = ((v ^ byte) * 0x100000001B3) & _MASK64
            part = v
        elif not isinstance(part, (int, np.integer)):
            raise ParameterError(f"stream id parts must be int or str, got {type(part)!r}")
        h = (h + (int(part) & _MASK64) + 0x9E3779B97F4A7C15) & _MASK64
        h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & _MASK64
        h = h ^ (h >> 31)
    return h


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a deterministic summation order.

    Accumulates ``out += a[:, k] * b[k, :]`` for k = 0..inner-1, which performs
    the additions for each output element in exactly the order of the naive
    triple loop. Rows are independent, so the product of a batch equals the
    stacked products of its rows bit-for-bit.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got ndim {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return check_finite(out, "matmul output")


def softmax(v: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax. Accepts a 1-D row vector or a 2-D batch.

    Each row is shifted by its max before exponentiation; rows are processed
    independently, so batched and single-row calls agree bit-for-bit.
    """
    arr = np.asarray(v)
    if arr.size == 0:
        raise DimensionError("softmax of an empty vector")
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"softmax needs a row vector or batch, got ndim={arr.ndim}")
    check_finite(arr, "softmax input")
    shifted = arr - np.max(arr, axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=1, keepdims=True)
    return out[0] if squeeze else out


def topk_mask(v: np.ndarray, topk_count: int) -> np.ndarray:
    """Zero all but the ``topk_count`` largest entries per row.

    Survivors keep their original values (no renormalization: the routing
    convention applies softmax first and masks after). Ties are broken toward
    the lowest index via a stable sort.
    """
    arr = np.asarray(v)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"topk_mask needs a row vector or batch, got ndim={arr.ndim}")
    n = arr.shape[1]
    if not 1 <= topk_count <= n:
        raise ParameterError(f"topk_count={topk_count} out of range [1, {n}]")
    order = np.argsort(-arr, axis=1, kind="stable")
    keep = np.zeros(arr.shape, dtype=bool)
    np.put_along_axis(keep, order[:, :topk_count], True, axis=1)
    out = np.where(keep, arr, np.zeros((), dtype=arr.dtype))
    return out[0] if squeeze else out


def bernoulli_mask(p: float, rows: int, cols: int, rng: RngStream) -> np.ndarray:
    """Matrix of independent {0,1} draws, 1 with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"Bernoulli probability p={p} outside [0, 1]")
    if rows < 0 or cols < 0:
        raise ParameterError("mask dimensions must be non-negative")
    draws = rng.generator.random((rows, cols)) < p
    return draws.astype(_DTYPE)


def sample_unique_indices(total: int, keep: int, rng: RngStream) -> np.ndarray:
    """``keep`` distinct integers in [0, total), sorted ascending (int64)."""
    if keep > total:
        raise ParameterError(f"cannot keep {keep} unique indices out of {total}")
    if keep < 0 or total < 0:
        raise ParameterError("counts must be non-negative")
    if keep == 0:
        return np.empty(0, dtype=np.int64)
    picked = rng.generator.choice(total, size=keep, replace=False)
    return np.sort(picked.astype(np.int64))
