"""Deterministic dense-array substrate.

Arrays are plain ``numpy.ndarray`` values. What this module adds on top of
numpy is a fixed reduction order for matrix products (so cached and
recomputed paths can be compared bit-for-bit), a global precision switch,
and a counter-based seeded generator.

Reduction order of :func:`matmul`: for ``C = A @ B`` every output cell is
accumulated strictly left to right over the inner axis,
``((A[i,0]B[0,j] + A[i,1]B[1,j]) + A[i,2]B[2,j]) + ...``, which is the order
of the textbook triple loop. BLAS is deliberately not used because its
blocked/FMA kernels do not reproduce that order.
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Iterator, Sequence

import numpy as np

PRECISIONS = {"f32": np.float32, "f64": np.float64}

_precision: contextvars.ContextVar[str] = contextvars.ContextVar("omnixfer_precision", default="f32")


def set_precision(name: str) -> None:
    if name not in PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(PRECISIONS)}")
    _precision.set(name)


def get_precision() -> str:
    return _precision.get()


def get_dtype() -> type:
    return PRECISIONS[_precision.get()]


def verification_mode() -> bool:
    """64-bit mode doubles as the checked mode: finiteness is asserted after ops."""
    return _precision.get() == "f64"


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    if name not in PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(PRECISIONS)}")
    token = _precision.set(name)
    try:
        yield
    finally:
        _precision.reset(token)


def asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=get_dtype())


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if verification_mode() and not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values produced by {where}")
    return x


def num_threads() -> int:
    raw = os.environ.get("OMNIXFER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"OMNIXFER_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _matmul_serial(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # inner axis moved to the front so each step reads contiguous slices
    at = np.ascontiguousarray(np.moveaxis(a, -1, 0))
    bt = np.ascontiguousarray(np.moveaxis(b, -2, 0))
    out = at[0][..., :, None] * bt[0][..., None, :]
    tmp = np.empty_like(out)
    for t in range(1, at.shape[0]):
        np.multiply(at[t][..., :, None], bt[t][..., None, :], out=tmp)
        out += tmp
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes with leading axes broadcast.

    Each cell is summed left to right over the inner axis (see module doc).
    With ``OMNIXFER_THREADS > 1`` the rows are split across threads; the
    per-cell order is unchanged, so results do not depend on thread count.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.shape[-1] == 0:
        shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
        return np.zeros(shape, dtype=np.result_type(a, b))
    threads = num_threads()
    rows = a.shape[-2]
    if threads == 1 or rows < 2 * threads:
        return check_finite(_matmul_serial(a, b), "matmul")
    bounds = np.linspace(0, rows, threads + 1).astype(int)
    chunks = [a[..., lo:hi, :] for lo, hi in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda part: _matmul_serial(part, b), chunks))
    return check_finite(np.concatenate(parts, axis=-2), "matmul")


def softmax_rows(m: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction.

    ``mask`` (boolean, broadcastable) marks allowed columns; disallowed cells
    get exactly zero weight. A row with no allowed column is an error.
    """
    m = np.asarray(m)
    if mask is None:
        shifted = m - m.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(mask.any(axis=-1)):
            raise ValueError("softmax row has no allowed columns")
        filled = np.where(mask, m, -np.inf)
        shifted = filled - filled.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(shifted), 0.0).astype(m.dtype)
    return check_finite(e / e.sum(axis=-1, keepdims=True), "softmax_rows")


def concat(axis: int, *arrays: np.ndarray) -> np.ndarray:
    if not arrays:
        raise ValueError("concat needs at least one array")
    first = np.asarray(arrays[0])
    ax = axis % first.ndim
    for arr in arrays[1:]:
        arr = np.asarray(arr)
        if arr.ndim != first.ndim or any(
            x != y for i, (x, y) in enumerate(zip(arr.shape, first.shape)) if i != ax
        ):
            raise ValueError(
                f"concat along axis {axis}: incompatible shapes "
                f"{[tuple(np.shape(a)) for a in arrays]}"
            )
    return np.concatenate(arrays, axis=ax)


def split(axis: int, array: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    """Inverse of :func:`concat`: cut ``array`` into consecutive pieces of ``sizes``."""
    array = np.asarray(array)
    if sum(sizes) != array.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis length {array.shape[axis]}")
    cuts = np.cumsum(sizes)[:-1]
    return [p.copy() for p in np.split(array, cuts, axis=axis)]


def _label_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(label).encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Seeded Philox (counter-based) generator.

    The stream depends only on the seed, never on platform or precision:
    samples are drawn in 64-bit and cast afterwards. ``child`` derives an
    independent stream from string or integer labels, which is how model
    weights get stable per-tensor seeds.
    """

    def __init__(self, seed: int, *labels):
        if not isinstance(seed, (int, np.integer)):
            raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
        self.seed = int(seed)
        self.labels = tuple(labels)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF] + [_label_int(x) for x in labels]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *labels) -> "Rng":
        return Rng(self.seed, *self.labels, *labels)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(size=tuple(shape)) * scale).astype(get_dtype())

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=tuple(shape)).astype(get_dtype())

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, labels={self.labels})"


def seeded_normal(shape, rng: Rng) -> np.ndarray:
    if any(int(s) < 0 for s in shape):
        raise ValueError(f"invalid shape {tuple(shape)}")
    return rng.normal(shape)
