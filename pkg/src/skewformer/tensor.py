"""Dense row-major tensor substrate.

Everything downstream (attention kernels, the decoder, the benchmarks) runs on
plain C-contiguous numpy buffers wrapped in a thin :class:`Tensor`.  Two
properties are load-bearing and worth calling out:

* ``matmul`` accumulates strictly in ascending inner-index order, so its output
  is bit-for-bit reproducible and comparable against a scalar triple-loop
  reference.  Equality claims elsewhere in the codebase (naive gather path vs
  skewed path) rely on this.
* New buffers are registered with the active :class:`AllocationMeter`, which is
  how the memory benchmarks observe peak intermediate usage.  Granularity is
  whole-tensor allocations; numpy scratch inside an op is not counted.
"""

from __future__ import annotations

import warnings
import weakref
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "AllocationMeter",
    "ShapeError",
    "BoundsError",
    "CAT_GENERAL",
    "CAT_REL_EMBED",
    "CAT_REL_LOGITS",
    "tensor",
    "zeros",
    "wrap",
    "matmul",
    "mm",
    "softmax_rows",
    "softmax_rows_nd",
    "pad",
    "reshape",
    "slice_",
    "add",
    "divide_scalar",
    "matmul_backend",
]

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Allocation categories, mirroring how the memory table splits relative-attention
# cost into "intermediate relative embeddings" vs "relative logits".
CAT_GENERAL = "general"
CAT_REL_EMBED = "relative_embeddings"
CAT_REL_LOGITS = "relative_logits"


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class BoundsError(IndexError):
    """A slice or pad specification falls outside the tensor's extents."""


class FullyMaskedRowWarning(RuntimeWarning):
    """A softmax row had no attendable entries; it was zero-filled."""


# ---------------------------------------------------------------------------
# Allocation metering


class AllocationMeter:
    """Tracks live and peak bytes of tensor allocations, per category.

    A meter observes allocations only while activated via :meth:`measure`.
    Meters are per-measurement-session objects; do not share one across
    concurrent benchmark runs.
    """

    def __init__(self):
        self.current_bytes = 0
        self.peak_bytes = 0
        self._cat_current: dict[str, int] = {}
        self._cat_peak: dict[str, int] = {}
        self._epoch = 0

    def reset(self):
        self.current_bytes = 0
        self.peak_bytes = 0
        self._cat_current.clear()
        self._cat_peak.clear()
        self._epoch += 1

    def charge(self, obj, nbytes: int, category: str = CAT_GENERAL):
        """Record an allocation of `nbytes` and release it when `obj` dies."""
        self.current_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.current_bytes)
        self._cat_current[category] = self._cat_current.get(category, 0) + nbytes
        self._cat_peak[category] = max(
            self._cat_peak.get(category, 0), self._cat_current[category]
        )
        epoch = self._epoch
        weakref.finalize(obj, self._release, nbytes, category, epoch)

    def _release(self, nbytes: int, category: str, epoch: int):
        if epoch != self._epoch:
            return
        self.current_bytes = max(0, self.current_bytes - nbytes)
        self._cat_current[category] = max(0, self._cat_current.get(category, 0) - nbytes)

    def peak_for(self, category: str) -> int:
        return self._cat_peak.get(category, 0)

    def current_for(self, category: str) -> int:
        return self._cat_current.get(category, 0)

    @contextmanager
    def measure(self):
        """Activate this meter for allocations made in the dynamic scope."""
        global _ACTIVE_METER
        previous = _ACTIVE_METER
        _ACTIVE_METER = self
        try:
            yield self
        finally:
            _ACTIVE_METER = previous


_ACTIVE_METER: AllocationMeter | None = None
_ACTIVE_CATEGORY: str = CAT_GENERAL


@contextmanager
def alloc_category(category: str):
    """Attribute allocations in this scope to `category` on the active meter."""
    global _ACTIVE_CATEGORY
    previous = _ACTIVE_CATEGORY
    _ACTIVE_CATEGORY = category
    try:
        yield
    finally:
        _ACTIVE_CATEGORY = previous


def _register(array: np.ndarray):
    if _ACTIVE_METER is not None:
        _ACTIVE_METER.charge(array, array.nbytes, _ACTIVE_CATEGORY)


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    """Dense array with explicit shape over a flat row-major float buffer."""

    __slots__ = ("array",)

    def __init__(self, array: np.ndarray):
        array = np.asarray(array)
        if array.dtype not in FLOAT_DTYPES:
            raise TypeError(f"Tensor dtype must be float32 or float64, got {array.dtype}")
        if not array.flags.c_contiguous:
            array = np.ascontiguousarray(array)
        self.array = array

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def dtype(self) -> np.dtype:
        return self.array.dtype

    @property
    def data(self) -> np.ndarray:
        """The flat row-major buffer (a zero-copy view)."""
        return self.array.reshape(-1)

    @property
    def nbytes(self) -> int:
        return self.array.nbytes

    @property
    def ndim(self) -> int:
        return self.array.ndim

    def copy(self) -> "Tensor":
        return _new(self.array.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def _new(array: np.ndarray) -> Tensor:
    """Wrap a freshly allocated buffer and charge the active meter."""
    t = Tensor(array)
    _register(t.array)
    return t


def tensor(values, dtype=np.float64) -> Tensor:
    """Build a tensor from nested sequences or an ndarray (copies)."""
    return _new(np.array(values, dtype=dtype))


def zeros(shape, dtype=np.float64) -> Tensor:
    return _new(np.zeros(shape, dtype=dtype))


def wrap(array: np.ndarray) -> Tensor:
    """Wrap existing storage without charging the meter (no new allocation)."""
    return Tensor(array)


# ---------------------------------------------------------------------------
# Matmul with fixed ascending-k accumulation
#
# Each output element is produced by the identical sequence of IEEE multiply
# then add, for k = 0..K-1, that a scalar triple loop would perform.  The numba
# kernel keeps the k loop outermost per row so the inner j loop vectorizes
# without reassociation; einsum's two-operand path accumulates sequentially as
# well.  A startup probe double-checks the chosen backend against the plain
# numpy k-loop (exact by construction) and falls back on any mismatch.


def _mm_kloop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=a.dtype)
    tmp = np.empty((m, n), dtype=a.dtype)
    for t in range(k):
        np.multiply(a[:, t, None], b[t, None, :], out=tmp)
        np.add(out, tmp, out=out)
    return out


def _mm_einsum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ik,kj->ij", a, b, optimize=False)


def _build_numba_mm():
    import numba

    @numba.njit(cache=True)
    def _mm_ikj(a, b, out):  # pragma: no cover - compiled
        m, k = a.shape
        n = b.shape[1]
        for i in range(m):
            for j in range(n):
                out[i, j] = 0.0
            for t in range(k):
                ait = a[i, t]
                for j in range(n):
                    out[i, j] = out[i, j] + ait * b[t, j]
        return out

    def mm_numba(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = np.empty((a.shape[0], b.shape[1]), dtype=a.dtype)
        _mm_ikj(a, b, out)
        return out

    return mm_numba


_MM_IMPL = None
_MM_NAME = None


def _probe(candidate) -> bool:
    rng = np.random.default_rng(12345)
    for shape in ((5, 7, 6), (1, 3, 4)):
        m, k, n = shape
        for dtype in (np.float64, np.float32):
            a = rng.standard_normal((m, k)).astype(dtype)
            b = rng.standard_normal((k, n)).astype(dtype)
            if not np.array_equal(candidate(a, b), _mm_kloop(a, b)):
                return False
    return True


def _select_mm():
    global _MM_IMPL, _MM_NAME
    if _MM_IMPL is not None:
        return _MM_IMPL
    try:
        candidate = _build_numba_mm()
        if _probe(candidate):
            _MM_IMPL, _MM_NAME = candidate, "numba"
            return _MM_IMPL
    except Exception:  # numba missing or failed to compile
        pass
    if _probe(_mm_einsum):
        _MM_IMPL, _MM_NAME = _mm_einsum, "einsum"
    else:
        _MM_IMPL, _MM_NAME = _mm_kloop, "kloop"
    return _MM_IMPL


def matmul_backend() -> str:
    """Name of the selected matmul backend (numba, einsum, or kloop)."""
    _select_mm()
    return _MM_NAME


def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Raw ndarray matrix product with ascending-k accumulation."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul requires (M,K)x(K,N); got {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"matmul operands must share dtype, got {a.dtype} and {b.dtype}")
    impl = _select_mm()
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    return impl(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors; see :func:`mm` for semantics."""
    return _new(mm(a.array, b.array))


# ---------------------------------------------------------------------------
# Softmax


def softmax_rows_nd(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row softmax over unmasked entries (mask True = attendable).

    Masked entries come out exactly 0.  Rows with no attendable entry are
    zero-filled and flagged with :class:`FullyMaskedRowWarning`.
    """
    if mask is not None:
        if mask.shape != x.shape:
            raise ShapeError(f"mask shape {mask.shape} != input shape {x.shape}")
        logits = np.where(mask, x, -np.inf)
    else:
        logits = x
    rowmax = np.max(logits, axis=-1, keepdims=True)
    dead = ~np.isfinite(rowmax)
    if dead.any():
        warnings.warn(
            "softmax encountered fully-masked row(s); returning zeros",
            FullyMaskedRowWarning,
            stacklevel=2,
        )
        rowmax = np.where(dead, 0.0, rowmax)
    e = np.exp(logits - rowmax)
    denom = np.sum(e, axis=-1, keepdims=True)
    denom = np.where(dead, 1.0, denom)
    return e / denom


def softmax_rows(m: Tensor, mask: np.ndarray | None = None) -> Tensor:
    return _new(softmax_rows_nd(m.array, mask))


# ---------------------------------------------------------------------------
# Movement ops


def pad(m: Tensor, spec) -> Tensor:
    """Zero-pad; `spec` is a (before, after) pair per axis."""
    spec = tuple((int(b), int(a)) for b, a in spec)
    if len(spec) != m.ndim:
        raise ShapeError(f"pad spec has {len(spec)} axes for a rank-{m.ndim} tensor")
    for before, after in spec:
        if before < 0 or after < 0:
            raise BoundsError(f"negative pad width in {spec}")
    return _new(np.pad(m.array, spec))


def reshape(m: Tensor, new_shape) -> Tensor:
    """Reinterpret the row-major buffer under a new shape (zero-copy)."""
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape, dtype=np.int64)) != m.array.size:
        raise ShapeError(f"cannot reshape {m.shape} ({m.array.size} elems) to {new_shape}")
    return Tensor(m.array.reshape(new_shape))


def slice_(m: Tensor, ranges) -> Tensor:
    """Copy the sub-block given by (start, stop) per axis; strict bounds."""
    ranges = tuple((int(s), int(e)) for s, e in ranges)
    if len(ranges) != m.ndim:
        raise ShapeError(f"slice has {len(ranges)} axes for a rank-{m.ndim} tensor")
    for (start, stop), extent in zip(ranges, m.shape):
        if not (0 <= start <= stop <= extent):
            raise BoundsError(f"slice {ranges} out of range for shape {m.shape}")
    idx = tuple(slice(s, e) for s, e in ranges)
    return _new(np.ascontiguousarray(m.array[idx]))


# ---------------------------------------------------------------------------
# Elementwise helpers used by the kernels


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add requires equal shapes, got {a.shape} and {b.shape}")
    return _new(a.array + b.array)


def divide_scalar(a: Tensor, s: float) -> Tensor:
    return _new(a.array / s)
