"""Fixed feedback matrices for feedback alignment and direct feedback alignment.

All matrices are stored *transposed-ready*: ``values`` has shape
``(n_target, n_source)`` where ``n_target`` is the width of the layer that
receives the error and ``n_source`` the width of the layer that sends it
(``N_i x N_{i+1}`` for FA, ``N_i x N_L`` for DFA). Applying a feedback matrix
to a batch of row errors ``e`` (``B x n_source``) is ``e @ values.T``.

Binary matrices keep one bit per entry, row-major, least significant bit
first within each byte; a set bit means +1, a clear bit -1.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import tensor as T
from .errors import DimensionError, FormatError

RANDOM_SCHEMES = ("random_he", "random_uniform")
SCHEMES = RANDOM_SCHEMES + ("product_eq7", "sign_product_eq9")

DENSE_TAG, PACKED_TAG = 0, 1
_SECTION = struct.Struct("<BII")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True, order="C")
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FeedbackMatrix:
    values: np.ndarray
    origin: str = "random"
    frozen: bool = field(default=True, init=False)

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DimensionError(f"feedback must be rank 2, got {self.values.shape}")
        object.__setattr__(self, "values", _frozen(self.values))

    @property
    def shape(self):
        return self.values.shape

    @property
    def nbytes(self) -> int:
        return self.values.nbytes

    def to_bytes(self) -> bytes:
        r, c = self.shape
        return _SECTION.pack(DENSE_TAG, r, c) + self.values.astype(self.values.dtype.newbyteorder("<")).tobytes()


@dataclass(frozen=True)
class BinaryFeedbackMatrix:
    packed: np.ndarray
    rows: int
    cols: int
    origin: str = "random"

    def __post_init__(self):
        need = packed_size(self.rows, self.cols)
        if self.packed.dtype != np.uint8 or self.packed.size != need:
            raise DimensionError(f"expected {need} packed bytes for {self.rows}x{self.cols}")
        object.__setattr__(self, "packed", _frozen(self.packed))

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nbytes(self) -> int:
        return self.packed.size

    def dense(self, dtype=np.float32) -> np.ndarray:
        """The logical +/-1 matrix."""
        bits = np.unpackbits(self.packed, count=self.rows * self.cols, bitorder="little")
        return (bits.astype(dtype) * 2 - 1).reshape(self.rows, self.cols)

    def negated(self) -> "BinaryFeedbackMatrix":
        flipped = np.unpackbits(self.packed, count=self.rows * self.cols, bitorder="little") ^ 1
        return BinaryFeedbackMatrix(np.packbits(flipped, bitorder="little"), self.rows, self.cols, self.origin)

    def to_bytes(self) -> bytes:
        return _SECTION.pack(PACKED_TAG, self.rows, self.cols) + self.packed.tobytes()


def feedback_from_bytes(buf: bytes, offset: int = 0, dtype=np.float32):
    """Decode one feedback section; returns ``(matrix, new_offset)``."""
    if len(buf) - offset < _SECTION.size:
        raise FormatError("truncated feedback section header")
    tag, rows, cols = _SECTION.unpack_from(buf, offset)
    offset += _SECTION.size
    if tag == DENSE_TAG:
        dt = np.dtype(dtype).newbyteorder("<")
        n = rows * cols * dt.itemsize
        if len(buf) - offset < n:
            raise FormatError(f"dense feedback needs {n} bytes, {len(buf) - offset} left")
        vals = np.frombuffer(buf, dt, rows * cols, offset).astype(dtype).reshape(rows, cols)
        return FeedbackMatrix(vals), offset + n
    if tag == PACKED_TAG:
        n = packed_size(rows, cols)
        if len(buf) - offset < n:
            raise FormatError(f"packed feedback needs {n} bytes, {len(buf) - offset} left")
        packed = np.frombuffer(buf, np.uint8, n, offset).copy()
        return BinaryFeedbackMatrix(packed, rows, cols), offset + n
    raise FormatError(f"unknown feedback tag {tag}")


# -- construction --------------------------------------------------------------

def build_random_feedback(rows: int, cols: int, scheme: str = "random_he", seed=0,
                          dtype=np.float32) -> FeedbackMatrix:
    """I.i.d. random feedback of shape ``rows x cols``.

    ``random_he`` draws N(0, 2/cols); ``random_uniform`` draws U(-a, a) with
    ``a = sqrt(6 / (rows + cols))``. ``seed`` may be an int or a sequence of
    ints (fed to :class:`numpy.random.SeedSequence`).
    """
    if rows < 1 or cols < 1:
        raise DimensionError(f"feedback dimensions must be positive, got {rows}x{cols}")
    rng = np.random.default_rng(seed)
    if scheme == "random_he":
        vals = rng.standard_normal((rows, cols)) * math.sqrt(2.0 / cols)
    elif scheme == "random_uniform":
        a = math.sqrt(6.0 / (rows + cols))
        vals = rng.uniform(-a, a, (rows, cols))
    else:
        raise ValueError(f"unknown random scheme {scheme!r}; choose from {RANDOM_SCHEMES}")
    return FeedbackMatrix(vals.astype(dtype), origin="random")


def build_product_feedback(weights) -> FeedbackMatrix:
    """Feedback equal to the product of a chain of forward weights.

    ``weights`` is ordered from the target layer outwards,
    ``[W_{i+1,i}, W_{i+2,i+1}, ..., W_{L,L-1}]``, each shaped
    ``n_out x n_in``. The product ``D = W_{L,L-1} ... W_{i+1,i}`` is returned
    stored as ``D^T`` so that ``D^T e_L`` equals back-propagating ``e_L``
    through the chain with no intervening derivatives.
    """
    weights = list(weights)
    if not weights:
        raise DimensionError("product feedback needs at least one weight")
    for lo, hi in zip(weights, weights[1:]):
        if hi.ndim != 2 or hi.shape[1] != lo.shape[0]:
            raise DimensionError(f"weights do not compose: {hi.shape} after {lo.shape}")
    prod = weights[0]
    for w in weights[1:]:
        prod = T.matmul(w, prod)
    return FeedbackMatrix(T.transpose(prod), origin="product")


def binarize_sign(m) -> BinaryFeedbackMatrix:
    """Sign of every entry as packed bits; ``sign(0)`` is +1."""
    if isinstance(m, BinaryFeedbackMatrix):
        return m
    vals = m.values if isinstance(m, FeedbackMatrix) else np.asarray(m)
    if vals.ndim != 2:
        raise DimensionError(f"can only binarise rank-2 matrices, got {vals.shape}")
    bits = (vals >= 0).astype(np.uint8).ravel()
    origin = m.origin if isinstance(m, FeedbackMatrix) else "random"
    return BinaryFeedbackMatrix(np.packbits(bits, bitorder="little"), vals.shape[0], vals.shape[1], origin)


# -- application ---------------------------------------------------------------

def _check_apply(shape, e, fprime, what):
    if e.ndim != 2:
        raise DimensionError(f"{what}: error must be B x {shape[1]}, got {e.shape}")
    if e.shape[1] != shape[1]:
        raise DimensionError(f"{what}: feedback {shape} cannot take error {e.shape}")
    if fprime is not None and fprime.shape != (e.shape[0], shape[0]):
        raise DimensionError(
            f"{what}: derivative {fprime.shape} does not match target {(e.shape[0], shape[0])}"
        )


def _project(m: FeedbackMatrix, e):
    return T.matmul(e, T.transpose(m.values.astype(e.dtype, copy=False)))


def fa_error(r: FeedbackMatrix, e_next, fprime=None):
    """``(e_next R^T) ⊙ f'`` with ``R`` shaped ``N_i x N_{i+1}``."""
    _check_apply(r.shape, e_next, fprime, "fa_error")
    out = _project(r, e_next)
    return out if fprime is None else T.hadamard(out, fprime)


def dfa_error(d: FeedbackMatrix, e_last, fprime=None):
    """Error for one layer straight from the output error: ``(e_L D) ⊙ f'``."""
    _check_apply(d.shape, e_last, fprime, "dfa_error")
    out = _project(d, e_last)
    return out if fprime is None else T.hadamard(out, fprime)


def bdfa_error(bm: BinaryFeedbackMatrix, e_last, fprime=None):
    """:func:`dfa_error` for a +/-1 matrix, using additions and subtractions only."""
    _check_apply(bm.shape, e_last, fprime, "bdfa_error")
    e = T.as_tensor(e_last)
    out = np.zeros((e.shape[0], bm.rows), dtype=e.dtype)
    _kernels.sign_matmul_into(e, bm.packed, bm.rows, bm.cols, out)
    T.check_finite(out, "bdfa_error output")
    return out if fprime is None else T.hadamard(out, fprime)


def apply_feedback(m, e, fprime=None):
    if isinstance(m, BinaryFeedbackMatrix):
        return bdfa_error(m, e, fprime)
    return dfa_error(m, e, fprime)


# -- storage accounting ------------------------------------------------------------

def packed_size(rows: int, cols: int) -> int:
    return (rows * cols + 7) // 8


def packed_size_bytes(bm: BinaryFeedbackMatrix) -> int:
    return packed_size(bm.rows, bm.cols)


def dense_size_bytes(rows: int, cols: int, precision="float32") -> int:
    return rows * cols * np.dtype(precision).itemsize
