"""Ternary weights: absmean quantization, 2-bit packing and add/sub-only matmul."""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

# 2-bit codes, four trits per byte, first trit in the lowest bits
CODE_ZERO, CODE_POS, CODE_NEG, CODE_INVALID = 0b00, 0b01, 0b10, 0b11
SCALE_EPS = 1e-8
LOG2_3 = math.log2(3.0)

_local = threading.local()


def pack_trits(trits: np.ndarray) -> np.ndarray:
    """Pack values in {-1, 0, +1} into bytes (row-major, little-endian within a byte)."""
    flat = np.asarray(trits).reshape(-1)
    if flat.size and (flat.min() < -1 or flat.max() > 1 or not np.array_equal(flat, np.round(flat))):
        raise ValueError("trits must be -1, 0 or +1")
    codes = np.zeros(-(-flat.size // 4) * 4, dtype=np.uint8)
    codes[: flat.size][flat == 1] = CODE_POS
    codes[: flat.size][flat == -1] = CODE_NEG
    c = codes.reshape(-1, 4)
    return (c[:, 0] | (c[:, 1] << 2) | (c[:, 2] << 4) | (c[:, 3] << 6)).astype(np.uint8)


def unpack_trits(packed: np.ndarray, count: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.size * 4 < count:
        raise ValueError(f"{packed.size} bytes cannot hold {count} trits")
    codes = np.stack([(packed >> s) & 0b11 for s in (0, 2, 4, 6)], axis=1).reshape(-1)[:count]
    if (codes == CODE_INVALID).any():
        raise ValueError("packed trits contain the forbidden code 0b11")
    out = np.zeros(count, dtype=np.int8)
    out[codes == CODE_POS] = 1
    out[codes == CODE_NEG] = -1
    return out


class TernaryMatrix:
    """Immutable rows x cols matrix of trits with a positive scale."""

    __slots__ = ("rows", "cols", "packed", "scale", "_trits", "_planes", "_columns")

    def __init__(self, rows: int, cols: int, packed: np.ndarray, scale: float, _trits: np.ndarray | None = None):
        if rows < 1 or cols < 1:
            raise ValueError(f"extents must be positive, got {rows}x{cols}")
        if not scale > 0:
            raise ValueError(f"scale must be positive, got {scale}")
        packed = np.array(packed, dtype=np.uint8)
        if _trits is None:
            trits = unpack_trits(packed, rows * cols).reshape(rows, cols)
        else:
            trits = np.array(_trits, dtype=np.int8)
        packed.setflags(write=False)
        trits.setflags(write=False)
        self.rows, self.cols = rows, cols
        self.packed = packed
        self.scale = float(scale)
        self._trits = trits
        self._planes: dict = {}
        self._columns = None

    @classmethod
    def from_trits(cls, trits: np.ndarray, scale: float = 1.0) -> TernaryMatrix:
        trits = np.asarray(trits)
        if trits.ndim != 2:
            raise ValueError(f"trits must be 2-D, got shape {trits.shape}")
        return cls(trits.shape[0], trits.shape[1], pack_trits(trits), scale, _trits=trits)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def trits(self) -> np.ndarray:
        return self._trits

    def dequantize(self, dtype=np.float64) -> np.ndarray:
        dtype = np.dtype(dtype).type
        return self._trits.astype(dtype) * dtype(self.scale)

    def signs(self, dtype) -> np.ndarray:
        """The trits as a {-1, 0, +1} float matrix."""
        key = ("signs", np.dtype(dtype))
        if key not in self._planes:
            self._planes[key] = self._trits.astype(dtype)
        return self._planes[key]

    def planes(self, dtype) -> tuple[np.ndarray, np.ndarray]:
        """0/1 indicator planes for the +1 and -1 entries."""
        key = np.dtype(dtype)
        if key not in self._planes:
            self._planes[key] = ((self._trits == 1).astype(dtype), (self._trits == -1).astype(dtype))
        return self._planes[key]

    def column_indices(self) -> list[tuple[np.ndarray, np.ndarray]]:
        if self._columns is None:
            self._columns = [
                (np.flatnonzero(self._trits[:, j] == 1), np.flatnonzero(self._trits[:, j] == -1))
                for j in range(self.cols)
            ]
        return self._columns

    def nonzero_fraction(self) -> float:
        return float(np.count_nonzero(self._trits)) / self._trits.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, TernaryMatrix):
            return NotImplemented
        return (self.shape == other.shape and self.scale == other.scale
                and np.array_equal(self.packed, other.packed))

    __hash__ = object.__hash__

    def __repr__(self) -> str:
        return f"TernaryMatrix({self.rows}x{self.cols}, scale={self.scale:.4g})"


def quantize_absmean(w: np.ndarray) -> TernaryMatrix:
    """Scale by the mean magnitude, round, clip to {-1, 0, +1}."""
    w = np.asarray(w)
    if w.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise ValueError("cannot quantize non-finite weights")
    beta = max(float(np.mean(np.abs(w), dtype=np.float64)), SCALE_EPS)
    trits = np.clip(np.round(w / beta), -1, 1).astype(np.int8)
    return TernaryMatrix.from_trits(trits, beta)


def ternary_matmul(x: np.ndarray, t: TernaryMatrix, method: str = "signplane") -> np.ndarray:
    """``x @ (scale * trits)``; the scale is applied once to the accumulated sums.

    ``method="addsub"`` is the reference path: for each output column it adds the
    inputs under +1 trits and subtracts those under -1 trits, skipping zeros.
    ``method="bitplane"`` selects with 0/1 indicator planes, one pass per sign.
    ``method="signplane"`` (default) does one BLAS pass against the {-1, 0, +1}
    matrix; on a CPU this is the fastest way to get the same sums.
    """
    x = np.asarray(x)
    if x.shape[-1] != t.rows:
        raise ValueError(f"ternary_matmul: inner extents differ, {x.shape} vs {t.shape}")
    x2 = x.reshape(-1, t.rows)
    if not np.issubdtype(x2.dtype, np.floating):
        x2 = x2.astype(np.float64)
    dtype = x2.dtype.type
    if method == "signplane":
        y = x2 @ t.signs(dtype)
    elif method == "bitplane":
        plus, minus = t.planes(dtype)
        y = x2 @ plus - x2 @ minus
    elif method == "addsub":
        y = np.zeros((x2.shape[0], t.cols), dtype=dtype)
        for j, (pos, neg) in enumerate(t.column_indices()):
            if pos.size:
                y[:, j] += x2[:, pos].sum(axis=1)
            if neg.size:
                y[:, j] -= x2[:, neg].sum(axis=1)
    else:
        raise ValueError(f"unknown ternary_matmul method {method!r}")
    y *= dtype(t.scale)
    return y.reshape(x.shape[:-1] + (t.cols,))


def ste_backward(grad_out: np.ndarray, x: np.ndarray, t: TernaryMatrix,
                 latent: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Straight-through gradients for ``y = x @ quantize(latent)``.

    The quantizer is treated as the identity inside its clip range
    (``|latent / scale| <= 1``) and as a constant outside it.
    """
    if latent is None:
        raise RuntimeError("frozen ternary weights have no latent to differentiate")
    grad_x = (grad_out @ t.signs(grad_out.dtype).T) * grad_out.dtype.type(t.scale)
    g2 = grad_out.reshape(-1, t.cols)
    x2 = x.reshape(-1, t.rows)
    grad_latent = x2.T @ g2
    grad_latent[np.abs(latent / t.scale) > 1.0] = 0.0
    return grad_x, grad_latent


def trit_memory_bits(n: int) -> float:
    """Information content of ``n`` trits, used for memory reporting."""
    if n < 0:
        raise ValueError("count must be non-negative")
    return n * LOG2_3


def quantization_bypassed() -> bool:
    return getattr(_local, "bypass", False)


@contextlib.contextmanager
def bypass_quantization() -> Iterator[None]:
    """Run trainable linears on their latent weights directly (for gradient checks)."""
    prev = quantization_bypassed()
    _local.bypass = True
    try:
        yield
    finally:
        _local.bypass = prev


def xavier_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


class QuantizedLinear:
    """``y = x (*) W + b`` with ternary ``W``.

    Trainable linears requantize their latent weights on every call; frozen ones
    wrap a fixed :class:`TernaryMatrix` that never changes after construction.
    """

    def __init__(self, rows: int, cols: int, *, bias: bool = False,
                 rng: np.random.Generator | None = None, name: str = ""):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.rows, self.cols = rows, cols
        self.frozen = False
        self.latent: Parameter | None = Parameter(xavier_uniform(rng, rows, cols), name=f"{name}.latent")
        self.bias = Parameter(np.zeros(cols), name=f"{name}.bias") if bias else None
        self.cached = quantize_absmean(self.latent.data)

    @classmethod
    def fixed(cls, t: TernaryMatrix, *, bias: Parameter | None = None, name: str = "") -> QuantizedLinear:
        self = cls.__new__(cls)
        self.name = name
        self.rows, self.cols = t.shape
        self.frozen = True
        self.latent = None
        self.bias = bias
        self.cached = t
        return self

    def refresh(self) -> TernaryMatrix:
        if not self.frozen:
            self.cached = quantize_absmean(self.latent.data)
        return self.cached

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.latent, self.bias) if p is not None]

    def ste_backward(self, grad_out: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.frozen:
            raise RuntimeError(f"{self.name or 'linear'} is frozen and registers no backward")
        return ste_backward(grad_out, x, self.cached, self.latent.data)

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.rows:
            raise ValueError(f"{self.name or 'linear'}: input width {x.shape[-1]} != {self.rows}")
        if self.frozen:
            t = self.cached
            y = _frozen_matmul(x, t)
        elif quantization_bypassed():
            y = ad.matmul(x, self.latent)
        else:
            t = self.refresh()
            xd, latent = x.data, self.latent.data

            def bw(g):
                return ste_backward(g, xd, t, latent)

            y = ad.record("ternary_linear", ternary_matmul(xd, t), (x, self.latent), bw)
        if self.bias is not None:
            y = ad.add_rowvec(y, self.bias)
        return y

    def __repr__(self) -> str:
        kind = "frozen" if self.frozen else "trainable"
        return f"QuantizedLinear({self.name!r}, {self.rows}x{self.cols}, {kind})"


def _frozen_matmul(x: Tensor, t: TernaryMatrix) -> Tensor:
    xd = x.data

    def bw(g):
        return (g @ t.dequantize(g.dtype).T,)

    return ad.record("ternary_linear_fixed", ternary_matmul(xd, t), (x,), bw)
