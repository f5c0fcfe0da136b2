"""Recurrent kernel of the MLGRU token mixer, in two-pass and fused form.

Both traversals take the already-projected gate inputs (``x (*) W_f + b_f`` and
``x (*) W_c + b_c``) and run the per-timestep recurrence

    f_t  = sigmoid(f_pre_t)
    f'_t = gamma + (1 - gamma) * f_t
    c_t  = silu(c_pre_t + h_{t-1} (*) W_r / lambda_max)     # reservoir term only for rc/grc
    h_t  = f'_t * h_{t-1} + (1 - f'_t) * c_t

The two-pass version writes ``f_t`` and the ``c`` buffer to memory in a first
traversal and reads them back in a second; the fused version keeps them in
locals. Memory traffic is counted in size-d vector buffer transfers per
sequence. Reads of the reservoir matrix and ``lambda_max`` are not counted.
"""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, sigmoid_np, silu_np
from .ternary import TernaryMatrix, ternary_matmul

BENCH_COLUMNS = ("d", "T", "variant", "impl", "wall_ns_median", "reads", "writes", "launches")


@dataclass
class TrafficCounter:
    reads: int = 0
    writes: int = 0
    kernel_launches: int = 0

    @property
    def total(self) -> int:
        return self.reads + self.writes

    def __add__(self, other: TrafficCounter) -> TrafficCounter:
        return TrafficCounter(self.reads + other.reads, self.writes + other.writes,
                              self.kernel_launches + other.kernel_launches)


@dataclass(frozen=True)
class Reservoir:
    """Fixed recurrent matrix and the radius it is divided by."""

    matrix: TernaryMatrix
    lambda_max: float

    def __post_init__(self):
        if not self.lambda_max > 0:
            raise ValueError(f"lambda_max must be positive, got {self.lambda_max}")

    def apply(self, h: np.ndarray) -> np.ndarray:
        return ternary_matmul(h, self.matrix) / h.dtype.type(self.lambda_max)

    def apply_transpose(self, g: np.ndarray) -> np.ndarray:
        w = self.matrix.dequantize(g.dtype) / g.dtype.type(self.lambda_max)
        return g @ w.T


def _as_batch(a: np.ndarray) -> tuple[np.ndarray, bool]:
    a = np.asarray(a)
    if a.ndim == 2:
        return a[None], True
    if a.ndim != 3:
        raise ValueError(f"expected (T, d) or (B, T, d), got {a.shape}")
    return a, False


def _prepare(f_pre, c_pre, gamma, h0):
    f_pre, squeeze = _as_batch(f_pre)
    c_pre, _ = _as_batch(c_pre)
    if f_pre.shape != c_pre.shape:
        raise ValueError(f"gate inputs differ in shape: {f_pre.shape} vs {c_pre.shape}")
    b, t, d = f_pre.shape
    gamma = np.asarray(gamma, dtype=f_pre.dtype)
    if gamma.shape != (d,):
        raise ValueError(f"gamma must have shape ({d},), got {gamma.shape}")
    h0 = np.zeros((b, d), dtype=f_pre.dtype) if h0 is None else np.broadcast_to(h0, (b, d)).astype(f_pre.dtype)
    return f_pre, c_pre, gamma, h0, squeeze


def _fused_pass(f_pre, c_pre, gamma, h0, reservoir, keep=False):
    b, t, d = f_pre.shape
    h_seq = np.empty_like(f_pre)
    one_minus_gamma = 1.0 - gamma
    saved_f = np.empty_like(f_pre) if keep else None
    saved_z = np.empty_like(f_pre) if keep else None
    h = h0
    for s in range(t):
        f = sigmoid_np(f_pre[:, s])
        fp = gamma + one_minus_gamma * f
        z = c_pre[:, s] if reservoir is None else c_pre[:, s] + reservoir.apply(h)
        c = silu_np(z)
        h = fp * h + (1.0 - fp) * c
        h_seq[:, s] = h
        if keep:
            saved_f[:, s] = f
            saved_z[:, s] = z
    return h_seq, saved_f, saved_z


def fused_recurrent(f_pre, c_pre, gamma, h0=None, reservoir: Reservoir | None = None):
    """Single traversal; ``f_t`` and ``c_t`` never leave the loop body.

    Returns ``(h_seq, counter)``.
    """
    f_pre, c_pre, gamma, h0, squeeze = _prepare(f_pre, c_pre, gamma, h0)
    b, t, _ = f_pre.shape
    h_seq, _, _ = _fused_pass(f_pre, c_pre, gamma, h0, reservoir)
    # per sequence: gamma and h_0 once, f_pre and c_pre per step; h_t written per step
    counter = TrafficCounter(reads=b * (2 * t + 2), writes=b * t, kernel_launches=1)
    return (h_seq[0] if squeeze else h_seq), counter


def unfused_recurrent(f_pre, c_pre, gamma, h0=None, reservoir: Reservoir | None = None):
    """Reference two-kernel traversal with ``f_t`` / ``c_t`` round trips through memory.

    Kernel 1 applies the gate activation and stores ``f_t`` and the ``c`` buffer
    (``silu(c_pre_t)`` when there is no reservoir; the pre-activation otherwise,
    since the reservoir term needs ``h_{t-1}``). Kernel 2 reloads both and runs
    the state update. Returns ``(h_seq, counter)``.
    """
    f_pre, c_pre, gamma, h0, squeeze = _prepare(f_pre, c_pre, gamma, h0)
    b, t, _ = f_pre.shape
    f_buf = np.empty_like(f_pre)
    c_buf = np.empty_like(c_pre)
    for s in range(t):
        f_buf[:, s] = sigmoid_np(f_pre[:, s])
        c_buf[:, s] = silu_np(c_pre[:, s]) if reservoir is None else c_pre[:, s]
    h_seq = np.empty_like(f_pre)
    one_minus_gamma = 1.0 - gamma
    h = h0
    for s in range(t):
        fp = gamma + one_minus_gamma * f_buf[:, s]
        c = c_buf[:, s] if reservoir is None else silu_np(c_buf[:, s] + reservoir.apply(h))
        h = fp * h + (1.0 - fp) * c
        h_seq[:, s] = h
    counter = TrafficCounter(
        reads=b * (2 * t + (2 * t + 2)),  # kernel 1: f_pre, c_pre; kernel 2: f, c, gamma, h_0
        writes=b * (2 * t + t),           # kernel 1: f, c; kernel 2: h_t
        kernel_launches=2,
    )
    return (h_seq[0] if squeeze else h_seq), counter


def recurrent_scan(f_pre: Tensor, c_pre: Tensor, gamma: Tensor, reservoir: Reservoir | None = None,
                   h0: np.ndarray | None = None) -> Tensor:
    """Differentiable fused recurrence over (B, T, d) inputs, from ``h0`` (default zeros).

    The forward is the fused traversal; activations needed by backward-through-time
    are kept aside. Gradients flow to ``f_pre``, ``c_pre`` and ``gamma``; the
    reservoir and the initial state are constants and receive none.
    """
    fd, cd, gd = f_pre.data, c_pre.data, gamma.data
    if fd.ndim != 3:
        raise ValueError(f"recurrent_scan expects (B, T, d), got {fd.shape}")
    _, _, gd, h0, _ = _prepare(fd, cd, gd, h0)
    h_seq, f_all, z_all = _fused_pass(fd, cd, gd, h0, reservoir, keep=True)

    def bw(g):
        b, t, d = g.shape
        s_z = sigmoid_np(z_all)
        c_all = z_all * s_z
        fp_all = gd + (1.0 - gd) * f_all
        h_prev = np.concatenate([h0[:, None], h_seq[:, :-1]], axis=1)
        dh_all = np.empty_like(g)
        dz_all = np.empty_like(g)
        carry = np.zeros((b, d), dtype=g.dtype)
        for s in range(t - 1, -1, -1):
            dh = g[:, s] + carry
            dh_all[:, s] = dh
            carry = dh * fp_all[:, s]
            if reservoir is not None:
                dz = dh * (1.0 - fp_all[:, s]) * s_z[:, s] * (1.0 + z_all[:, s] * (1.0 - s_z[:, s]))
                dz_all[:, s] = dz
                carry = carry + reservoir.apply_transpose(dz)
        if reservoir is None:
            dz_all = dh_all * (1.0 - fp_all) * s_z * (1.0 + z_all * (1.0 - s_z))
        dfp = dh_all * (h_prev - c_all)
        d_gamma = (dfp * (1.0 - f_all)).sum(axis=(0, 1))
        d_fpre = dfp * (1.0 - gd) * f_all * (1.0 - f_all)
        return d_fpre, dz_all, d_gamma

    return ad.record("recurrent_scan", h_seq, (f_pre, c_pre, gamma), bw)


def bench_recurrent(d: int, T: int, repetitions: int = 5, variant: str = "rc", batch: int = 1,
                    seed: int = 0, sparsity: float = 0.85) -> list[dict]:
    """Time both traversals on random inputs; one row per implementation."""
    from .reservoir import draw_reservoir

    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    rng = np.random.default_rng(seed)
    f_pre = rng.standard_normal((batch, T, d)).astype(np.float32)
    c_pre = rng.standard_normal((batch, T, d)).astype(np.float32)
    gamma = rng.uniform(0, 1, d).astype(np.float32)
    reservoir = None
    if variant != "base":
        w_r, lam = draw_reservoir(d, sparsity, seed)
        reservoir = Reservoir(w_r, lam)
    rows = []
    for impl, fn in (("fused", fused_recurrent), ("unfused", unfused_recurrent)):
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter_ns()
            _, counter = fn(f_pre, c_pre, gamma, reservoir=reservoir)
            times.append(time.perf_counter_ns() - t0)
        rows.append({"d": d, "T": T, "variant": variant, "impl": impl,
                     "wall_ns_median": int(statistics.median(times)), "reads": counter.reads,
                     "writes": counter.writes, "launches": counter.kernel_launches})
    return rows


def bench_csv(rows: list[dict], header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    if header:
        writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()

