"""Fixed shared ternary matrices, spectral radius estimation and an LI-ESN cell."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ternary import TernaryMatrix, quantize_absmean, ternary_matmul

VARIANTS = ("base", "rc", "grc")


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, estimate: float):
        super().__init__(f"{message} (last estimate {estimate:.6g})")
        self.estimate = estimate


@dataclass(frozen=True)
class ReservoirSpec:
    dim: int
    sparsity: float = 0.85
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"reservoir dim must be >= 1, got {self.dim}")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError(f"sparsity must lie in [0, 1), got {self.sparsity}")


def gen_sparse_ternary(spec: ReservoirSpec) -> TernaryMatrix:
    """Each entry is 0 with probability ``sparsity``, otherwise +1 or -1 with equal odds."""
    rng = np.random.default_rng(spec.seed)
    d = spec.dim
    keep = rng.random((d, d)) >= spec.sparsity
    signs = np.where(rng.random((d, d)) < 0.5, -1, 1)
    return TernaryMatrix.from_trits((keep * signs).astype(np.int8), 1.0)


def gen_fixed_dense_ternary(d: int, seed: int) -> TernaryMatrix:
    """Xavier-uniform d x d sample, absmean-quantized."""
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    rng = np.random.default_rng(seed)
    bound = math.sqrt(6.0 / (2 * d))
    return quantize_absmean(rng.uniform(-bound, bound, size=(d, d)))


# two primes below 2**20: products stay below 2**40 and row sums of up to 2**13
# of them below 2**53, so float64 BLAS does the modular arithmetic exactly
_NILPOTENCY_PRIMES = (1048573, 1048571)


def _integer_matrix(w) -> np.ndarray | None:
    if isinstance(w, TernaryMatrix):
        return w.trits.astype(np.float64)
    a = np.asarray(w, dtype=np.float64)
    if np.all(np.isfinite(a)) and np.all(a == np.round(a)):
        return a
    return None


def is_nilpotent_integer(a: np.ndarray) -> bool:
    """Exact test of ``A^d == 0`` for an integer matrix, by squaring modulo two primes.

    Floating-point iteration cannot settle this: a nilpotent Jordan chain of
    length m looks like a radius of roughly eps^(1/m) in float64.
    """
    d = a.shape[0]
    if d > 2**13:
        raise ValueError("exact nilpotency test supports d <= 8192")
    for p in _NILPOTENCY_PRIMES:
        m = np.mod(a, p)
        power = 1
        while power < d and m.any():
            m = np.mod(m @ m, p)
            power *= 2
        if m.any():
            return False
    return True


def _pow2(x: float) -> float:
    # rescaling by a power of two is exact
    return math.ldexp(1.0, math.frexp(x)[1])


def spectral_radius(w, tol: float = 1e-3, max_iter: int = 200_000, restarts: int = 3, seed: int = 0,
                    min_iter: int = 16, max_squarings: int = 8) -> float:
    """Largest eigenvalue magnitude via Gelfand's formula, ``||W^k v||^(1/k)``.

    W is first raised to a power P = W^K by a few squarings, which sharpens
    the gap between eigenvalues of nearby magnitude by a factor K. Integer
    matrices are squared only while the products stay exact in float64;
    rounding a matrix with a defective top eigenvalue would shift it by about
    eps^(1/m). Then ``restarts`` random vectors are multiplied by P and
    renormalized every step while the log norms are summed. At k = 2 * min_iter,
    4 * min_iter, ... the growth rate over the window (k/2, k] is read off, which
    drops the start-up transient, and the largest over the restarts is the
    estimate. It is returned once two consecutive windows each agree with their
    predecessor to ``tol / 10``. ``max_iter`` bounds the matrix-vector products.

    Integer inputs (every ternary matrix) are checked for nilpotency exactly.
    A nilpotent matrix raises ``ValueError``.
    """
    a = w.dequantize(np.float64) if isinstance(w, TernaryMatrix) else np.array(w, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"spectral radius needs a square matrix, got {a.shape}")
    d = a.shape[0]
    if not np.linalg.norm(a) > 0:
        raise ValueError("spectral radius of an all-zero matrix is zero")
    ints = _integer_matrix(w)
    log_scale, power = 0.0, 1
    if ints is not None:
        if is_nilpotent_integer(ints):
            raise ValueError("matrix is nilpotent; spectral radius is zero")
        p = ints
        while power < 2**max_squarings and float(np.abs(p).max()) ** 2 * d <= 2.0**53:
            p = p @ p
            power *= 2
        if isinstance(w, TernaryMatrix):
            log_scale = power * math.log(w.scale)
    else:
        p = a
        for _ in range(max_squarings):
            s = _pow2(np.linalg.norm(p))
            p = p / s
            log_scale += math.log(s)
            p = p @ p
            log_scale *= 2
            power *= 2
            if not p.any():
                raise ValueError("matrix is nilpotent; spectral radius is zero")
    s = _pow2(np.linalg.norm(p))
    p = p / s
    log_scale += math.log(s)

    def radius(log_rate: float) -> float:
        return math.exp((log_scale + log_rate) / power)

    rng = np.random.default_rng(seed)
    v = rng.standard_normal((d, restarts))
    v /= np.linalg.norm(v, axis=0)
    log_growth = np.zeros(restarts)
    window_start = log_growth.copy()
    next_check, prev, agreed, est = min_iter, None, 0, 0.0
    for k in range(1, max_iter + 1):
        v = p @ v
        n = np.linalg.norm(v, axis=0)
        if not n.any():
            raise ValueError("matrix is nilpotent; spectral radius is zero")
        with np.errstate(divide="ignore"):
            log_growth += np.log(n)
        v /= np.where(n > 0, n, 1.0)
        if k == next_check:
            if k > min_iter:
                est = radius(float(np.max(log_growth - window_start)) / (k / 2))
                agreed = agreed + 1 if prev is not None and abs(est - prev) <= 0.1 * tol * est else 0
                if agreed == 2:
                    return est
                prev = est
            window_start = log_growth.copy()
            next_check *= 2
    if prev is None:  # stopped before the first window closed: whole-run rate
        est = radius(float(np.max(log_growth)) / max_iter) if max_iter > 0 else 0.0
    raise ConvergenceError("spectral radius did not stabilize", est)


def draw_reservoir(d: int, sparsity: float, seed: int, max_draws: int = 1000) -> tuple[TernaryMatrix, float]:
    """Sample a sparse reservoir with a positive spectral radius.

    Very small or very sparse draws can be nilpotent (radius 0), which the
    scaling cannot divide by; those are redrawn from the next seed in sequence.
    The radius is rounded to float32 so checkpoints reproduce it exactly.
    """
    for attempt in range(max_draws):
        w_r = gen_sparse_ternary(ReservoirSpec(d, sparsity, seed + attempt))
        if not w_r.trits.any():
            continue
        try:
            return w_r, float(np.float32(spectral_radius(w_r)))
        except ValueError:
            continue
    raise ValueError(f"no reservoir with positive spectral radius in {max_draws} draws (d={d}, sparsity={sparsity})")


@dataclass(frozen=True)
class SharedFixed:
    """The single stored instance of each frozen matrix, shared by every layer."""

    w_c: TernaryMatrix
    w_r: TernaryMatrix
    lambda_max: float
    w_f: TernaryMatrix | None = None
    w_g: TernaryMatrix | None = None

    def __post_init__(self):
        if not self.lambda_max > 0:
            raise ValueError(f"lambda_max must be positive, got {self.lambda_max}")

    @classmethod
    def create(cls, d: int, variant: str, sparsity: float = 0.85, seed: int = 0) -> SharedFixed:
        if variant not in ("rc", "grc"):
            raise ValueError(f"shared fixed matrices exist only for rc/grc, not {variant!r}")
        s_c, s_r, s_f, s_g = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(4))
        w_r, lam = draw_reservoir(d, sparsity, s_r)
        extra = {}
        if variant == "grc":
            extra = {"w_f": gen_fixed_dense_ternary(d, s_f), "w_g": gen_fixed_dense_ternary(d, s_g)}
        return cls(w_c=gen_fixed_dense_ternary(d, s_c), w_r=w_r, lambda_max=lam, **extra)

    def matrices(self) -> dict[str, TernaryMatrix]:
        out = {"w_c": self.w_c, "w_r": self.w_r}
        if self.w_f is not None:
            out["w_f"] = self.w_f
        if self.w_g is not None:
            out["w_g"] = self.w_g
        return out


@dataclass
class LIESNParams:
    w_in: TernaryMatrix
    w_res: TernaryMatrix
    lambda_max: float
    b_c: np.ndarray
    leak: float
    w_out: TernaryMatrix
    b_o: np.ndarray
    radius: float = 1.0  # target spectral radius after scaling


def li_esn_step(x_t: np.ndarray, h_prev: np.ndarray, p: LIESNParams) -> tuple[np.ndarray, np.ndarray]:
    """One step of the ternary leaky-integrator echo state network. Returns (o_t, h_t)."""
    if not p.lambda_max > 0:
        raise ValueError(f"lambda_max must be positive, got {p.lambda_max}")
    if not 0.0 <= p.leak <= 1.0:
        raise ValueError(f"leak must lie in [0, 1], got {p.leak}")
    pre = ternary_matmul(x_t, p.w_in) + ternary_matmul(h_prev, p.w_res) * (p.radius / p.lambda_max) + p.b_c
    c_t = np.tanh(pre)
    h_t = p.leak * h_prev + (1.0 - p.leak) * c_t
    o_t = ternary_matmul(h_t, p.w_out) + p.b_o
    return o_t, h_t
