"""Model equations: cumax lower bounds, MLGRU (base / rc / grc), GLU, blocks, full LM."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .fused import Reservoir, recurrent_scan
from .reservoir import VARIANTS, SharedFixed
from .ternary import QuantizedLinear, TernaryMatrix

BYTE_VOCAB = 257  # 256 byte values plus a pad id


def glu_width(d: int) -> int:
    """ceil(8d/3) rounded up to a multiple of 8."""
    return -(-math.ceil(8 * d / 3) // 8) * 8


@dataclass
class ModelConfig:
    d: int = 64
    n_layers: int = 2
    vocab: int = BYTE_VOCAB
    glu_dim: int = 0  # 0 selects glu_width(d)
    context_size: int = 128
    variant: str = "base"
    sparsity: float = 0.85
    seed: int = 0
    reservoir_seed: int = 1234
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.glu_dim == 0:
            self.glu_dim = glu_width(self.d)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("d", "vocab", "glu_dim", "context_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.glu_dim < self.d:
            raise ValueError(f"glu_dim ({self.glu_dim}) must be >= d ({self.d})")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError(f"sparsity must lie in [0, 1), got {self.sparsity}")


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    return ad.rms_normalize(x, gain, eps)


def cumax(gamma_logits) -> Tensor:
    """Per-layer lower bounds: column softmax over layers, cumulative sum, minus the first row."""
    gamma_logits = ad.as_tensor(gamma_logits)
    p = ad.softmax_axis0(gamma_logits)
    first = ad.repeat_rows(ad.row(p, 0), gamma_logits.shape[0])
    gam = ad.sub(ad.cumsum_axis0(p), first)
    # 1 - p_1 rounds to exactly 1 once p_1 drops below the dtype's resolution,
    # which would freeze the state; keep the bound strictly below 1
    cap = np.nextafter(gam.data.dtype.type(1), gam.data.dtype.type(0))
    keep = gam.data <= cap
    if keep.all():
        return gam
    return ad.record("cap_below_one", np.minimum(gam.data, cap), (gam,), lambda g: (g * keep,))


class MLGRU:
    """Token mixer. Which gate matrices are trainable depends on the variant:

    base: W_f, W_c, W_g, W_o all trainable
    rc:   W_c is the shared fixed matrix and a shared sparse reservoir feeds h_{t-1} into c_t
    grc:  as rc, and W_f, W_g are shared fixed too
    """

    def __init__(self, d: int, variant: str, shared: SharedFixed | None,
                 rng: np.random.Generator, name: str = "mlgru"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if (variant == "base") != (shared is None):
            raise ValueError(f"variant {variant!r} {'needs' if shared is None else 'takes no'} shared fixed matrices")
        self.d, self.variant, self.shared = d, variant, shared

        def gate(key: str, fixed: TernaryMatrix | None) -> QuantizedLinear:
            if fixed is None:
                return QuantizedLinear(d, d, bias=True, rng=rng, name=f"{name}.{key}")
            if fixed.shape != (d, d):
                raise ValueError(f"shared {key} has shape {fixed.shape}, expected {(d, d)}")
            bias = Parameter(np.zeros(d), name=f"{name}.{key}.bias")
            return QuantizedLinear.fixed(fixed, bias=bias, name=f"{name}.{key}")

        grc = variant == "grc"
        self.w_f = gate("w_f", shared.w_f if grc else None)
        self.w_c = gate("w_c", shared.w_c if shared is not None else None)
        self.w_g = gate("w_g", shared.w_g if grc else None)
        self.w_o = QuantizedLinear(d, d, bias=True, rng=rng, name=f"{name}.w_o")
        self.reservoir = Reservoir(shared.w_r, shared.lambda_max) if shared is not None else None

    def linears(self) -> list[QuantizedLinear]:
        return [self.w_f, self.w_c, self.w_g, self.w_o]


def _reservoir_term(h: Tensor, reservoir: Reservoir) -> Tensor:
    return ad.record("reservoir", reservoir.apply(h.data), (h,), lambda g: (reservoir.apply_transpose(g),))


def mlgru_step(x_t, h_prev, params: MLGRU, gamma_k) -> tuple[Tensor, Tensor]:
    """One timestep on (..., d) inputs. Returns (o_t, h_t)."""
    x_t, h_prev, gamma_k = ad.as_tensor(x_t), ad.as_tensor(h_prev), ad.as_tensor(gamma_k)
    f = ad.sigmoid(params.w_f(x_t))
    fp = ad.add_rowvec(ad.mul_rowvec(f, ad.sub(1.0, gamma_k)), gamma_k)
    z = params.w_c(x_t)
    if params.reservoir is not None:
        z = ad.add(z, _reservoir_term(h_prev, params.reservoir))
    c = ad.silu(z)
    h = ad.add(ad.mul(fp, h_prev), ad.mul(ad.sub(1.0, fp), c))
    g = ad.sigmoid(params.w_g(x_t))
    o = params.w_o(ad.mul(g, h))
    return o, h


class GLU:
    def __init__(self, d: int, width: int, rng: np.random.Generator, name: str = "glu"):
        if width < d:
            raise ValueError(f"GLU width {width} must be >= d {d}")
        self.w_s = QuantizedLinear(d, width, rng=rng, name=f"{name}.w_s")
        self.w_u = QuantizedLinear(d, width, rng=rng, name=f"{name}.w_u")
        self.w_q = QuantizedLinear(width, d, rng=rng, name=f"{name}.w_q")

    def linears(self) -> list[QuantizedLinear]:
        return [self.w_s, self.w_u, self.w_q]


def glu_forward(chi, params: GLU) -> Tensor:
    chi = ad.as_tensor(chi)
    s = params.w_s(chi)
    u = params.w_u(chi)
    return params.w_q(ad.mul(ad.silu(s), u))


class Block:
    """Pre-norm residual block: a = x + MLGRU(norm(x)); y = a + GLU(norm(a))."""

    def __init__(self, config: ModelConfig, shared: SharedFixed | None, rng: np.random.Generator, index: int):
        d = config.d
        name = f"blocks.{index}"
        self.eps = config.norm_eps
        self.norm1 = Parameter(np.ones(d), name=f"{name}.norm1")
        self.norm2 = Parameter(np.ones(d), name=f"{name}.norm2")
        self.mlgru = MLGRU(d, config.variant, shared, rng, name=f"{name}.mlgru")
        self.glu = GLU(d, config.glu_dim, rng, name=f"{name}.glu")

    def linears(self) -> list[QuantizedLinear]:
        return self.mlgru.linears() + self.glu.linears()

    def parameters(self) -> list[Parameter]:
        out = [self.norm1, self.norm2]
        for lin in self.linears():
            out.extend(lin.parameters())
        return out


def block_forward(x_seq, block: Block, gamma_k, h0: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Run a block over a (B, T, d) sequence (h_0 = 0 unless given). Returns (y_seq, h_T)."""
    x_seq, gamma_k = ad.as_tensor(x_seq), ad.as_tensor(gamma_k)
    m = block.mlgru
    xn = rmsnorm(x_seq, block.norm1, block.eps)
    h_seq = recurrent_scan(m.w_f(xn), m.w_c(xn), gamma_k, m.reservoir, h0=h0)
    g = ad.sigmoid(m.w_g(xn))
    a = ad.add(x_seq, m.w_o(ad.mul(g, h_seq)))
    y = ad.add(a, glu_forward(rmsnorm(a, block.norm2, block.eps), block.glu))
    return y, h_seq.data[:, -1]


class MatMulFreeLM:
    """Embedding, N blocks, final RMSNorm and a ternary head."""

    def __init__(self, config: ModelConfig, shared: SharedFixed | None = None):
        """``shared`` overrides the seeded fixed matrices (used when loading checkpoints)."""
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, n = config.d, config.n_layers
        if shared is None and config.variant != "base" and n > 0:
            shared = SharedFixed.create(d, config.variant, config.sparsity, config.reservoir_seed)
        self.shared = shared
        self.embedding = Parameter(rng.standard_normal((config.vocab, d)), name="embedding")
        self.gamma_logits = Parameter(np.zeros((n, d)), name="gamma_logits")
        self.blocks = [Block(config, self.shared, rng, k) for k in range(n)]
        self.final_norm = Parameter(np.ones(d), name="final_norm")
        self.head = QuantizedLinear(d, config.vocab, rng=rng, name="head")
        self._gamma_cache: np.ndarray | None = None

    # --- parameter views -------------------------------------------------
    def linears(self) -> list[QuantizedLinear]:
        out = [lin for b in self.blocks for lin in b.linears()]
        return out + [self.head]

    def parameters(self) -> list[Parameter]:
        out = [self.embedding, self.gamma_logits]
        for b in self.blocks:
            out.extend(b.parameters())
        out.append(self.final_norm)
        out.extend(self.head.parameters())
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def fixed_matrices(self) -> list[TernaryMatrix]:
        """Distinct stored frozen matrices, in first-use order."""
        seen: dict[int, TernaryMatrix] = {}
        for b in self.blocks:
            for lin in b.mlgru.linears():
                if lin.frozen:
                    seen.setdefault(id(lin.cached), lin.cached)
            if b.mlgru.reservoir is not None:
                seen.setdefault(id(b.mlgru.reservoir.matrix), b.mlgru.reservoir.matrix)
        return list(seen.values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # --- lower bounds -----------------------------------------------------
    def lower_bounds(self) -> Tensor:
        """cumax(Gamma), recomputed on the tape for training."""
        return cumax(self.gamma_logits)

    def precompute_lower_bounds(self) -> np.ndarray:
        """Compute gamma once and keep it for inference."""
        if ad.active_tape() is not None:
            raise RuntimeError("precompute_lower_bounds is for inference, outside a tape")
        self._gamma_cache = cumax(self.gamma_logits).data.copy() if self.config.n_layers else np.zeros((0, self.config.d))
        return self._gamma_cache

    def invalidate_lower_bounds(self) -> None:
        self._gamma_cache = None

    # --- forward ----------------------------------------------------------
    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if not np.issubdtype(tokens.dtype, np.integer):
            raise ValueError("token ids must be integers")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab):
            raise ValueError(f"token id out of range [0, {self.config.vocab})")
        return tokens

    def forward(self, tokens) -> Tensor:
        """Logits of shape (B, T, vocab) (or (T, vocab) for a 1-D token array)."""
        tokens = self._check_tokens(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
        x = ad.embed(self.embedding, tokens)
        if self.blocks:
            if ad.active_tape() is None and self._gamma_cache is not None:
                gammas = [Tensor(g) for g in self._gamma_cache]
            else:
                gam = self.lower_bounds()
                gammas = [ad.row(gam, k) for k in range(len(self.blocks))]
            for block, gk in zip(self.blocks, gammas):
                x, _ = block_forward(x, block, gk)
        logits = self.head(rmsnorm(x, self.final_norm, self.config.norm_eps))
        if squeeze:
            logits = _squeeze0(logits)
        return logits

    __call__ = forward

    def loss(self, inputs, targets) -> Tensor:
        return ad.cross_entropy(self.forward(inputs), np.asarray(targets))

    # --- incremental inference -------------------------------------------
    def init_state(self, batch: int = 1) -> list[np.ndarray]:
        dtype = self.embedding.data.dtype
        return [np.zeros((batch, self.config.d), dtype=dtype) for _ in self.blocks]

    def step(self, token_ids, state: list[np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
        """Advance every layer by one token using the precomputed lower bounds."""
        token_ids = self._check_tokens(np.atleast_1d(token_ids))
        if self._gamma_cache is None:
            self.precompute_lower_bounds()
        x = ad.embed(self.embedding, token_ids)
        new_state = []
        for block, gk, h in zip(self.blocks, self._gamma_cache, state):
            xn = rmsnorm(x, block.norm1, block.eps)
            o, h_new = mlgru_step(xn, Tensor(h), block.mlgru, Tensor(gk))
            a = ad.add(x, o)
            x = ad.add(a, glu_forward(rmsnorm(a, block.norm2, block.eps), block.glu))
            new_state.append(h_new.data)
        logits = self.head(rmsnorm(x, self.final_norm, self.config.norm_eps))
        return logits.data, new_state


def _squeeze0(t: Tensor) -> Tensor:
    return ad.record("squeeze", t.data[0], (t,), lambda g: (g[None],))


def count_trainable(model: MatMulFreeLM) -> int:
    return sum(p.size for p in model.trainable_parameters())


def storage_walk(model: MatMulFreeLM) -> list[tuple[str, str, int, bool]]:
    """Every distinct allocated parameter tensor: (name, kind, size, trainable).

    kind is "ternary" for matrices stored as trits, "fullprec" otherwise.
    Trainable linears count their latent as ternary (what inference stores).
    """
    ternary_latents = {id(lin.latent) for lin in model.linears() if lin.latent is not None}
    out = []
    seen: set[int] = set()
    for p in model.parameters():
        if id(p) in seen:
            continue
        seen.add(id(p))
        out.append((p.name, "ternary" if id(p) in ternary_latents else "fullprec", p.size, p.trainable))
    names = {}
    if model.shared is not None:
        names = {id(m): f"shared.{k}" for k, m in model.shared.matrices().items()}
    for m in model.fixed_matrices():
        out.append((names.get(id(m), "fixed"), "ternary", m.rows * m.cols, False))
    return out

