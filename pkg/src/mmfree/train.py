"""Training loop, evaluation, greedy generation and model/checkpoint conversion."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .data import PAD_ID, load_tokens, sample_batch, tokenize_bytes
from .layers import MatMulFreeLM, ModelConfig
from .reservoir import SharedFixed

METRIC_COLUMNS = ("step", "lr", "loss", "tokens_per_s", "grad_buffers")
ADAM_BETAS = (0.9, 0.95)
ADAM_EPS = 1e-8
LR_REFERENCE_BATCH = 256
DEFAULT_BASE_LR = 0.01 / math.sqrt(8)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 32
    total_steps: int = 2000
    base_lr: float = DEFAULT_BASE_LR
    warmup_steps: int = -1  # -1: 1% of total_steps
    data_seed: int = 0  # batch order; a plain `seed` key sets this and the model seed
    train_data: str = ""
    eval_data: str = ""
    checkpoint_interval: int = 0  # 0 disables periodic checkpoints
    grad_clip: float = 1.0
    smoothing: int = 50

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint_interval must be >= 0")

    @property
    def warmup(self) -> int:
        if self.warmup_steps >= 0:
            return self.warmup_steps
        return max(1, round(0.01 * self.total_steps)) if self.total_steps else 0

    @property
    def peak_lr(self) -> float:
        return self.base_lr * math.sqrt(self.batch_size / LR_REFERENCE_BATCH)


# --- configuration text ----------------------------------------------------

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"model"}


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str, overrides: dict | None = None) -> tuple[TrainConfig, dict[str, str]]:
    """Parse ``key = value`` lines. Returns the config and any ``state.*`` entries."""
    model_kw, train_kw, state = {}, {}, {}
    defaults_m, defaults_t = ModelConfig(), TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key.startswith("state."):
            state[key[6:]] = raw
        elif key == "seed":
            model_kw["seed"] = train_kw["data_seed"] = _coerce(key, raw, 0)
        elif key in _MODEL_KEYS:
            model_kw[key] = _coerce(key, raw, getattr(defaults_m, key))
        elif key in _TRAIN_KEYS:
            train_kw[key] = _coerce(key, raw, getattr(defaults_t, key))
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "seed":
            train_kw["data_seed"] = value
        (model_kw if key in _MODEL_KEYS else train_kw)[key] = value
    return TrainConfig(model=ModelConfig(**model_kw), **train_kw), state


def load_config(path: str | Path | None, overrides: dict | None = None) -> TrainConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return parse_config_text(text, overrides)[0]


def config_to_text(config: TrainConfig, state: dict | None = None) -> str:
    def fmt(v) -> str:
        return repr(v) if isinstance(v, float) else str(v)

    lines = [f"{f.name} = {fmt(getattr(config.model, f.name))}" for f in fields(ModelConfig)]
    lines += [f"{f.name} = {fmt(getattr(config, f.name))}" for f in fields(TrainConfig) if f.name != "model"]
    lines += [f"state.{k} = {v}" for k, v in (state or {}).items()]
    return "\n".join(lines) + "\n"


# --- optimisation ----------------------------------------------------------

def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay to 0.1 x peak at ``total_steps``."""
    peak, warm, total = config.peak_lr, config.warmup, config.total_steps
    floor = 0.1 * peak
    if warm and step <= warm:
        return peak * step / warm
    if total <= warm:
        return floor
    progress = min(1.0, (step - warm) / (total - warm))
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, params: list[ad.Parameter], betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.params = [p for p in params if p.trainable]
        self.betas, self.eps = betas, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for p in self.params:
            if p.grad is None:
                continue
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad**2
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: list[ad.Parameter], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# --- checkpoints -----------------------------------------------------------

def to_checkpoint(model: MatMulFreeLM, config: TrainConfig, optim: Adam | None = None, step: int = 0):
    state = {"step": step, "adam_t": optim.t if optim else 0}
    data = ckpt_io.CheckpointData(config_to_text(config, state))
    for p in model.parameters():
        data.tensors[p.name] = p.data
    if optim is not None:
        for name in optim.m:
            data.tensors[f"adam.m.{name}"] = optim.m[name]
            data.tensors[f"adam.v.{name}"] = optim.v[name]
    if model.shared is not None:
        data.tensors["shared.lambda_max"] = np.array([model.shared.lambda_max])
        for key, t in model.shared.matrices().items():
            data.trits[f"shared.{key}"] = t
    return data


def save_checkpoint(path, model: MatMulFreeLM, config: TrainConfig, optim: Adam | None = None, step: int = 0):
    ckpt_io.save(path, to_checkpoint(model, config, optim, step))


def from_checkpoint(data: ckpt_io.CheckpointData):
    """Rebuild (model, config, optimizer, step) exactly as saved."""
    config, state = parse_config_text(data.config_text)
    shared = None
    if "shared.w_c" in data.trits:
        lam = data.tensors.get("shared.lambda_max")
        if lam is None:
            raise ckpt_io.CheckpointError("reservoir radius missing from checkpoint")
        shared = SharedFixed(w_c=data.trits["shared.w_c"], w_r=data.trits["shared.w_r"],
                             lambda_max=float(lam[0]), w_f=data.trits.get("shared.w_f"),
                             w_g=data.trits.get("shared.w_g"))
    model = MatMulFreeLM(config.model, shared=shared)
    params = model.named_parameters()
    for name, p in params.items():
        if name not in data.tensors:
            raise ckpt_io.CheckpointError(f"checkpoint lacks tensor {name}")
        if data.tensors[name].shape != p.shape:
            raise ckpt_io.CheckpointError(f"{name}: shape {data.tensors[name].shape} != {p.shape}")
        p.data = data.tensors[name].astype(p.data.dtype)
    for lin in model.linears():
        lin.refresh()
    optim = Adam(model.parameters())
    optim.t = int(state.get("adam_t", 0))
    for name in optim.m:
        if f"adam.m.{name}" in data.tensors:
            optim.m[name] = data.tensors[f"adam.m.{name}"].astype(optim.m[name].dtype)
            optim.v[name] = data.tensors[f"adam.v.{name}"].astype(optim.v[name].dtype)
    return model, config, optim, int(state.get("step", 0))


def load_checkpoint(path):
    return from_checkpoint(ckpt_io.load(path))


# --- training --------------------------------------------------------------

@dataclass
class TrainResult:
    model: MatMulFreeLM
    optim: Adam
    rows: list[dict]
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows])

    def smoothed_final(self, window: int = 50) -> float:
        return float(self.losses[-window:].mean())


def _open_metrics(path: Path | None):
    if path is None:
        return None, None
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or path.stat().st_size == 0
    fh = open(path, "a", newline="", encoding="ascii")
    writer = csv.writer(fh, lineterminator="\n")
    if new:
        writer.writerow(METRIC_COLUMNS)
    return fh, writer


def train(config: TrainConfig, tokens: np.ndarray | None = None, *, resume: str | Path | None = None,
          out_dir: str | Path | None = None, metrics_path: str | Path | None = None,
          stop_at: int | None = None, on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Run (or resume) training. ``stop_at`` ends early without changing the schedule."""
    if tokens is None:
        if not config.train_data:
            raise ValueError("no training data given")
        tokens = load_tokens(config.train_data)
    ctx = config.model.context_size
    if tokens.size < ctx + 1:
        raise ValueError(f"training data has {tokens.size} tokens; one sample needs {ctx + 1}")

    if resume is not None:
        model, saved_cfg, optim, start = load_checkpoint(resume)
        if saved_cfg.model != config.model:
            raise ValueError("resume checkpoint was trained with a different model config")
    else:
        model, optim, start = MatMulFreeLM(config.model), None, 0
        optim = Adam(model.parameters())

    out = Path(out_dir) if out_dir else None
    if metrics_path is None and out is not None:
        metrics_path = out / "metrics.csv"
    fh, writer = _open_metrics(Path(metrics_path) if metrics_path else None)
    result = TrainResult(model, optim, [])

    def checkpoint(step: int) -> None:
        if out is None:
            return
        path = out / f"step_{step:07d}.tlm"
        save_checkpoint(path, model, config, optim, step)
        result.checkpoints.append(path)

    last = config.total_steps if stop_at is None else min(stop_at, config.total_steps)
    try:
        if config.checkpoint_interval and start == 0:
            checkpoint(0)
        trainable = model.trainable_parameters()
        for step in range(start + 1, last + 1):
            t0 = time.perf_counter()
            rng = np.random.default_rng([config.data_seed, step])
            x, y = sample_batch(tokens, config.batch_size, ctx, rng)
            lr = lr_at(step, config)
            model.zero_grad()
            try:
                with ad.Tape() as tape:
                    loss = model.loss(x, y)
                    tape.backward(loss)
            except FloatingPointError as exc:
                raise TrainingError(f"step {step}: {exc} (lr={lr:.3g})") from exc
            loss_value = float(loss.item())
            if not math.isfinite(loss_value):
                raise TrainingError(f"step {step}: non-finite loss {loss_value} (lr={lr:.3g})")
            clip_grad_norm(trainable, config.grad_clip)
            optim.step(lr)
            model.invalidate_lower_bounds()
            dt = time.perf_counter() - t0
            row = {"step": step, "lr": lr, "loss": loss_value,
                   "tokens_per_s": config.batch_size * ctx / dt if dt > 0 else 0.0,
                   "grad_buffers": tape.grad_buffers_touched}
            result.rows.append(row)
            if writer is not None:
                writer.writerow([row[k] if isinstance(row[k], int) else repr(float(row[k])) for k in METRIC_COLUMNS])
                fh.flush()
            if on_step is not None:
                on_step(row)
            if config.checkpoint_interval and step % config.checkpoint_interval == 0:
                checkpoint(step)
        if out is not None and last > start:
            save_checkpoint(out / "final.tlm", model, config, optim, last)
            result.checkpoints.append(out / "final.tlm")
    finally:
        if fh is not None:
            fh.close()
    return result


# --- evaluation and generation ---------------------------------------------

def evaluate(model: MatMulFreeLM, tokens, batch: int = 32) -> dict[str, float]:
    """Mean next-token loss over non-overlapping windows; a short tail forms its own window."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < 2:
        raise ValueError("evaluation corpus needs at least 2 tokens")
    ctx = model.config.context_size
    n_full = (tokens.size - 1) // ctx
    model.precompute_lower_bounds()
    total, count = 0.0, 0
    for lo in range(0, n_full, batch):
        hi = min(n_full, lo + batch)
        idx = (np.arange(lo, hi) * ctx)[:, None] + np.arange(ctx + 1)[None]
        w = tokens[idx]
        total += _nll_sum(model, w[:, :-1], w[:, 1:])
        count += w[:, 1:].size
    tail = tokens[n_full * ctx:]
    if tail.size >= 2:
        total += _nll_sum(model, tail[None, :-1], tail[None, 1:])
        count += tail.size - 1
    model.invalidate_lower_bounds()
    mean = total / count
    return {"mean_loss": mean, "perplexity": math.exp(mean), "tokens": count}


def _nll_sum(model: MatMulFreeLM, x, y) -> float:
    logp = ad.log_softmax_np(model.forward(x).data.astype(np.float64))
    return float(-np.take_along_axis(logp, y[..., None], axis=-1).sum())


def generate_ids(model: MatMulFreeLM, prompt_ids, n_tokens: int) -> np.ndarray:
    """Greedy continuation; ``argmax`` picks the lowest id among ties."""
    if n_tokens < 0:
        raise ValueError("n_tokens must be >= 0")
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    if n_tokens == 0:
        return prompt_ids.copy()
    model.precompute_lower_bounds()
    state = model.init_state(1)
    feed = prompt_ids if prompt_ids.size else np.array([PAD_ID])
    logits = None
    for tok in feed:
        logits, state = model.step(np.array([tok]), state)
    out = list(prompt_ids)
    for _ in range(n_tokens):
        nxt = int(np.argmax(logits[0]))
        out.append(nxt)
        logits, state = model.step(np.array([nxt]), state)
    model.invalidate_lower_bounds()
    return np.array(out, dtype=np.int64)


def generate(model: MatMulFreeLM, prompt: str, n_tokens: int) -> str:
    if n_tokens == 0:
        return prompt
    ids = generate_ids(model, tokenize_bytes(prompt), n_tokens)
    raw = bytes(int(i) for i in ids if i != PAD_ID)
    return raw.decode("utf-8", errors="replace")
