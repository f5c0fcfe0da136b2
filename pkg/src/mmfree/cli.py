"""Command line: ``mmfree {train,eval,generate,params,bench}``.

Exit status 0 on success, 1 on usage errors, 2 when data or a model is unusable.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .train import TrainingError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmfree", description="Ternary matmul-free language models on bytes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, variant=True):
        p.add_argument("--config", help="key = value config file")
        if variant:
            p.add_argument("--variant", choices=("base", "rc", "grc"))
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory for CSV files and figures")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", required=True, help="training text file")
    p.add_argument("--steps", type=int, help="total optimizer steps")
    p.add_argument("--ckpt", help="resume from this checkpoint")

    p = sub.add_parser("eval", help="mean loss and perplexity of a checkpoint")
    common(p, variant=False)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("generate", help="greedy continuation of a prompt")
    common(p, variant=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--n-tokens", type=int, default=64)

    p = sub.add_parser("params", help="parameter and memory report")
    common(p)
    p.add_argument("--csv", help="also write the report as CSV")

    p = sub.add_parser("bench", help="fused vs two-pass recurrence timing")
    common(p)
    p.add_argument("--steps", type=int, default=5, help="timed repetitions (>= 3)")
    p.add_argument("--csv", help="write rows here instead of stdout")
    return parser


def _config(args, **extra):
    from .train import load_config

    overrides = {"variant": getattr(args, "variant", None), "seed": args.seed, **extra}
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    from .data import load_tokens
    from .plotting import plot_loss
    from .train import evaluate, train

    cfg = _config(args, total_steps=args.steps, train_data=args.data)
    out = Path(args.out or f"runs/{cfg.model.variant}")
    tokens = load_tokens(args.data)

    def show(row):
        if row["step"] % 50 == 0 or row["step"] == cfg.total_steps:
            print(f"step {row['step']:6d}  lr {row['lr']:.3e}  loss {row['loss']:.4f}  "
                  f"{row['tokens_per_s']:.0f} tok/s", flush=True)

    result = train(cfg, tokens, resume=args.ckpt, out_dir=out, on_step=show)
    if result.rows:
        plot_loss(result.rows, out / "loss.png", title=f"{cfg.model.variant} training loss")
        print(f"smoothed final loss {result.smoothed_final(cfg.smoothing):.4f} "
              f"(initial {result.rows[0]['loss']:.4f})")
    if cfg.eval_data:
        m = evaluate(result.model, load_tokens(cfg.eval_data))
        print(f"eval loss {m['mean_loss']:.4f}  perplexity {m['perplexity']:.3f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_tokens
    from .train import evaluate, load_checkpoint

    model, *_ = load_checkpoint(args.ckpt)
    m = evaluate(model, load_tokens(args.data))
    print(f"mean_loss {m['mean_loss']:.6f}\nperplexity {m['perplexity']:.6f}\ntokens {m['tokens']}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .train import generate, load_checkpoint

    if args.n_tokens < 0:
        raise _UsageError("--n-tokens must be >= 0")
    model, *_ = load_checkpoint(args.ckpt)
    sys.stdout.write(generate(model, args.prompt, args.n_tokens) + "\n")
    return EXIT_OK


def cmd_params(args) -> int:
    from .accounting import (PUBLISHED_CONFIG, PUBLISHED_DERIVATION, count_params, format_report, memory_report,
                             report_csv)

    cfg = _config(args).model
    report = count_params(cfg)
    print(format_report(report, memory_report(cfg)))
    if all(getattr(cfg, k) == v for k, v in PUBLISHED_CONFIG.items()):
        print(f"note: {PUBLISHED_DERIVATION}")
    if args.csv:
        Path(args.csv).write_text(report_csv([report]), encoding="ascii")
    if args.out:
        from dataclasses import replace

        from .plotting import plot_params

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        reports = [count_params(replace(cfg, variant=v)) for v in ("base", "rc", "grc")]
        (out / "params.csv").write_text(report_csv(reports), encoding="ascii")
        plot_params(reports, out / "params.png")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .fused import bench_csv, bench_recurrent

    if args.steps < 3:
        raise _UsageError("--steps must be >= 3 for bench")
    cfg = _config(args).model
    rows = bench_recurrent(cfg.d, cfg.context_size, repetitions=args.steps, variant=cfg.variant,
                           seed=cfg.seed, sparsity=cfg.sparsity)
    text = bench_csv(rows)
    if args.csv:
        Path(args.csv).write_text(text, encoding="ascii")
    else:
        sys.stdout.write(text)
    if args.out:
        from .plotting import plot_bench

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(text, encoding="ascii")
        plot_bench(rows, out / "bench.png")
    fused, unfused = rows
    saved = 1.0 - fused["wall_ns_median"] / unfused["wall_ns_median"]
    print(f"# fused saves {saved:.1%} wall time locally; transfer difference "
          f"{unfused['reads'] + unfused['writes'] - fused['reads'] - fused['writes']}", file=sys.stderr)
    return EXIT_OK


class _UsageError(Exception):
    pass


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "generate": cmd_generate,
            "params": cmd_params, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"mmfree: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, CheckpointError, TrainingError, FloatingPointError) as exc:
        print(f"mmfree: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
