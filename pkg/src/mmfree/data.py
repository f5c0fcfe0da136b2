"""Byte-level tokenization, the reference corpus, and batch sampling."""
from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

PAD_ID = 256
CORPUS_BYTES = 1_000_000
PUBLIC_DOMAIN_MARK = b"placed in the public domain"


def tokenize_bytes(text: str | bytes) -> np.ndarray:
    """One id per byte (0..255). ``str`` input is UTF-8 encoded first."""
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    ids = np.asarray(ids, dtype=np.int64)
    return bytes(ids[ids != PAD_ID].astype(np.uint8).tolist())


def load_tokens(path: str | Path) -> np.ndarray:
    return tokenize_bytes(Path(path).read_bytes())


def reference_corpus_sources() -> list[Path]:
    """Source files of the installed ``docutils`` that are dedicated to the public domain."""
    import docutils

    root = Path(docutils.__file__).parent
    out = []
    for p in sorted(root.rglob("*.py"), key=lambda q: q.relative_to(root).as_posix()):
        if PUBLIC_DOMAIN_MARK in p.read_bytes():
            out.append(p)
    return out


def build_reference_corpus(n_bytes: int = CORPUS_BYTES) -> bytes:
    """Concatenate the public-domain sources in path order and cut at ``n_bytes``."""
    blob = b"".join(p.read_bytes() for p in reference_corpus_sources())
    if len(blob) < n_bytes:
        raise ValueError(f"only {len(blob)} public-domain bytes available, need {n_bytes}")
    return blob[:n_bytes]


def sample_batch(tokens: np.ndarray, batch: int, context: int, rng: np.random.Generator):
    """Random windows: inputs (batch, context) and next-token targets."""
    if tokens.size < context + 1:
        raise ValueError(f"corpus has {tokens.size} tokens, need at least {context + 1}")
    starts = rng.integers(0, tokens.size - context, size=batch)
    idx = starts[:, None] + np.arange(context + 1)[None]
    windows = tokens[idx]
    return windows[:, :-1], windows[:, 1:]


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="python -m mmfree.data",
                                     description="Write the 1 MB public-domain reference corpus.")
    parser.add_argument("--out", required=True)
    parser.add_argument("--bytes", type=int, default=CORPUS_BYTES)
    args = parser.parse_args(argv)
    blob = build_reference_corpus(args.bytes)
    Path(args.out).write_bytes(blob)
    print(f"{args.out}: {len(blob)} bytes sha256={hashlib.sha256(blob).hexdigest()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
