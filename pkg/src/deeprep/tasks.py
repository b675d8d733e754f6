"""Synthetic copy / reverse / sort sequence-to-sequence datasets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD, BOS, EOS = 0, 1, 2
FIRST_TOKEN = 3

KINDS = ("copy", "reverse", "sort")

Pair = tuple[tuple[int, ...], tuple[int, ...]]


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 16
    len_min: int = 3
    len_max: int = 10
    n_train: int = 2048
    n_dev: int = 256
    n_test: int = 256
    seed: int = 0

    def validate(self, max_len: int | None = None) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; choose from {KINDS}")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be at least 4 (ids 0-2 are reserved)")
        if not 1 <= self.len_min <= self.len_max:
            raise ValueError(f"need 1 <= len_min <= len_max, got {self.len_min}, {self.len_max}")
        if max_len is not None and self.len_max > max_len - 2:
            raise ValueError(f"len_max={self.len_max} leaves no room for BOS/EOS within max_len={max_len}")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise ValueError("split sizes must be nonnegative")


@dataclass
class Batch:
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    src_mask: np.ndarray
    tgt_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.src.shape[0]


def target_for(kind: str, src: tuple[int, ...]) -> tuple[int, ...]:
    if kind == "copy":
        return tuple(src)
    if kind == "reverse":
        return tuple(reversed(src))
    if kind == "sort":
        return tuple(sorted(src))
    raise ValueError(f"unknown task kind {kind!r}")


def generate(spec: TaskSpec) -> dict[str, list[Pair]]:
    """Draw distinct source sequences and split them into train/dev/test.

    All sources are unique across the three splits, so dev and test never
    repeat a training sequence.
    """
    spec.validate()
    n_sym = spec.vocab_size - FIRST_TOKEN
    lengths = np.arange(spec.len_min, spec.len_max + 1)
    space = sum(n_sym ** int(n) for n in lengths)
    total = spec.n_train + spec.n_dev + spec.n_test
    if total > space // 2:
        raise ValueError(
            f"only {space} distinct sequences exist for vocab_size={spec.vocab_size}, "
            f"lengths {spec.len_min}-{spec.len_max}; cannot draw {total} disjoint examples. "
            "Use a larger vocabulary or longer sequences.")

    rng = np.random.default_rng(spec.seed)
    seen: set[tuple[int, ...]] = set()
    sources: list[tuple[int, ...]] = []
    while len(sources) < total:
        n = int(rng.integers(spec.len_min, spec.len_max + 1))
        seq = tuple(int(t) for t in rng.integers(FIRST_TOKEN, spec.vocab_size, size=n))
        if seq not in seen:
            seen.add(seq)
            sources.append(seq)

    pairs = [(s, target_for(spec.kind, s)) for s in sources]
    a, b = spec.n_train, spec.n_train + spec.n_dev
    return {"train": pairs[:a], "dev": pairs[a:b], "test": pairs[b:]}


def make_batch(pairs: list[Pair], pad_id: int = PAD) -> Batch:
    b = len(pairs)
    ts = max(len(s) for s, _ in pairs)
    tt = max(len(t) for _, t in pairs) + 1
    src = np.full((b, ts), pad_id, dtype=np.int64)
    tgt_in = np.full((b, tt), pad_id, dtype=np.int64)
    tgt_out = np.full((b, tt), pad_id, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, :len(s)] = s
        tgt_in[i, 0] = BOS
        tgt_in[i, 1:len(t) + 1] = t
        tgt_out[i, :len(t)] = t
        tgt_out[i, len(t)] = EOS
    src_mask = np.zeros((b, ts), bool)
    tgt_mask = np.zeros((b, tt), bool)
    for i, (s, t) in enumerate(pairs):
        src_mask[i, :len(s)] = True
        tgt_mask[i, :len(t) + 1] = True
    return Batch(src, tgt_in, tgt_out, src_mask, tgt_mask)


def batchify(pairs: list[Pair], batch_size: int, pad_id: int = PAD,
             seed: int | None = None) -> list[Batch]:
    """Split ``pairs`` into padded batches, optionally shuffled by ``seed``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(pairs))
    if seed is not None:
        np.random.default_rng(seed).shuffle(order)
    return [make_batch([pairs[j] for j in order[i:i + batch_size]], pad_id)
            for i in range(0, len(pairs), batch_size)]


def write_pairs(path: str | Path, pairs: list[Pair]) -> None:
    lines = [" ".join(map(str, s)) + " ||| " + " ".join(map(str, t)) for s, t in pairs]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def parse_ids(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split())


def read_pairs(path: str | Path) -> list[Pair]:
    pairs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        src, sep, tgt = line.partition("|||")
        if not sep:
            raise ValueError(f"missing '|||' separator in line {line!r}")
        pairs.append((parse_ids(src), parse_ids(tgt)))
    return pairs
