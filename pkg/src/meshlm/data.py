"""Byte-level tokenization, batching, and synthetic task generators.

The tokenizer maps raw bytes to ids 0..255 and reserves BOS=256, EOS=257,
PAD=258 (vocab 259), so any byte string round-trips exactly and no trained
vocabulary is needed. Two batching regimes are provided: per-document rows
padded to a fixed length (fine-tuning style) and documents concatenated with
EOS separators then chunked (pretraining style).
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import torch

from .engine import derive_seed

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
VOCAB_SIZE = 259

TASK_KINDS = ("copy", "reverse", "modular_add")


class ByteTokenizer:
    """Reversible byte-level tokenizer with BOS/EOS/PAD specials."""

    vocab_size = VOCAB_SIZE

    def tokenize(self, text: str | bytes) -> list[int]:
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return [BOS_ID, *raw, EOS_ID]

    def detokenize(self, tokens: Sequence[int]) -> bytes:
        out = bytearray()
        for t in tokens:
            t = int(t)
            if t >= VOCAB_SIZE or t < 0:
                raise ValueError(f"token id {t} outside vocabulary of size {VOCAB_SIZE}")
            if t < 256:
                out.append(t)
        return bytes(out)


@dataclass
class Batch:
    tokens: torch.Tensor  # [batch, seq] long
    mask: torch.Tensor  # [batch, seq] bool, False exactly at PAD
    lengths: list[int]

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())


def _pad_row(row: list[int], seq_len: int) -> tuple[list[int], int]:
    row = row[:seq_len]
    length = len(row)
    return row + [PAD_ID] * (seq_len - length), length


def _rows_to_batches(rows: list[list[int]], batch_size: int, seq_len: int) -> list[Batch]:
    batches = []
    for start in range(0, len(rows), batch_size):
        group = rows[start : start + batch_size]
        padded, lengths = zip(*(_pad_row(r, seq_len) for r in group))
        tokens = torch.tensor(padded, dtype=torch.long)
        mask = tokens != PAD_ID
        batches.append(Batch(tokens=tokens, mask=mask, lengths=list(lengths)))
    return batches


def make_batches(corpus: Sequence[bytes], seq_len: int, batch_size: int, seed: int) -> list[Batch]:
    """One epoch of per-document rows [BOS doc EOS PAD...], deterministically shuffled.

    Documents longer than seq_len - 2 bytes are truncated to fit.
    """
    if len(corpus) == 0:
        raise ValueError("make_batches: empty corpus")
    tok = ByteTokenizer()
    order = list(range(len(corpus)))
    random.Random(seed).shuffle(order)
    rows = [tok.tokenize(corpus[i][: seq_len - 2]) for i in order]
    return _rows_to_batches(rows, batch_size, seq_len)


def chunk_corpus(corpus: Sequence[bytes], seq_len: int) -> list[list[int]]:
    """Concatenate documents with EOS separators and cut into BOS-led rows."""
    if len(corpus) == 0:
        raise ValueError("chunk_corpus: empty corpus")
    stream: list[int] = []
    for doc in corpus:
        stream.extend(doc)
        stream.append(EOS_ID)
    body = seq_len - 1  # one slot per row goes to BOS
    rows = []
    for start in range(0, len(stream), body):
        rows.append([BOS_ID, *stream[start : start + body]])
    return rows


def make_chunked_batches(corpus: Sequence[bytes], seq_len: int, batch_size: int, seed: int) -> list[Batch]:
    rows = chunk_corpus(corpus, seq_len)
    random.Random(seed).shuffle(rows)
    return _rows_to_batches(rows, batch_size, seq_len)


def batch_stream(
    corpus: Sequence[bytes],
    seq_len: int,
    batch_size: int,
    seed: int,
    chunked: bool = False,
) -> Iterator[Batch]:
    """Endless epochs, each reshuffled from its own substream of ``seed``."""
    make = make_chunked_batches if chunked else make_batches
    epoch = 0
    while True:
        for batch in make(corpus, seq_len, batch_size, derive_seed(seed, f"epoch{epoch}")):
            yield batch
        epoch += 1


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTask:
    kind: str
    alphabet_size: int
    min_len: int
    max_len: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind '{self.kind}'")
        limit = 10 if self.kind == "modular_add" else 26
        if not (2 <= self.alphabet_size <= limit):
            raise ValueError(f"alphabet_size {self.alphabet_size} out of range for {self.kind}")
        if not (1 <= self.min_len <= self.max_len):
            raise ValueError("invalid length range")


def _symbols(task: SyntheticTask) -> str:
    base = "0123456789" if task.kind == "modular_add" else "abcdefghijklmnopqrstuvwxyz"
    return base[: task.alphabet_size]


def modular_add(a: str, b: str, base: int) -> str:
    """Digitwise sum mod base, e.g. "27" + "15" -> "32" in base 10."""
    if len(a) != len(b):
        raise ValueError("operands must have equal length")
    return "".join(str((int(x) + int(y)) % base) for x, y in zip(a, b))


def gen_task(task: SyntheticTask, n: int) -> list[tuple[str, str]]:
    """Deterministic (prompt, answer) pairs; prompts end with '='."""
    if n <= 0:
        raise ValueError("gen_task: n must be positive")
    rng = random.Random(task.seed)
    symbols = _symbols(task)
    pairs = []
    for _ in range(n):
        length = rng.randint(task.min_len, task.max_len)
        body = "".join(rng.choice(symbols) for _ in range(length))
        if task.kind == "copy":
            pairs.append((body + "=", body))
        elif task.kind == "reverse":
            pairs.append((body + "=", body[::-1]))
        else:
            other = "".join(rng.choice(symbols) for _ in range(length))
            pairs.append((body + "+" + other + "=", modular_add(body, other, task.alphabet_size)))
    return pairs


def task_docs(pairs: Sequence[tuple[str, str]]) -> list[bytes]:
    """Full prompt+answer texts, for autoregressive training over whole sequences."""
    return [(p + a).encode("utf-8") for p, a in pairs]


def write_task_file(pairs: Sequence[tuple[str, str]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for prompt, answer in pairs:
            fh.write(json.dumps({"prompt": prompt, "answer": answer}) + "\n")


def read_task_file(path: str | Path) -> list[tuple[str, str]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            pairs.append((record["prompt"], record["answer"]))
    return pairs


def load_corpus_dir(path: str | Path) -> list[bytes]:
    """All regular files under ``path`` as byte documents, sorted by name."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {root}")
    docs = [p.read_bytes() for p in sorted(root.iterdir()) if p.is_file()]
    if not docs:
        raise ValueError(f"corpus directory is empty: {root}")
    return docs
