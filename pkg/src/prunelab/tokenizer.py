"""Byte-level BPE vocabulary, greedy longest-match segmentation, batching."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import kernels

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")
N_BASE = len(RESERVED) + 256
VOCAB_FORMAT = "prunelab-vocab"
VOCAB_VERSION = 1

# leading whitespace sticks to the following word so chunks tile the text
_CHUNK = re.compile(r"\s*\S+|\s+")


class IngestionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def _chunks(text: str) -> list[bytes]:
    return [m.group().encode("utf-8") for m in _CHUNK.finditer(text)]


class Vocabulary:
    def __init__(self, merges: Sequence[tuple[int, int]] = ()):
        self.tokens: list[bytes | None] = [None] * len(RESERVED) + [bytes([i]) for i in range(256)]
        self.merges: list[tuple[int, int]] = []
        for a, b in merges:
            self.merges.append((int(a), int(b)))
            self.tokens.append(self.tokens[a] + self.tokens[b])
        self._lookup: dict[bytes, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok is not None:
                self._lookup.setdefault(tok, i)
        self._maxlen = max(len(t) for t in self._lookup)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, piece: str | bytes) -> bool:
        if isinstance(piece, str):
            piece = piece.encode("utf-8")
        return piece in self._lookup

    def id_of(self, piece: str | bytes) -> int:
        if isinstance(piece, str):
            piece = piece.encode("utf-8")
        return self._lookup.get(piece, UNK)

    def encode_chunk(self, chunk: bytes) -> list[int]:
        ids, i, n = [], 0, len(chunk)
        while i < n:
            for length in range(min(self._maxlen, n - i), 0, -1):
                tid = self._lookup.get(chunk[i : i + length])
                if tid is not None:
                    ids.append(tid)
                    i += length
                    break
            else:  # unreachable with a full byte alphabet
                ids.append(UNK)
                i += 1
        return ids

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for chunk in _chunks(text):
            out.extend(self.encode_chunk(chunk))
        return out

    def decode(self, ids: Iterable[int]) -> str:
        parts = []
        for i in ids:
            tok = self.tokens[int(i)]
            if tok is not None:
                parts.append(tok)
        return b"".join(parts).decode("utf-8", errors="replace")

    def to_dict(self) -> dict:
        return {
            "format": VOCAB_FORMAT,
            "version": VOCAB_VERSION,
            "reserved": list(RESERVED),
            "tokens": [
                {"id": i, "hex": t.hex(), "text": t.decode("utf-8", errors="replace")}
                for i, t in enumerate(self.tokens)
                if t is not None and i >= N_BASE
            ],
            "merges": [list(m) for m in self.merges],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, ensure_ascii=False) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        if d.get("format") != VOCAB_FORMAT or d.get("version") != VOCAB_VERSION:
            raise ConfigError("unrecognized vocabulary file")
        vocab = cls(d["merges"])
        for entry in d["tokens"]:
            if vocab.tokens[entry["id"]] != bytes.fromhex(entry["hex"]):
                raise ConfigError(f"vocabulary entry {entry['id']} inconsistent with merges")
        return vocab

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.merges).encode()).hexdigest()[:16]


def train_bpe(corpus: Iterable[str], vocab_size: int) -> Vocabulary:
    """Learn ``vocab_size - 260`` merges (fewer if the corpus runs out of pairs)."""
    if vocab_size <= N_BASE:
        raise ConfigError(f"vocab_size must exceed {N_BASE} (bytes + reserved ids)")
    counts: dict[bytes, int] = {}
    for line in corpus:
        for chunk in _chunks(line):
            counts[chunk] = counts.get(chunk, 0) + 1
    if not counts:
        raise IngestionError("empty corpus")

    seq, weight = [], []
    for word, c in counts.items():
        seq.extend(b + len(RESERVED) for b in word)
        seq.append(-1)
        weight.extend([c] * (len(word) + 1))
    merges = kernels.bpe_train(
        np.asarray(seq, dtype=np.int32),
        np.asarray(weight, dtype=np.int64),
        vocab_size - N_BASE,
        N_BASE,
    )
    return Vocabulary([tuple(m) for m in merges.tolist()])


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    inputs: np.ndarray  # (B, T) int64, PAD-filled
    targets: np.ndarray  # (B, T) int64, PAD where length exceeded
    lengths: np.ndarray  # (B,)

    @property
    def n_tokens(self) -> int:
        return int(self.lengths.sum())


def to_rows(utterances: Sequence[Sequence[int]], seq_len: int) -> list[np.ndarray]:
    """Wrap each utterance in BOS/EOS and cut into windows of ``seq_len + 1``
    overlapping by one, so each target token lands in exactly one row."""
    if seq_len < 2:
        raise ConfigError("seq_len must be >= 2")
    rows = []
    for ids in utterances:
        s = np.asarray([BOS, *ids, EOS], dtype=np.int64)
        for start in range(0, len(s) - 1, seq_len):
            rows.append(s[start : start + seq_len + 1])
    return rows


def collate(rows: Sequence[np.ndarray]) -> Batch:
    lengths = np.asarray([len(r) - 1 for r in rows], dtype=np.int64)
    T = int(lengths.max())
    inputs = np.full((len(rows), T), PAD, dtype=np.int64)
    targets = np.full((len(rows), T), PAD, dtype=np.int64)
    for b, r in enumerate(rows):
        inputs[b, : len(r) - 1] = r[:-1]
        targets[b, : len(r) - 1] = r[1:]
    return Batch(inputs, targets, lengths)


def make_batches(
    utterances: Sequence[Sequence[int]],
    batch_size: int,
    seq_len: int,
    seed: int,
    epoch: int = 0,
    *,
    shuffle: bool = True,
    drop_last: bool = True,
) -> list[Batch]:
    """One epoch of batches; row order is a permutation keyed by (seed, epoch)."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    rows = to_rows(utterances, seq_len)
    order = np.arange(len(rows))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(rows))
    n_full = len(rows) // batch_size
    stop = n_full * batch_size if drop_last else len(rows)
    return [collate([rows[i] for i in order[s : s + batch_size]]) for s in range(0, stop, batch_size)]


def iter_epochs(utterances, batch_size, seq_len, seed, start_epoch=0) -> Iterator[tuple[int, list[Batch]]]:
    epoch = start_epoch
    while True:
        yield epoch, make_batches(utterances, batch_size, seq_len, seed, epoch)
        epoch += 1
