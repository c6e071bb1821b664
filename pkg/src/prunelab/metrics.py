"""Perplexity, analytic FLOP counts and word-frequency percentile buckets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .model import EMBEDDING, Model
from .tokenizer import PAD, Batch, collate, to_rows

EVAL_CHUNK = 32


class EvaluationError(ValueError):
    pass


def _rows_from(dev_set, seq_len: int) -> list[np.ndarray]:
    if isinstance(dev_set, Batch):
        dev_set = [dev_set]
    dev_set = list(dev_set)
    if dev_set and isinstance(dev_set[0], Batch):
        rows = []
        for b in dev_set:
            for i, n in enumerate(b.lengths):
                rows.append(np.concatenate([b.inputs[i, :n], b.targets[i, n - 1 : n]]))
        return rows
    return to_rows(dev_set, seq_len)


def token_nll(model: Model, dev_set, seq_len: int | None = None) -> np.ndarray:
    """Per-token negative log-likelihoods (nats, float64) in canonical order.

    ``dev_set`` is either tokenized utterances or a sequence of Batches; rows
    are re-sorted and re-chunked canonically, so the result does not depend
    on how the caller batched or ordered the data.
    """
    seq_len = seq_len or model.config.max_seq_len
    rows = _rows_from(dev_set, seq_len)
    if not rows:
        raise EvaluationError("empty dev set")
    rows.sort(key=lambda r: (len(r), r.tolist()))
    out = []
    with T.no_grad():
        for s in range(0, len(rows), EVAL_CHUNK):
            b = collate(rows[s : s + EVAL_CHUNK])
            logits = model.forward(b.inputs).data.astype(np.float64)
            m = logits.max(axis=-1, keepdims=True)
            lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[..., 0]
            picked = np.take_along_axis(logits, b.targets[..., None], axis=-1)[..., 0]
            nll = lse - picked
            for i, n in enumerate(b.lengths):
                out.append(nll[i, :n])
    return np.concatenate(out)


def perplexity(model: Model, dev_set, seq_len: int | None = None) -> float:
    nll = token_nll(model, dev_set, seq_len)
    return math.exp(math.fsum(nll.tolist()) / nll.size)


# ---------------------------------------------------------------------------
# FLOPs


def projection_flops(a: int, b: int, rank: int | None = None) -> int:
    """2ab for a dense (possibly masked) a×b map, 2k(a+b) at inference rank k."""
    return 2 * a * b if rank is None else 2 * rank * (a + b)


@dataclass
class FlopReport:
    per_layer: dict[str, int]
    context_len: int
    baseline: str | None = None
    baseline_total: int | None = None

    @property
    def total(self) -> int:
        return sum(self.per_layer.values())

    @property
    def ratio(self) -> float:
        """Speed-up relative to the baseline (baseline FLOPs / these FLOPs)."""
        if self.baseline_total is None:
            return 1.0
        return self.baseline_total / self.total

    def against(self, baseline: "FlopReport", name: str = "baseline") -> "FlopReport":
        return FlopReport(dict(self.per_layer), self.context_len, name, baseline.total)


def flops(model: Model, context_len: int | None = None) -> FlopReport:
    """FLOPs to score one new token with ``context_len`` cached positions.

    Masks never reduce the count: masked weights are still multiplied.
    Embedding lookups are free; a factorized embedding pays for its V factor.
    Attention adds 2·L·d for scores and 2·L·d for the context mix per block.
    """
    cfg = model.config
    L = context_len or cfg.max_seq_len
    per = {}
    for name, pr in model.projections.items():
        a, b = pr.shape
        k = pr.inference_rank()
        if pr.kind == EMBEDDING:
            per[name] = 0 if k is None else 2 * k * b
        else:
            per[name] = projection_flops(a, b, k)
    for i in range(cfg.num_blocks):
        per[f"blocks.{i}.attn.core"] = 4 * L * cfg.embed_dim
    return FlopReport(per, L)


# ---------------------------------------------------------------------------
# percentiles


@dataclass
class PercentileBucket:
    label: int
    utterance_ids: list[int] = field(default_factory=list)
    word_count: int = 0
    perplexity: float | None = None


def utterance_frequency_score(words: Sequence[str], freqs: Mapping[str, int]) -> float:
    """Mean add-one-smoothed log frequency of an utterance's words."""
    if not words:
        return 0.0
    return sum(math.log(freqs.get(w, 0) + 1) for w in words) / len(words)


def percentile_buckets(dev_lines: Sequence[str], train_freqs: Mapping[str, int]) -> list[PercentileBucket]:
    """Rank utterances from most to least frequent words and cut the ranking
    into four buckets of (as near as possible) 25% of the words each."""
    words = [ln.split() for ln in dev_lines]
    total = sum(len(w) for w in words)
    if total == 0:
        raise EvaluationError("dev set has no words")
    scores = [utterance_frequency_score(w, train_freqs) for w in words]
    order = sorted(range(len(words)), key=lambda i: (-scores[i], i))
    buckets = [PercentileBucket(label) for label in (25, 50, 75, 100)]
    cum = 0
    for i in order:
        n = len(words[i])
        mid = cum + n / 2
        k = min(3, int(4 * mid / total))
        buckets[k].utterance_ids.append(i)
        buckets[k].word_count += n
        cum += n
    return buckets


def percentile_ppl(model: Model, buckets: Sequence[PercentileBucket], dev_ids: Sequence[Sequence[int]],
                   seq_len: int | None = None) -> list[PercentileBucket]:
    out = []
    for b in buckets:
        if not b.utterance_ids:
            raise EvaluationError(f"percentile bucket {b.label} is empty")
        ppl = perplexity(model, [dev_ids[i] for i in b.utterance_ids], seq_len)
        out.append(PercentileBucket(b.label, list(b.utterance_ids), b.word_count, ppl))
    return out


def relative_change(x: float, ref: float) -> float:
    """(x - ref)/ref·100, rounded to one decimal."""
    return round((x - ref) / ref * 100.0, 1)
