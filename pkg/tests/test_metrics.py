import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunelab import tensor as T
from prunelab.factorization import kept_rank
from prunelab.metrics import (
    EvaluationError,
    flops,
    percentile_buckets,
    perplexity,
    projection_flops,
    relative_change,
    token_nll,
)
from prunelab.pruning import ScheduleConfig, factorize_model, prune_step
from prunelab.tokenizer import make_batches

from .helpers import tiny_model, toy_utterances


def zero_output(model):
    model.projections["out"].weight.mask[:] = 0
    return model


def test_uniform_model_has_vocab_perplexity():
    m = zero_output(tiny_model())
    assert perplexity(m, toy_utterances(20)) == pytest.approx(40, rel=1e-5)


def test_token_nll_matches_direct_softmax():
    m = tiny_model(seed=3)
    utt = [5, 9, 13, 22]
    nll = token_nll(m, [utt])
    with T.no_grad():
        logits = m(np.array([[2] + utt])).data[0].astype(np.float64)
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    expected = -np.log(p[np.arange(5), utt + [3]])
    np.testing.assert_allclose(nll, expected, rtol=1e-5)


@settings(max_examples=15, deadline=None, derandomize=True)
@given(st.integers(1, 9), st.integers(0, 100))
def test_perplexity_does_not_depend_on_batching(batch_size, seed):
    m = tiny_model()
    utts = toy_utterances(23, seed=1)
    ref = perplexity(m, utts)
    batches = make_batches(utts, batch_size, 16, seed, drop_last=False)
    assert abs(perplexity(m, batches) - ref) <= 1e-10 * ref


def test_empty_dev_set():
    with pytest.raises(EvaluationError):
        perplexity(tiny_model(), [])


def test_layer_flops():
    dense = projection_flops(512, 512)
    k = kept_rank(512, 512, 0.95)
    low = projection_flops(512, 512, k)
    assert (dense, k, low) == (524288, 12, 24576)
    assert round(dense / low, 1) == 21.3


def test_unstructured_pruning_leaves_flops_unchanged():
    m = tiny_model()
    base = flops(m)
    prune_step(m, "magnitude", "unstructured", ScheduleConfig(s_f=0.9), 1)
    assert flops(m).total == base.total
    assert flops(m).against(base).ratio == 1.0


def test_factorized_pruning_reduces_flops():
    m = tiny_model()
    base = flops(m)
    factorize_model(m)
    prune_step(m, "magnitude", "factorized", ScheduleConfig(s_f=0.7), 1)
    rep = flops(m).against(base)
    assert rep.ratio > 1
    k = m.projections["tok_emb"].inference_rank()
    assert rep.per_layer["tok_emb"] == 2 * k * 16


def test_model_flops_breakdown():
    m = tiny_model()
    rep = flops(m, context_len=10)
    assert rep.per_layer["tok_emb"] == 0
    assert rep.per_layer["blocks.0.attn.core"] == 4 * 10 * 16
    assert rep.per_layer["out"] == 2 * 16 * 40


def test_percentile_buckets_example():
    freqs = {"the": 100, "a": 50, "cat": 5, "zyx": 0}
    lines = ["the the", "a a", "cat cat", "zyx zyx"]
    buckets = percentile_buckets(lines, freqs)
    assert [b.utterance_ids for b in buckets] == [[0], [1], [2], [3]]
    assert [b.word_count for b in buckets] == [2, 2, 2, 2]


@settings(max_examples=40, deadline=None, derandomize=True)
@given(st.lists(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=6), min_size=4, max_size=30))
def test_percentile_buckets_partition_the_dev_set(words):
    lines = [" ".join(w) for w in words]
    freqs = {c: i * 7 for i, c in enumerate("abcdefg")}
    buckets = percentile_buckets(lines, freqs)
    ids = sorted(i for b in buckets for i in b.utterance_ids)
    assert ids == list(range(len(lines)))
    assert sum(b.word_count for b in buckets) == sum(len(w) for w in words)


def test_relative_change():
    assert relative_change(110.0, 100.0) == 10.0
    assert relative_change(7.0, 7.0) == 0.0
    assert math.isclose(relative_change(1.0, 3.0), -66.7)
