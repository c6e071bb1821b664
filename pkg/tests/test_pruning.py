import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from prunelab import tensor as T
from prunelab.factorization import MonotonicityError
from prunelab.model import ModelConfig, build_model
from prunelab.pruning import (
    ConfigError,
    GroupSpec,
    PruningEngine,
    ScheduleConfig,
    ScoringError,
    embedding_vocab_grouping,
    exact_dd_scores,
    prune_step,
    select_structured,
    select_unstructured,
    sparsity,
    target_sparsity,
    taylor_dd_scores,
)
from prunelab.tokenizer import make_batches
from prunelab.train import TrainConfig, Trainer

from .helpers import tiny_model, toy_batch, toy_utterances


# -- schedule ---------------------------------------------------------------------


def test_schedule_endpoints_and_midpoint():
    sc = ScheduleConfig(s_i=0.0, s_f=0.9, delta_t=1, n=10, t0=0)
    assert abs(target_sparsity(sc, 0) - 0.0) < 1e-12
    assert abs(target_sparsity(sc, 10) - 0.9) < 1e-12
    assert abs(target_sparsity(sc, 5) - 0.7875) < 1e-12


def test_schedule_with_offset_start():
    sc = ScheduleConfig(s_i=0.3, s_f=0.8, delta_t=7, n=3, t0=100)
    assert target_sparsity(sc, 100) == pytest.approx(0.3, abs=1e-12)
    assert target_sparsity(sc, 121) == pytest.approx(0.8, abs=1e-12)
    with pytest.raises(IndexError):
        target_sparsity(sc, 122)


def test_schedule_monotone_over_random_configs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        s_i, s_f = np.sort(rng.uniform(0, 0.999, 2))
        sc = ScheduleConfig(s_i=float(s_i), s_f=float(s_f), delta_t=int(rng.integers(1, 50)),
                            n=int(rng.integers(1, 30)), t0=int(rng.integers(0, 1000)))
        vals = [target_sparsity(sc, t) for t in range(sc.t0, sc.end + 1)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        assert sc.s_i <= min(vals) and max(vals) <= sc.s_f


def test_one_shot_is_single_step():
    sc = ScheduleConfig(s_i=0.0, s_f=0.9, delta_t=4, n=1)
    assert sc.prune_steps() == [4]
    assert target_sparsity(sc, 4) == 0.9


def test_invalid_schedules():
    for bad in (ScheduleConfig(s_i=0.5, s_f=0.4), ScheduleConfig(s_f=1.0), ScheduleConfig(n=0)):
        with pytest.raises(ConfigError):
            bad.validate()


# -- selection --------------------------------------------------------------------


@settings(max_examples=100, deadline=None, derandomize=True)
@given(st.integers(1, 60), st.floats(0, 0.999), st.integers(0, 10**6))
def test_unstructured_sparsity_is_exactly_floor(n, target, seed):
    scores = np.random.default_rng(seed).normal(size=n)
    mask = select_unstructured(scores, np.ones(n, np.uint8), target)
    assert n - np.count_nonzero(mask) == int(np.floor(target * n + 1e-9))


@settings(max_examples=60, deadline=None, derandomize=True)
@given(st.lists(st.floats(0, 0.99), min_size=2, max_size=6), st.integers(0, 10**6))
def test_masks_only_shrink(targets, seed):
    rng = np.random.default_rng(seed)
    mask = np.ones((6, 7), np.uint8)
    for t in sorted(targets):
        new = select_unstructured(rng.random((6, 7)), mask, t)
        assert np.all(new <= mask)
        mask = new


def test_lower_target_is_rejected():
    mask = select_unstructured(np.arange(10.0), np.ones(10, np.uint8), 0.5)
    with pytest.raises(MonotonicityError):
        select_unstructured(np.arange(10.0), mask, 0.2)


@settings(max_examples=60, deadline=None, derandomize=True)
@given(st.integers(0, 10**6), st.floats(1e-3, 1e3), st.floats(0.05, 0.95))
def test_selection_is_scale_equivariant(seed, c, target):
    w = np.random.default_rng(seed).normal(size=(5, 8))
    ones = np.ones(w.shape, np.uint8)
    np.testing.assert_array_equal(select_unstructured(np.abs(w), ones, target),
                                  select_unstructured(np.abs(c * w), ones, target))


def test_ties_break_toward_lowest_index():
    mask = select_unstructured(np.zeros(6), np.ones(6, np.uint8), 0.5)
    assert mask.tolist() == [0, 0, 0, 1, 1, 1]


def test_vocab_grouping_shares_column_means():
    s = np.arange(12.0).reshape(4, 3)
    g = embedding_vocab_grouping(s)
    np.testing.assert_array_equal(g, np.tile([4.5, 5.5, 6.5], (4, 1)))


def test_pruned_embedding_removes_whole_dimensions():
    m = tiny_model()
    sc = ScheduleConfig(s_f=0.5, n=1, delta_t=1)
    prune_step(m, "magnitude", "unstructured", sc, 1)
    mask = m.projections["tok_emb"].weight.mask
    cols = mask.all(axis=0) | ~mask.any(axis=0)
    assert cols.all()
    assert np.count_nonzero(~mask.any(axis=0)) == 8


def test_structured_rows_prunes_lowest_mean_rows():
    # row means 5, 1, 3, 4.5: a single low entry does not doom a row
    scores = np.array([[5, 5], [1, 1], [3, 3], [0, 9]], dtype=float)
    mask = select_structured(scores, GroupSpec.singletons((4, 2), 0), np.ones((4, 2), np.uint8), 0.5)
    assert mask.tolist() == [[1, 1], [0, 0], [0, 0], [1, 1]]


def test_structured_picks_nearest_reachable_sparsity():
    scores = np.arange(9.0).reshape(3, 3)
    mask = select_structured(scores, GroupSpec.singletons((3, 3), 1), np.ones((3, 3), np.uint8), 0.4)
    assert sparsity(mask) == pytest.approx(1 / 3)


def test_group_spec_validation():
    with pytest.raises(ConfigError):
        GroupSpec(0, [np.array([0, 1]), np.array([1, 2])]).validate((3, 3))
    with pytest.raises(ConfigError):
        GroupSpec(0, [np.array([0])]).validate((3, 3))


# -- data-driven scores ------------------------------------------------------------


def test_taylor_scores_correlate_with_exact_loss_change():
    cfg = ModelConfig(vocab_size=10, embed_dim=4, num_blocks=1, num_heads=1, head_dim=4, ffn_dim=8,
                      max_seq_len=8)
    with T.precision(np.float64):
        m = build_model(cfg)
        assert m.total_params() <= 500
        data = toy_utterances(40, vocab=10, lo=2, hi=6)
        Trainer(m, data, TrainConfig(lr=0.1, warmup_steps=10, batch_size=8, seq_len=8)).run(steps=50)
        batch = make_batches(data, 8, 8, seed=5)[0]
        imp = taylor_dd_scores(m, [batch])
        taylor, exact = [], []
        for proj in m.prunable():
            p = proj.prunable_param
            exact.append(exact_dd_scores(m, batch, [(p.name, i) for i in range(p.tensor.size)]))
            taylor.append(imp.scores(p.name).ravel())
    rho = spearmanr(np.concatenate(taylor), np.concatenate(exact)).correlation
    assert rho >= 0.8


def test_data_criterion_needs_scores():
    m = tiny_model()
    with pytest.raises(ScoringError):
        prune_step(m, "data", "unstructured", ScheduleConfig(s_f=0.5), 1)


def test_prune_step_off_grid():
    with pytest.raises(ConfigError):
        prune_step(tiny_model(), "magnitude", "unstructured", ScheduleConfig(s_f=0.5, delta_t=3), 2)


def test_prune_step_reaches_target_per_layer():
    m = tiny_model()
    events = prune_step(m, "data", "unstructured", ScheduleConfig(s_f=0.7), 1, score_batches=[toy_batch()])
    for ev in events:
        n = m.projections[ev["layer"]].weight.mask.size
        assert ev["achieved"] == pytest.approx(int(0.7 * n + 1e-9) / n)


def test_factorized_engine_prunes_diagonals():
    m = tiny_model()
    sc = ScheduleConfig(s_f=0.6, delta_t=2, n=2)
    engine = PruningEngine("magnitude", "factorized", sc)
    engine.prepare(m)
    tr = Trainer(m, toy_utterances(50), TrainConfig(lr=0.05, batch_size=5, seq_len=12), hooks=[engine])
    tr.run(steps=4)
    assert engine.done
    for proj in m.prunable():
        assert proj.mode == "factorized"
        assert proj.effective_params() <= 0.4 * proj.shape[0] * proj.shape[1] + min(proj.shape)


def test_engine_rejects_unknown_names():
    with pytest.raises(ConfigError):
        PruningEngine("random", "unstructured", ScheduleConfig())
    with pytest.raises(ConfigError):
        PruningEngine("data", "diagonal", ScheduleConfig())


@settings(max_examples=60, deadline=None, derandomize=True)
@given(st.integers(2, 30), st.integers(2, 30), st.floats(0.01, 0.99), st.integers(0, 10**6))
def test_grouped_embedding_rows_prune_evenly(v, d, target, seed):
    scores = embedding_vocab_grouping(np.random.default_rng(seed).random((v, d)))
    mask = select_unstructured(scores, np.ones((v, d), np.uint8), target)
    zeros_per_row = (mask == 0).sum(axis=1)
    assert zeros_per_row.max() - zeros_per_row.min() <= 1
    partial_columns = ((mask == 0).any(axis=0) & (mask == 1).any(axis=0)).sum()
    assert partial_columns <= 1
