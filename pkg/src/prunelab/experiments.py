"""End-to-end protocols: baseline training, pruning runs, size targeting, ablations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

from . import corpus as corpus_mod
from . import factorization as fz
from .metrics import perplexity
from .model import Model, ModelConfig, build_model, parameter_count
from .pruning import (
    ConfigError,
    PruningEngine,
    ScheduleConfig,
    prune_step,
    sparsity,
    taylor_dd_scores,
)
from .tokenizer import Vocabulary, train_bpe
from .train import TrainConfig, Trainer

log = logging.getLogger(__name__)

SCHEDULERS = ("one_shot", "incremental")


@dataclass
class Dataset:
    vocab: Vocabulary
    train_lines: list[str]
    dev_lines: list[str]
    train_ids: list[list[int]] = field(repr=False)
    dev_ids: list[list[int]] = field(repr=False)


def prepare_data(lines: Sequence[str], vocab_size: int = 2000, dev_fraction: float = 0.05,
                 vocab: Vocabulary | None = None) -> Dataset:
    train, dev = corpus_mod.split_train_dev(lines, dev_fraction)
    vocab = vocab or train_bpe(train, vocab_size)
    return Dataset(vocab, train, dev, [vocab.encode(s) for s in train], [vocab.encode(s) for s in dev])


@dataclass
class PruneRun:
    """One pruning configuration applied to a trained model.

    ``one_shot`` with ``total_steps == 0`` is training-free: data-driven
    scores come from the next ``delta_t`` training batches without any
    parameter update, and the model is pruned once.
    """

    criterion: str = "magnitude"
    method: str = "unstructured"
    sparsity: float = 0.9
    scheduler: str = "one_shot"
    s_i: float = 0.0
    n: int = 10
    delta_t: int = 20
    total_steps: int = 200  # pruning window plus any recovery training
    lr: float | None = None  # overrides the checkpoint's learning rate
    layers: list[str] | None = None

    def schedule(self, t0: int) -> ScheduleConfig:
        if self.scheduler == "one_shot":
            return ScheduleConfig(self.s_i, self.sparsity, self.delta_t, 1, t0)
        if self.scheduler == "incremental":
            return ScheduleConfig(self.s_i, self.sparsity, self.delta_t, self.n, t0)
        raise ConfigError(f"unknown scheduler {self.scheduler!r}")

    @property
    def window(self) -> int:
        return self.delta_t * (1 if self.scheduler == "one_shot" else self.n)


def train_baseline(data: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, epochs: int) -> Trainer:
    model = build_model(replace(model_cfg, vocab_size=len(data.vocab)))
    tr = Trainer(model, data.train_ids, train_cfg)
    tr.run(epochs=epochs)
    return tr


def clone_trainer(tr: Trainer, data: Dataset, seed: int | None = None, lr: float | None = None) -> Trainer:
    cfg = tr.config
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if lr is not None:
        cfg = replace(cfg, lr=lr)
    new = Trainer(tr.model.clone(), data.train_ids, cfg)
    new.state.step = tr.state.step
    new.state.epoch = tr.state.epoch
    new.state.batch_index = tr.state.batch_index
    new.state.momentum = {k: v.copy() for k, v in tr.state.momentum.items()}
    return new


def upcoming_batches(tr: Trainer, k: int) -> list:
    """The next ``k`` training batches ``tr`` would see, without consuming them."""
    out, epoch, idx = [], tr.state.epoch, tr.state.batch_index
    while len(out) < k:
        batches = tr._batches(epoch)
        if idx >= len(batches):
            epoch, idx = epoch + 1, 0
            continue
        out.append(batches[idx])
        idx += 1
    return out


def run_pruning(base: Trainer, data: Dataset, run: PruneRun, seed: int | None = None,
                event_log=None) -> tuple[Trainer, PruningEngine]:
    """Prune a copy of ``base`` per ``run`` while training for ``run.total_steps``."""
    tr = clone_trainer(base, data, seed, run.lr)
    t0 = tr.state.step
    schedule = run.schedule(t0)
    engine = PruningEngine(run.criterion, run.method, schedule, run.layers, log=event_log)
    engine.prepare(tr.model)
    if run.total_steps == 0:
        if run.scheduler != "one_shot":
            raise ConfigError("only the one-shot scheduler can run without training")
        imp = None
        if run.criterion == "data":
            imp = taylor_dd_scores(tr.model, upcoming_batches(tr, run.delta_t))
        events = prune_step(tr.model, run.criterion, run.method, schedule, schedule.end,
                            importance=imp, layers=run.layers)
        engine.events.extend(events)
        if event_log:
            for ev in events:
                event_log(ev)
        return tr, engine
    if schedule.end > t0 + run.total_steps:
        raise ConfigError("pruning window longer than total_steps")
    tr.hooks.append(engine)
    tr.run(steps=run.total_steps)
    tr.hooks.remove(engine)
    return tr, engine


def evaluate(model: Model, data: Dataset) -> float:
    return perplexity(model, data.dev_ids)


def ppl_trace(tr: Trainer, data: Dataset, epochs: int) -> list[float]:
    """Dev PPL after each of ``epochs`` further training epochs."""
    out = []
    for _ in range(epochs):
        tr.run(epochs=1)
        out.append(evaluate(tr.model, data))
    return out


# ---------------------------------------------------------------------------
# size targeting


def _fixed_params(model: Model) -> int:
    return model.effective_params() - sum(pr.effective_params() for pr in model.projections.values())


def effective_size_after(model: Model, method: str, s: float, layers: Sequence[str] | None = None) -> int:
    """Effective parameter count once every (listed) layer is pruned to ``s``.

    Selection is run on a throwaway copy with the magnitude criterion; the
    count does not depend on the criterion.
    """
    if method == "factorized":
        total = _fixed_params(model)
        for name, pr in model.projections.items():
            a, b = pr.shape
            if pr.mode == "lowrank" or (layers is not None and name not in layers):
                total += pr.effective_params()
                continue
            k = fz.kept_rank(a, b, s)
            if pr.mode == "factorized":
                k = min(k, pr.inference_rank())
            total += k * (a + b) + k
        return total
    probe = model.clone()
    current = max((sparsity(pr.prunable_param.mask) for pr in probe.prunable()
                   if layers is None or pr.name in layers), default=0.0)
    if s <= current:
        return probe.effective_params()
    prune_step(probe, "magnitude", method, ScheduleConfig(current, s, 1, 1, 0), 1, layers=layers)
    return probe.effective_params()


def rank_floor_layer(model: Model, s: float, layers: Sequence[str] | None = None) -> str | None:
    """First factorizable layer left with no rank channel at sparsity ``s``."""
    for name, pr in model.projections.items():
        if pr.mode == "lowrank" or (layers is not None and name not in layers):
            continue
        if fz.kept_rank(*pr.shape, s) < 1:
            return name
    return None


def sparsity_for_size(model: Model, method: str, target_params: int, layers: Sequence[str] | None = None,
                      iters: int = 40) -> float:
    """Smallest layer sparsity whose pruned model has at most ``target_params``
    effective parameters (bisection; effective size is monotone in sparsity)."""
    lo, hi = 0.0, 0.999
    if method == "factorized":
        while hi > lo and rank_floor_layer(model, hi, layers) is not None:
            hi -= 0.001
    if effective_size_after(model, method, hi, layers) > target_params:
        where = rank_floor_layer(model, hi + 0.001, layers) if method == "factorized" else None
        detail = f"; layer {where} reaches its rank floor" if where else ""
        raise ConfigError(f"target size {target_params} unreachable with method {method}{detail}")
    if effective_size_after(model, method, lo, layers) <= target_params:
        return lo
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if effective_size_after(model, method, mid, layers) <= target_params:
            hi = mid
        else:
            lo = mid
    return hi


def scratch_config(base: ModelConfig, target_params: int) -> ModelConfig:
    """Same layer arrangement with narrower projections, sized closest to ``target_params``."""
    best = None
    ratio = base.ffn_dim / base.embed_dim
    for head_dim in range(1, base.head_dim + 1):
        d = head_dim * base.num_heads
        cfg = replace(base, embed_dim=d, head_dim=head_dim, ffn_dim=max(1, round(ratio * d)))
        err = abs(parameter_count(cfg) - target_params)
        if best is None or err < best[0]:
            best = (err, cfg)
    return best[1]


# ---------------------------------------------------------------------------
# layer ablation


def layer_ablation(base: Trainer, data: Dataset, layer: str, sparsity: float = 0.75,
                   criterion: str = "magnitude", scheduler: str = "one_shot", epochs: int = 3,
                   n: int = 10, delta_t: int = 20, lr: float | None = None) -> list[float]:
    """Prune only ``layer`` and return dev PPL after each of ``epochs`` training epochs."""
    if layer not in {p.name for p in base.model.prunable()}:
        raise ConfigError(f"unknown or non-prunable layer {layer!r}")
    total = 0 if scheduler == "one_shot" else n * delta_t
    run = PruneRun(criterion, "unstructured", sparsity, scheduler, n=n, delta_t=delta_t,
                   total_steps=total, lr=lr, layers=[layer])
    tr, _ = run_pruning(base, data, run)
    return ppl_trace(tr, data, epochs)

