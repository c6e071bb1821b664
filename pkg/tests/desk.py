"""Desk-scale experimental protocol behind the directional acceptance criteria.

Each seed gets its own baseline (initialisation and batch order), trained once
per session and shared by every comparison. Pruning windows use n = 10 steps
spaced 60 optimizer steps apart at a reduced learning rate; the one-shot
scheduler prunes once without any training, with data-driven scores taken
from the next window's worth of batches.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from prunelab.corpus import bundled_corpus_path, read_corpus
from prunelab.experiments import (
    PruneRun,
    evaluate,
    ppl_trace,
    prepare_data,
    run_pruning,
    scratch_config,
    sparsity_for_size,
    train_baseline,
)
from prunelab.model import ModelConfig, build_model
from prunelab.train import TrainConfig, Trainer

SEEDS = (0, 1, 2)
BASELINE_EPOCHS = 6
BASELINE_LR = 0.1
PRUNE_LR = 0.03
N_STEPS, DELTA_T = 10, 60
FINETUNE_EPOCHS = 10


class Protocol:
    seeds = SEEDS

    def __init__(self):
        self.data = prepare_data(read_corpus(bundled_corpus_path()), 2000, 0.05)
        self._bases: dict[int, Trainer] = {}
        self._runs: dict[tuple, float] = {}

    def baseline(self, seed: int) -> Trainer:
        if seed not in self._bases:
            self._bases[seed] = train_baseline(self.data, ModelConfig(seed=seed),
                                               TrainConfig(lr=BASELINE_LR, seed=seed), BASELINE_EPOCHS)
        return self._bases[seed]

    def prune_run(self, criterion, method, sparsity, scheduler) -> PruneRun:
        window = DELTA_T * (N_STEPS if scheduler == "incremental" else 1)
        return PruneRun(criterion, method, sparsity, scheduler, n=N_STEPS, delta_t=DELTA_T,
                        total_steps=window if scheduler == "incremental" else 0, lr=PRUNE_LR)

    def pruned(self, seed, criterion, method, sparsity, scheduler) -> Trainer:
        tr, _ = run_pruning(self.baseline(seed), self.data, self.prune_run(criterion, method, sparsity, scheduler))
        return tr

    def ppl(self, seed, criterion, method, sparsity, scheduler) -> float:
        key = (seed, criterion, method, sparsity, scheduler)
        if key not in self._runs:
            self._runs[key] = evaluate(self.pruned(*key).model, self.data)
        return self._runs[key]

    def _mean(self, *key) -> float:
        return float(np.mean([self.ppl(s, *key) for s in self.seeds]))

    # -- comparisons

    def scheduler_comparison(self) -> dict:
        return {(sched, s): self._mean("magnitude", "unstructured", s, sched)
                for s in (0.5, 0.9) for sched in ("one_shot", "incremental")}

    def criterion_comparison(self) -> dict:
        return {c: self._mean(c, "unstructured", 0.9, "incremental") for c in ("magnitude", "data")}

    def per_seed(self, criterion) -> list[float]:
        return [round(self.ppl(s, criterion, "unstructured", 0.9, "incremental"), 3) for s in self.seeds]

    def method_comparison(self, size: float = 0.5) -> dict:
        out: dict[str, list[float]] = {}
        for seed in self.seeds:
            base = self.baseline(seed)
            target = int(round(size * base.model.total_params()))
            for method in ("unstructured", "structured_rows", "structured_cols", "factorized"):
                s = sparsity_for_size(base.model, method, target)
                out.setdefault(method, []).append(self.ppl(seed, "data", method, s, "incremental"))
            out.setdefault("scratch", []).append(self.from_scratch(seed, target))
        return {k: float(np.mean(v)) for k, v in out.items()}

    def from_scratch(self, seed: int, target_params: int) -> float:
        """A narrower model trained for the baseline's steps plus one pruning window."""
        base = self.baseline(seed)
        cfg = scratch_config(replace(base.model.config, seed=seed), target_params)
        tr = Trainer(build_model(cfg), self.data.train_ids, TrainConfig(lr=BASELINE_LR, seed=seed))
        tr.run(steps=base.state.step + N_STEPS * DELTA_T)
        return evaluate(tr.model, self.data)

    def fine_tuning_comparison(self, seed: int = 0, sparsity: float = 0.95) -> dict:
        out = {}
        for sched in ("one_shot", "incremental"):
            tr = self.pruned(seed, "magnitude", "unstructured", sparsity, sched)
            out[sched] = [evaluate(tr.model, self.data)] + ppl_trace(tr, self.data, FINETUNE_EPOCHS)
        return out
