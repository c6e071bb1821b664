"""Importance criteria, mask selection and sparsity schedules.

Masks are monotone: a position that has been pruned stays pruned. Every
selection routine breaks score ties toward the lowest flat index so results
are reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import factorization as fz
from . import tensor as T
from .factorization import MonotonicityError, n_pruned
from .model import EMBEDDING, Model, Projection

CRITERIA = ("magnitude", "data")
METHODS = ("unstructured", "structured_rows", "structured_cols", "factorized")
REDUCTIONS = {"mean": np.mean, "min": np.min, "max": np.max}


class ConfigError(ValueError):
    pass


class ScoringError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# criteria


def magnitude_scores(param) -> np.ndarray:
    data = param.tensor.data if hasattr(param, "tensor") else np.asarray(param)
    return np.abs(np.asarray(data, dtype=np.float64))


def exact_dd_scores(model: Model, batch, positions: Iterable[tuple[str, int]]) -> np.ndarray:
    """Squared loss change from zeroing each listed weight, one forward each.

    Brute force; only meant as a reference for small models.
    """
    with T.no_grad():
        base = float(model.loss(batch).data)
        out = []
        for name, idx in positions:
            flat = model.params[name].tensor.data.reshape(-1)
            old = flat[idx]
            if old == 0:
                out.append(0.0)
                continue
            flat[idx] = 0
            try:
                out.append((base - float(model.loss(batch).data)) ** 2)
            finally:
                flat[idx] = old
    return np.asarray(out, dtype=np.float64)


@dataclass
class ImportanceMap:
    """Running sum of per-batch scores for each prunable parameter."""

    sums: dict[str, np.ndarray] = field(default_factory=dict)
    count: int = 0

    def add_batch(self, model: Model) -> None:
        for proj in model.prunable():
            p = proj.prunable_param
            g = p.tensor.grad
            if g is None:
                raise ScoringError(f"{p.name}: no gradient; run backward first")
            s = (g.astype(np.float64) * p.tensor.data.astype(np.float64)) ** 2
            if not np.all(np.isfinite(s)):
                raise ScoringError(f"{p.name}: non-finite gradient while scoring")
            prev = self.sums.get(p.name)
            self.sums[p.name] = s if prev is None or prev.shape != s.shape else prev + s
        self.count += 1

    def scores(self, name: str) -> np.ndarray:
        if self.count == 0 or name not in self.sums:
            raise ScoringError(f"no accumulated scores for {name}")
        return self.sums[name] / self.count

    def reset(self) -> None:
        self.sums.clear()
        self.count = 0


def taylor_dd_scores(model: Model, batches: Sequence) -> ImportanceMap:
    """Mean over batches of (dL/dθ · θ)², one forward-backward per batch."""
    if not batches:
        raise ScoringError("need at least one batch")
    imp = ImportanceMap()
    for b in batches:
        model.zero_grad()
        model.loss(b).backward()
        imp.add_batch(model)
    model.zero_grad()
    return imp


# ---------------------------------------------------------------------------
# schedule


@dataclass
class ScheduleConfig:
    s_i: float = 0.0
    s_f: float = 0.9
    delta_t: int = 1
    n: int = 1
    t0: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.s_i <= self.s_f < 1.0):
            raise ConfigError(f"need 0 <= s_i <= s_f < 1, got s_i={self.s_i}, s_f={self.s_f}")
        if self.delta_t < 1 or self.n < 1:
            raise ConfigError("delta_t and n must be >= 1")

    @property
    def end(self) -> int:
        return self.t0 + self.n * self.delta_t

    def prune_steps(self) -> list[int]:
        return [self.t0 + k * self.delta_t for k in range(1, self.n + 1)]


def target_sparsity(schedule: ScheduleConfig, t: int) -> float:
    """Cubic interpolation from s_i at t0 to s_f at t0 + n·Δt."""
    sc = schedule
    if not sc.t0 <= t <= sc.end:
        raise IndexError(f"step {t} outside schedule window [{sc.t0}, {sc.end}]")
    frac = 1.0 - (t - sc.t0) / (sc.n * sc.delta_t)
    s = sc.s_f + (sc.s_i - sc.s_f) * frac**3
    return min(max(s, sc.s_i), sc.s_f)


# ---------------------------------------------------------------------------
# selection


def sparsity(mask: np.ndarray) -> float:
    return 1.0 - np.count_nonzero(mask) / mask.size


def select_unstructured(scores: np.ndarray, mask: np.ndarray, target: float) -> np.ndarray:
    """Return a new mask with exactly floor(target·N) zeros."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1).copy()
    want = n_pruned(target, flat.size)
    have = flat.size - int(np.count_nonzero(flat))
    if want < have:
        raise MonotonicityError(f"target {target} below current sparsity {have / flat.size}")
    live = np.flatnonzero(flat)
    order = live[np.argsort(scores[live], kind="stable")]
    flat[order[: want - have]] = 0
    return flat.reshape(np.shape(mask))


@dataclass
class GroupSpec:
    axis: int  # 0 = rows, 1 = columns
    groups: list[np.ndarray]

    @classmethod
    def singletons(cls, shape: tuple[int, int], axis: int) -> "GroupSpec":
        return cls(axis, [np.asarray([i]) for i in range(shape[axis])])

    def validate(self, shape) -> None:
        seen = np.zeros(shape[self.axis], dtype=bool)
        for g in self.groups:
            g = np.asarray(g)
            if g.size == 0:
                raise ConfigError("empty group")
            if seen[g].any():
                raise ConfigError("groups overlap")
            seen[g] = True
        if not seen.all():
            raise ConfigError("groups do not cover the axis")


def group_scores(scores: np.ndarray, spec: GroupSpec, reduction: str = "mean") -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    spec.validate(scores.shape)
    red = REDUCTIONS[reduction]
    take = (lambda g: scores[g, :]) if spec.axis == 0 else (lambda g: scores[:, g])
    return np.asarray([red(take(np.asarray(g))) for g in spec.groups])


def select_structured(
    scores: np.ndarray, spec: GroupSpec, mask: np.ndarray, target: float, reduction: str = "mean"
) -> np.ndarray:
    """Zero whole groups so the achieved sparsity is the reachable value
    nearest to ``target`` (ties toward fewer groups)."""
    mask = np.asarray(mask, dtype=np.uint8).copy()
    spec.validate(mask.shape)
    n_total = mask.size
    current = n_total - int(np.count_nonzero(mask))
    if target < current / n_total - 1e-12:
        raise MonotonicityError(f"target {target} below current sparsity {current / n_total}")

    def sl(g):
        return (np.asarray(g), slice(None)) if spec.axis == 0 else (slice(None), np.asarray(g))

    gs = group_scores(scores, spec, reduction)
    live = [k for k, g in enumerate(spec.groups) if mask[sl(g)].any()]
    live.sort(key=lambda k: (gs[k], k))
    best_m, best_err, zeros = 0, abs(current / n_total - target), current
    for m, k in enumerate(live, start=1):
        zeros += int(np.count_nonzero(mask[sl(spec.groups[k])]))
        err = abs(zeros / n_total - target)
        if err < best_err - 1e-12:
            best_m, best_err = m, err
    for k in live[:best_m]:
        mask[sl(spec.groups[k])] = 0
    return mask


def embedding_vocab_grouping(scores: np.ndarray) -> np.ndarray:
    """Share each embedding dimension's mean score across all vocabulary rows."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.broadcast_to(scores.mean(axis=0, keepdims=True), scores.shape).copy()


# ---------------------------------------------------------------------------
# model-level step


def layer_scores(proj: Projection, criterion: str, importance: ImportanceMap | None) -> np.ndarray:
    p = proj.prunable_param
    if criterion == "magnitude":
        s = magnitude_scores(p)
    elif criterion == "data":
        if importance is None:
            raise ScoringError("data criterion needs accumulated importance scores")
        s = importance.scores(p.name)
    else:
        raise ConfigError(f"unknown criterion {criterion!r}")
    if proj.mode == "dense" and proj.kind == EMBEDDING:
        s = embedding_vocab_grouping(s)
    return s


def factorize_model(model: Model, layers: Sequence[str] | None = None) -> None:
    """Swap every (listed) dense prunable projection for its full-rank SVD factors."""
    for proj in model.prunable():
        if proj.mode == "dense" and (layers is None or proj.name in layers):
            w = proj.weight.tensor.data * proj.weight.mask
            model.swap_in_factorized(proj.name, fz.factorize(w, name=proj.name))


def prune_layer(model: Model, proj: Projection, criterion: str, method: str, s_t: float,
                importance: ImportanceMap | None = None, reduction: str = "mean") -> dict:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    scores = layer_scores(proj, criterion, importance)
    if method == "factorized":
        if proj.mode != "factorized":
            raise ConfigError(f"{proj.name}: factorized method needs a factorized layer")
        s_hat = fz.layer_target_sparsity(proj.shape, s_t)
        fl = fz.prune_factorized(model.factorized_layer(proj.name), scores, s_hat)
        model.set_diagonal_mask(proj.name, fl.M)
        achieved, layer_target = fl.diagonal_sparsity, s_hat
    else:
        p = proj.prunable_param
        if method == "unstructured":
            new = select_unstructured(scores, p.mask, s_t)
        else:
            axis = 0 if method == "structured_rows" else 1
            if proj.kind == EMBEDDING:
                axis = 1  # vocabulary rows are never removed as a group
            spec = GroupSpec.singletons(p.shape, axis)
            # whole-group rounding may already overshoot this step's target
            new = select_structured(scores, spec, p.mask, max(s_t, sparsity(p.mask)), reduction)
        if np.any(new > p.mask):
            raise MonotonicityError(f"{p.name}: selection would regrow weights")
        p.mask = new
        p.apply_mask_()
        achieved, layer_target = sparsity(new), s_t
    return {"layer": proj.name, "target": s_t, "layer_target": layer_target,
            "achieved": achieved, "criterion": criterion, "method": method}


def prune_step(model: Model, criterion: str, method: str, schedule: ScheduleConfig, t: int,
               score_batches: Sequence | None = None, importance: ImportanceMap | None = None,
               layers: Sequence[str] | None = None) -> list[dict]:
    """Prune every (listed) layer to ``target_sparsity(schedule, t)``."""
    schedule.validate()
    if (t - schedule.t0) % schedule.delta_t:
        raise ConfigError(f"step {t} is not on the pruning grid of {schedule}")
    s_t = target_sparsity(schedule, t)
    if criterion == "data" and importance is None:
        if not score_batches:
            raise ScoringError("data criterion needs score batches or accumulated importance")
        importance = taylor_dd_scores(model, score_batches)
    events = []
    for proj in model.prunable():
        if layers is not None and proj.name not in layers:
            continue
        ev = prune_layer(model, proj, criterion, method, s_t, importance)
        ev["step"] = t
        events.append(ev)
    return events


class PruningEngine:
    """Training hook: accumulates data-driven scores and prunes on the schedule grid."""

    interval = 1

    def __init__(self, criterion: str, method: str, schedule: ScheduleConfig,
                 layers: Sequence[str] | None = None, log: Callable[[dict], None] | None = None):
        if criterion not in CRITERIA:
            raise ConfigError(f"unknown criterion {criterion!r}")
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}")
        schedule.validate()
        self.criterion, self.method, self.schedule = criterion, method, schedule
        self.layers = list(layers) if layers is not None else None
        self.importance = ImportanceMap()
        self.events: list[dict] = []
        self._log = log
        self._grid = set(schedule.prune_steps())

    def prepare(self, model: Model) -> None:
        if self.method == "factorized":
            factorize_model(model, self.layers)

    def after_backward(self, step: int, model: Model, batch) -> None:
        if self.criterion == "data" and self.schedule.t0 < step <= self.schedule.end:
            self.importance.add_batch(model)

    def __call__(self, step: int, model: Model) -> None:
        if step not in self._grid:
            return
        imp = self.importance if self.criterion == "data" else None
        events = prune_step(model, self.criterion, self.method, self.schedule, step,
                            importance=imp, layers=self.layers)
        self.importance.reset()
        self.events.extend(events)
        if self._log:
            for ev in events:
                self._log(ev)

    @property
    def done(self) -> bool:
        return bool(self.events) and self.events[-1]["step"] >= self.schedule.end


class EventLog:
    """Append-only JSON-lines writer for pruning events."""

    def __init__(self, path):
        self.path = path

    def __call__(self, event: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
