"""SGD-with-momentum training loop with step hooks and resumable state."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import checkpoint
from .model import Model
from .tokenizer import Batch, make_batches

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.3
    momentum: float = 0.9
    warmup_steps: int = 50
    clip_norm: float = 1.0
    batch_size: int = 32
    seq_len: int = 64
    seed: int = 0


class Hook(Protocol):
    interval: int

    def after_backward(self, step: int, model: Model, batch: Batch) -> None: ...

    def __call__(self, step: int, model: Model) -> None: ...


@dataclass
class EveryN:
    """Adapter turning a plain callable ``fn(step, model)`` into a hook."""

    interval: int
    fn: object

    def after_backward(self, step, model, batch):
        pass

    def __call__(self, step, model):
        self.fn(step, model)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    batch_index: int = 0
    momentum: dict[str, np.ndarray] = field(default_factory=dict)


class Trainer:
    def __init__(self, model: Model, data: Sequence[Sequence[int]], config: TrainConfig, hooks=()):
        self.model = model
        self.data = data
        self.config = config
        self.hooks = list(hooks)
        self.state = TrainState()
        self.losses: list[float] = []
        self._epoch_cache: tuple[int, list[Batch]] | None = None

    def _batches(self, epoch: int) -> list[Batch]:
        if self._epoch_cache is None or self._epoch_cache[0] != epoch:
            c = self.config
            self._epoch_cache = (epoch, make_batches(self.data, c.batch_size, c.seq_len, c.seed, epoch))
        return self._epoch_cache[1]

    def steps_per_epoch(self) -> int:
        return len(self._batches(self.state.epoch))

    def lr_at(self, step: int) -> float:
        c = self.config
        if c.warmup_steps > 0 and step <= c.warmup_steps:
            return c.lr * step / c.warmup_steps
        return c.lr

    def train_step(self, batch: Batch) -> float:
        st, c, model = self.state, self.config, self.model
        step = st.step + 1
        model.zero_grad()
        loss = model.loss(batch)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss is {value} at step {step}; lower the learning rate")
        loss.backward()
        for hook in self.hooks:
            hook.after_backward(step, model, batch)

        params = [p for p in model.named_parameters()]
        sq = sum(float(np.sum(p.tensor.grad.astype(np.float64) ** 2)) for p in params)
        coef = 1.0
        if c.clip_norm and sq > c.clip_norm**2:
            coef = c.clip_norm / math.sqrt(sq)
        lr = self.lr_at(step)
        for p in params:
            buf = st.momentum.get(p.name)
            g = p.tensor.grad * np.float32(coef)
            buf = g if buf is None or buf.shape != g.shape else np.float32(c.momentum) * buf + g
            if p.mask is not None:
                buf = buf * p.mask.astype(np.float32)
            st.momentum[p.name] = buf
            p.tensor.data -= np.float32(lr) * buf
            p.apply_mask_()
        stale = set(st.momentum) - set(model.params)
        for k in stale:
            del st.momentum[k]

        st.step = step
        self.losses.append(value)
        for hook in self.hooks:
            if step % hook.interval == 0:
                hook(step, model)
        return value

    def run(self, *, epochs: int | None = None, steps: int | None = None) -> list[float]:
        """Train for ``steps`` optimizer steps, or up to the end of ``epochs`` more epochs."""
        if (epochs is None) == (steps is None):
            raise ValueError("give exactly one of epochs / steps")
        st = self.state
        start = len(self.losses)
        end_epoch = st.epoch + epochs if epochs is not None else None
        remaining = steps
        while True:
            if end_epoch is not None and st.epoch >= end_epoch:
                break
            if remaining is not None and remaining <= 0:
                break
            batches = self._batches(st.epoch)
            if st.batch_index >= len(batches):
                st.epoch += 1
                st.batch_index = 0
                continue
            self.train_step(batches[st.batch_index])
            st.batch_index += 1
            if remaining is not None:
                remaining -= 1
            if st.batch_index >= len(batches):
                st.epoch += 1
                st.batch_index = 0
        return self.losses[start:]

    # -- checkpointing
    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        tensors = dict(self.model.state_tensors())
        for k, v in self.state.momentum.items():
            tensors[f"opt/{k}"] = v
        meta = {
            "model": self.model.layout(),
            "train": asdict(self.config),
            "step": self.state.step,
            "epoch": self.state.epoch,
            "batch_index": self.state.batch_index,
        }
        meta.update(extra_meta or {})
        checkpoint.save(path, tensors, meta)

    @classmethod
    def restore(cls, path: str | Path, data, hooks=(), config: TrainConfig | None = None) -> "Trainer":
        tensors, meta = checkpoint.load(path)
        model = Model.from_state(meta["model"], {k: v for k, v in tensors.items() if not k.startswith("opt/")})
        tr = cls(model, data, config or TrainConfig(**meta["train"]), hooks)
        tr.state = TrainState(
            step=meta["step"],
            epoch=meta["epoch"],
            batch_index=meta["batch_index"],
            momentum={k[4:]: v for k, v in tensors.items() if k.startswith("opt/")},
        )
        return tr


def load_meta(path: str | Path) -> dict:
    return checkpoint.load(path)[1]


def train(model: Model, data, config: TrainConfig, *, epochs=None, steps=None, hooks=()):
    """Convenience wrapper returning ``(model, loss_trace)``."""
    tr = Trainer(model, data, config, hooks)
    trace = tr.run(epochs=epochs, steps=steps)
    return model, trace
