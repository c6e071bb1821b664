"""Experiment configuration files.

The on-disk format is INI-style text: one ``[section]`` per component and
``key = value`` lines, with a mandatory ``version`` under ``[experiment]``.
Values are parsed according to the dataclass field types; unknown sections
or keys are rejected so a typo can never silently fall back to a default.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .model import ModelConfig
from .pruning import CRITERIA, METHODS
from .train import TrainConfig

FORMAT_VERSION = 1
SCHEDULERS = ("one_shot", "incremental")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    corpus: str = "bundled"  # path, or "bundled" for the packaged corpus
    dev_fraction: float = 0.05
    vocab_size: int = 2000


@dataclass
class BaselineConfig:
    epochs: int = 6


@dataclass
class PruneConfig:
    criterion: str = "magnitude"
    method: str = "unstructured"
    scheduler: str = "one_shot"
    target_sizes: list[float] = field(default_factory=lambda: [0.5, 0.25, 0.1, 0.05])
    n: int = 10
    delta_t: int = 60
    recovery_steps: int = 0  # extra training after each stage's window
    lr: float = 0.03


@dataclass
class FinetuneConfig:
    epochs: int = 10


@dataclass
class ExperimentConfig:
    version: int = FORMAT_VERSION
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.1))
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def __post_init__(self):
        # the experiment seed and the data section own these; sections do not repeat them
        self.model = replace(self.model, seed=self.seed, vocab_size=self.data.vocab_size)
        self.train = replace(self.train, seed=self.seed)

    def validate(self) -> "ExperimentConfig":
        if self.version != FORMAT_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        p = self.prune
        if p.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}, got {p.criterion!r}")
        if p.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {p.method!r}")
        if p.scheduler not in SCHEDULERS:
            raise ConfigError(f"scheduler must be one of {SCHEDULERS}, got {p.scheduler!r}")
        if not p.target_sizes:
            raise ConfigError("target_sizes is empty")
        if any(not 0.0 < s <= 1.0 for s in p.target_sizes):
            raise ConfigError("target sizes are fractions of the baseline in (0, 1]")
        if any(b >= a for a, b in zip(p.target_sizes, p.target_sizes[1:])):
            raise ConfigError(f"target sizes must be strictly decreasing, got {p.target_sizes}")
        if p.n < 1 or p.delta_t < 1 or p.recovery_steps < 0 or p.lr <= 0:
            raise ConfigError("prune: n and delta_t must be >= 1, recovery_steps >= 0, lr > 0")
        if not 0.0 < self.data.dev_fraction < 1.0:
            raise ConfigError("dev_fraction must lie in (0, 1)")
        if self.baseline.epochs < 1 or self.finetune.epochs < 0:
            raise ConfigError("baseline epochs must be >= 1 and finetune epochs >= 0")
        try:
            self.model.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "baseline": BaselineConfig,
    "prune": PruneConfig,
    "finetune": FinetuneConfig,
}
_TOP = ("version", "seed", "output_dir")
_DERIVED = {"model": ("seed", "vocab_size"), "train": ("seed",)}


def _format(value: Any) -> str:
    if isinstance(value, list):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, kind: str, where: str) -> Any:
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("list[float]"):
            return [float(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}") from None
    return raw


def dumps(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp["experiment"] = {k: _format(getattr(cfg, k)) for k in _TOP}
    for name in _SECTIONS:
        skip = _DERIVED.get(name, ())
        cp[name] = {k: _format(v) for k, v in asdict(getattr(cfg, name)).items() if k not in skip}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def loads(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}".splitlines()[0]) from None
    unknown = set(cp.sections()) - set(_SECTIONS) - {"experiment"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    if "experiment" not in cp or "version" not in cp["experiment"]:
        raise ConfigError("missing [experiment] version")
    top = cp["experiment"]
    extra = set(top) - set(_TOP)
    if extra:
        raise ConfigError(f"unknown key(s) in [experiment]: {', '.join(sorted(extra))}")
    kinds = {f.name: str(f.type) for f in fields(ExperimentConfig)}
    kw: dict[str, Any] = {k: _parse(top[k], kinds[k], f"experiment.{k}") for k in top}
    for name, cls in _SECTIONS.items():
        if name not in cp:
            continue
        sec = cp[name]
        known = {f.name: str(f.type) for f in fields(cls) if f.name not in _DERIVED.get(name, ())}
        extra = set(sec) - set(known)
        if extra:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(extra))}")
        kw[name] = cls(**{k: _parse(sec[k], known[k], f"{name}.{k}") for k in sec})
    return ExperimentConfig(**kw).validate()


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    return loads(path.read_text(encoding="utf-8"))


def save(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")
