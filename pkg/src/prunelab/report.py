"""Report tables rendered twice from the same rows: aligned text and JSON lines."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .metrics import relative_change


# relative changes and speed-ups are reported to one decimal
FORMATS = {"delta_pct": ".1f", "speedup": ".1f"}


@dataclass
class Table:
    title: str
    columns: list[str]
    rows: list[dict[str, Any]] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    def text(self) -> str:
        cells = [[_cell(r.get(c), c) for c in self.columns] for r in self.rows]
        widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(self.columns)]

        def line(vals):
            return "  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(vals, widths))).rstrip()

        out = [self.title, line(self.columns), line(["-" * w for w in widths])]
        out += [line(row) for row in cells]
        return "\n".join(out) + "\n"

    def jsonl(self) -> str:
        lines = []
        for r in self.rows:
            rec = {"table": self.title}
            rec.update({c: _jsonable(r.get(c), c) for c in self.columns})
            lines.append(json.dumps(rec, sort_keys=False))
        return "".join(x + "\n" for x in lines)

    def write(self, directory: str | Path, stem: str) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        txt, js = d / f"{stem}.txt", d / f"{stem}.jsonl"
        txt.write_text(self.text(), encoding="utf-8")
        js.write_text(self.jsonl(), encoding="utf-8")
        return txt, js


def _cell(v: Any, column: str = "") -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return format(v, FORMATS.get(column, ".3f"))
    return str(v)


def _jsonable(v: Any, column: str = "") -> Any:
    # round floats the way the text table shows them, so both views agree
    if isinstance(v, float):
        return float(_cell(v, column))
    return v


@dataclass
class Result:
    """One evaluated checkpoint."""

    label: str
    ppl: float
    effective_params: int
    flops: int
    criterion: str | None = None
    method: str | None = None
    scheduler: str | None = None
    target: float | None = None


def experiment_table(results: Sequence[Result], reference: Result, title: str = "pruning results") -> Table:
    t = Table(title, ["model", "criterion", "method", "scheduler", "params", "ppl", "delta_pct",
                      "flops", "speedup"])
    for r in results:
        t.add(model=r.label, criterion=r.criterion, method=r.method, scheduler=r.scheduler,
              params=r.effective_params, ppl=r.ppl, delta_pct=relative_change(r.ppl, reference.ppl),
              flops=r.flops, speedup=round(reference.flops / r.flops, 1))
    return t


def comparison_table(results: Sequence[Result], axis: str, base: str, other: str, title: str) -> Table:
    """Pivot ``results`` on ``axis`` (scheduler / criterion / method): one row per
    remaining configuration and target, Δ% of ``other`` relative to ``base``."""
    keys = [k for k in ("criterion", "method", "scheduler") if k != axis]
    groups: dict[tuple, dict[str, Result]] = {}
    for r in results:
        g = tuple(getattr(r, k) for k in keys) + (r.target,)
        groups.setdefault(g, {})[getattr(r, axis)] = r
    t = Table(title, keys + ["target", base, other, "delta_pct"])
    for g, by in groups.items():
        if base in by and other in by:
            row = dict(zip(keys + ["target"], g))
            row.update({base: by[base].ppl, other: by[other].ppl,
                        "delta_pct": relative_change(by[other].ppl, by[base].ppl)})
            t.add(**row)
    return t
