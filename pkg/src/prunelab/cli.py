"""Command-line interface: ``prunelab <command> [options]``.

Every failure exits nonzero and prints one JSON line to stderr:
``{"error": "<code>", "message": "..."}``.

Environment overrides: ``PRUNELAB_OUTPUT_ROOT`` (prefix for relative output
directories) and ``PRUNELAB_THREADS`` (BLAS / OpenMP thread count).
"""

from __future__ import annotations

import os

_threads = os.environ.get("PRUNELAB_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

from . import checkpoint as ckpt_mod  # noqa: E402
from . import config as cfg_mod  # noqa: E402
from . import corpus as corpus_mod  # noqa: E402
from .experiments import (  # noqa: E402
    Dataset,
    PruneRun,
    layer_ablation,
    prepare_data,
    run_pruning,
    sparsity_for_size,
)
from .factorization import FactorizationError  # noqa: E402
from .metrics import (  # noqa: E402
    EvaluationError,
    FlopReport,
    flops,
    percentile_buckets,
    percentile_ppl,
    perplexity,
    projection_flops,
    relative_change,
)
from .model import ConfigError as ModelConfigError  # noqa: E402
from .model import Model, build_model  # noqa: E402
from .pruning import METHODS, CRITERIA, ConfigError as PruneConfigError, EventLog  # noqa: E402
from .report import Result, Table, comparison_table, experiment_table  # noqa: E402
from .tokenizer import ConfigError as VocabConfigError  # noqa: E402
from .tokenizer import IngestionError, Vocabulary  # noqa: E402
from .train import Trainer, TrainingDiverged  # noqa: E402

log = logging.getLogger("prunelab")

EXIT = {
    "usage": 2,
    "not_found": 2,
    "ingestion": 2,
    "config": 3,
    "checkpoint": 4,
    "evaluation": 5,
    "diverged": 6,
    "internal": 1,
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def output_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get("PRUNELAB_OUTPUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def corpus_path(source: str) -> Path:
    if source == "bundled":
        return corpus_mod.bundled_corpus_path()
    if source == "bundled-1k":
        return corpus_mod.bundled_corpus_path("smoke")
    return Path(source)


def load_lines(source: str, max_lines: int | None = None) -> list[str]:
    path = corpus_path(source)
    if not path.is_file():
        raise CliError("not_found", f"corpus not found: {source}")
    lines = corpus_mod.read_corpus(path)
    return lines[:max_lines] if max_lines else lines


def load_config(path: str | None) -> cfg_mod.ExperimentConfig:
    if path is None:
        return cfg_mod.ExperimentConfig().validate()
    if not Path(path).is_file():
        raise CliError("not_found", f"config not found: {path}")
    return cfg_mod.load(path)


_DATA_CACHE: dict[tuple, Dataset] = {}


def dataset_for(meta: dict, corpus_override: str | None = None) -> Dataset:
    d = meta["data"]
    source = corpus_override or d["corpus"]
    vocab = Vocabulary(d["merges"])
    key = (source, d.get("max_lines"), d["dev_fraction"], vocab.fingerprint())
    if key not in _DATA_CACHE:
        lines = load_lines(source, d.get("max_lines"))
        _DATA_CACHE[key] = prepare_data(lines, len(vocab), d["dev_fraction"], vocab=vocab)
    return _DATA_CACHE[key]


def load_trainer(path: str, corpus_override: str | None = None) -> tuple[Trainer, dict, Dataset]:
    if not Path(path).is_file():
        raise CliError("not_found", f"checkpoint not found: {path}")
    meta = ckpt_mod.load(path)[1]
    if "data" not in meta:
        raise CliError("checkpoint", f"{path}: not a prunelab run checkpoint")
    data = dataset_for(meta, corpus_override)
    tr = Trainer.restore(path, data.train_ids)
    return tr, meta, data


def save_trainer(tr: Trainer, path: Path, base_meta: dict, **extra) -> None:
    meta = {k: v for k, v in base_meta.items() if k not in ("model", "train", "step", "epoch", "batch_index")}
    meta.update(extra)
    tr.save(path, meta)


def label_of(path: str) -> str:
    return Path(path).stem


def result_for(path: str, tr: Trainer, meta: dict, data: Dataset, context: int | None) -> Result:
    p = meta.get("prune", {})
    return Result(
        label=label_of(path),
        ppl=perplexity(tr.model, data.dev_ids),
        effective_params=tr.model.effective_params(),
        flops=flops(tr.model, context).total,
        criterion=p.get("criterion"),
        method=p.get("method"),
        scheduler=p.get("scheduler"),
        target=p.get("target_size"),
    )


def check_same_vocab(metas: list[tuple[str, dict]]) -> None:
    prints = {Vocabulary(m["data"]["merges"]).fingerprint() for _, m in metas}
    if len(prints) > 1:
        raise CliError("evaluation", "checkpoints do not share a vocabulary")


def emit(table: Table, out: Path | None, stem: str) -> None:
    sys.stdout.write(table.text())
    if out is not None:
        table.write(out, stem)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.corpus:
        cfg.data.corpus = args.corpus
    if args.epochs:
        cfg.baseline.epochs = args.epochs
    if args.out:
        cfg.output_dir = args.out
    out = output_dir(cfg.output_dir)
    cfg_mod.save(cfg, out / "config.ini")
    ckpt = out / "baseline.ckpt"
    if args.resume:
        if not ckpt.is_file():
            raise CliError("not_found", f"nothing to resume: {ckpt}")
        tr, meta, data = load_trainer(str(ckpt))
    else:
        lines = load_lines(cfg.data.corpus, args.max_lines)
        data = prepare_data(lines, cfg.data.vocab_size, cfg.data.dev_fraction)
        data.vocab.save(out / "vocab.json")
        model = build_model(replace(cfg.model, vocab_size=len(data.vocab)))
        tr = Trainer(model, data.train_ids, cfg.train)
        meta = {"role": "baseline",
                "data": {"corpus": cfg.data.corpus, "max_lines": args.max_lines,
                         "dev_fraction": cfg.data.dev_fraction, "merges": [list(m) for m in data.vocab.merges]}}
        (out / "baseline_loss.txt").write_text("")
    with open(out / "baseline_loss.txt", "a", encoding="utf-8") as fh:
        while tr.state.epoch < cfg.baseline.epochs:
            start = tr.state.step
            losses = tr.run(epochs=1)
            fh.writelines(f"{start + i + 1} {v:.6f}\n" for i, v in enumerate(losses))
            save_trainer(tr, ckpt, meta, baseline_params=tr.model.total_params())
            log.info("epoch %d: mean loss %.4f", tr.state.epoch, sum(losses) / max(len(losses), 1))
    ppl = perplexity(tr.model, data.dev_ids)
    print(json.dumps({"checkpoint": str(ckpt), "epochs": tr.state.epoch, "steps": tr.state.step,
                      "params": tr.model.total_params(), "dev_ppl": round(ppl, 4)}))
    return 0


def cmd_prune(args) -> int:
    cfg = load_config(args.config)
    p = cfg.prune
    for key in ("criterion", "method", "scheduler", "n", "delta_t", "lr", "recovery_steps"):
        v = getattr(args, key)
        if v is not None:
            setattr(p, key, v)
    if args.one_shot:
        p.scheduler = "one_shot"
    if args.sizes:
        p.target_sizes = args.sizes
    cfg.validate()
    out = output_dir(args.out or cfg.output_dir)
    base_path = args.checkpoint or str(out / "baseline.ckpt")
    tr, meta, data = load_trainer(base_path, args.corpus)
    baseline_params = meta.get("baseline_params", tr.model.total_params())
    events = EventLog(out / "events.jsonl")
    s_prev = 0.0
    rows = []
    for frac in p.target_sizes:
        target = int(round(frac * baseline_params))
        try:
            s_f = sparsity_for_size(tr.model, p.method, target)
        except PruneConfigError as e:
            raise CliError("config", str(e)) from None
        s_f = max(s_f, s_prev)
        window = p.delta_t * (p.n if p.scheduler == "incremental" else 1)
        total = 0 if (p.scheduler == "one_shot" and p.recovery_steps == 0) else window + p.recovery_steps
        run = PruneRun(p.criterion, p.method, s_f, p.scheduler, s_i=s_prev, n=p.n, delta_t=p.delta_t,
                       total_steps=total, lr=p.lr)
        events({"stage": frac, "target_params": target, "layer_sparsity": s_f})
        tr, _ = run_pruning(tr, data, run, event_log=events)
        s_prev = s_f
        log.info("stage %g: layer sparsity %.4f, %d effective params", frac, s_f, tr.model.effective_params())
        tag = f"{frac * 100:g}".replace(".", "_")
        path = out / f"prune-{p.criterion}-{p.method}-{p.scheduler}-{tag}.ckpt"
        info = {"criterion": p.criterion, "method": p.method, "scheduler": p.scheduler,
                "target_size": frac, "target_params": target, "layer_sparsity": s_f}
        save_trainer(tr, path, meta, role="pruned", prune=info, baseline_params=baseline_params)
        row = {"checkpoint": path.name, "target_params": target, "effective_params": tr.model.effective_params(),
               "layer_sparsity": round(s_f, 6)}
        if args.export_dense and p.method == "factorized":
            dense = Trainer(tr.model.clone(), data.train_ids, tr.config)
            dense.state = replace(tr.state, momentum={})
            for name, proj in dense.model.projections.items():
                if proj.mode == "factorized":
                    dense.model.densify_layer(name)
            dpath = out / f"{path.stem}-dense.ckpt"
            save_trainer(dense, dpath, meta, role="densified", prune=info, baseline_params=baseline_params)
            row["dense_checkpoint"] = dpath.name
        rows.append(row)
        print(json.dumps(row))
    return 0


def cmd_finetune(args) -> int:
    tr, meta, data = load_trainer(args.checkpoint, args.corpus)
    cfg = load_config(args.config) if args.config else None
    epochs = args.epochs if args.epochs is not None else (cfg.finetune.epochs if cfg else 10)
    src = Path(args.checkpoint)
    out_path = Path(args.out) if args.out else src.with_name(f"{src.stem}-ft{epochs}.ckpt")
    trace = [(0, perplexity(tr.model, data.dev_ids))]
    for e in range(1, epochs + 1):
        tr.run(epochs=1)
        trace.append((e, perplexity(tr.model, data.dev_ids)))
        log.info("finetune epoch %d: dev ppl %.3f", e, trace[-1][1])
    save_trainer(tr, out_path, meta, finetune_epochs=meta.get("finetune_epochs", 0) + epochs)
    trace_path = out_path.with_suffix(".ppl.txt")
    trace_path.write_text("".join(f"{e} {v:.6f}\n" for e, v in trace), encoding="utf-8")
    print(json.dumps({"checkpoint": str(out_path), "trace": str(trace_path),
                      "ppl": [round(v, 4) for _, v in trace]}))
    return 0


def _evaluate_all(paths, corpus, context):
    loaded = [(p,) + load_trainer(p, corpus) for p in paths]
    check_same_vocab([(p, m) for p, _, m, _ in loaded])
    return [result_for(p, tr, m, d, context) for p, tr, m, d in loaded]


def cmd_eval(args) -> int:
    results = _evaluate_all(args.checkpoints, args.corpus, args.context)
    t = Table("evaluation", ["model", "params", "ppl", "flops"])
    for r in results:
        t.add(model=r.label, params=r.effective_params, ppl=r.ppl, flops=r.flops)
    emit(t, Path(args.report_dir) if args.report_dir else None, "eval")
    return 0


def cmd_report(args) -> int:
    results = _evaluate_all([args.reference] + list(args.checkpoints), args.corpus, args.context)
    ref, rest = results[0], results[1:]
    out = Path(args.report_dir) if args.report_dir else None
    emit(experiment_table(rest, ref, f"pruning results vs {ref.label}"), out, "results")
    pivots = [
        ("scheduler", "one_shot", "incremental", "scheduler comparison"),
        ("criterion", "magnitude", "data", "criterion comparison"),
    ]
    for axis, base, other, title in pivots:
        t = comparison_table(rest, axis, base, other, title)
        if t.rows:
            sys.stdout.write("\n")
            emit(t, out, axis)
    methods = Table(f"method comparison vs {ref.label}", ["method", "target", "ppl", "delta_pct"])
    for r in rest:
        if r.method in METHODS:
            methods.add(method=r.method, target=r.target, ppl=r.ppl, delta_pct=relative_change(r.ppl, ref.ppl))
    if methods.rows:
        sys.stdout.write("\n")
        emit(methods, out, "method")
    return 0


def cmd_ablate_layer(args) -> int:
    tr, meta, data = load_trainer(args.checkpoint, args.corpus)
    layers = [p.name for p in tr.model.prunable()] if args.layer == ["all"] else args.layer
    if args.lr is not None:
        tr.config = replace(tr.config, lr=args.lr)
    base = perplexity(tr.model, data.dev_ids)
    cols = ["layer"] + [f"epoch_{e}" for e in range(1, args.epochs + 1)] + ["delta_pct"]
    t = Table(f"layer ablation at sparsity {args.sparsity}", cols)
    out = Path(args.report_dir) if args.report_dir else None
    for name in layers:
        try:
            trace = layer_ablation(tr, data, name, args.sparsity, args.criterion, args.scheduler,
                                   args.epochs, n=args.n, delta_t=args.delta_t)
        except PruneConfigError as e:
            raise CliError("config", str(e)) from None
        row = {"layer": name, "delta_pct": relative_change(trace[-1], base)}
        row.update({f"epoch_{i}": v for i, v in enumerate(trace, start=1)})
        t.add(**row)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"ablate-{name}.dat").write_text("".join(f"{i} {v:.6f}\n" for i, v in enumerate(trace, 1)))
    emit(t, out, "ablation")
    return 0


def cmd_percentiles(args) -> int:
    loaded = [(p,) + load_trainer(p, args.corpus) for p in args.checkpoints]
    check_same_vocab([(p, m) for p, _, m, _ in loaded])
    data = loaded[0][3]
    buckets = percentile_buckets(data.dev_lines, corpus_mod.word_frequencies(data.train_lines))
    t = Table("perplexity by word-frequency percentile",
              ["model"] + [f"p{b.label}" for b in buckets])
    for p, tr, _, d in loaded:
        res = percentile_ppl(tr.model, buckets, d.dev_ids)
        row = {"model": label_of(p)}
        row.update({f"p{b.label}": b.perplexity for b in res})
        t.add(**row)
    emit(t, Path(args.report_dir) if args.report_dir else None, "percentiles")
    return 0


def cmd_flops(args) -> int:
    if args.dims:
        a, b = args.dims
        dense = projection_flops(a, b)
        t = Table("layer FLOPs per token", ["layer", "rank", "flops", "speedup"])
        t.add(layer=f"{a}x{b}", rank=None, flops=dense, speedup=1.0)
        if args.rank:
            f = projection_flops(a, b, args.rank)
            t.add(layer=f"{a}x{b}", rank=args.rank, flops=f, speedup=round(dense / f, 1))
        emit(t, None, "flops")
        return 0
    if not args.checkpoints:
        raise CliError("usage", "give checkpoints or --dims A B")
    reports: list[tuple[str, FlopReport]] = []
    for p in args.checkpoints:
        if not Path(p).is_file():
            raise CliError("not_found", f"checkpoint not found: {p}")
        tensors, meta = ckpt_mod.load(p)
        model = Model.from_state(meta["model"], {k: v for k, v in tensors.items() if not k.startswith("opt/")})
        reports.append((label_of(p), flops(model, args.context)))
    base = reports[0][1]
    t = Table(f"inference FLOPs per token vs {reports[0][0]}", ["model", "flops", "speedup"])
    for name, rep in reports:
        r = rep.against(base, reports[0][0])
        t.add(model=name, flops=r.total, speedup=round(r.ratio, 2))
    emit(t, Path(args.report_dir) if args.report_dir else None, "flops")
    return 0


# ---------------------------------------------------------------------------
# parser


def _sizes(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="prunelab", description="Pruning experiments for small Transformer LMs.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, corpus=True):
        if corpus:
            p.add_argument("--corpus", help="corpus path, 'bundled' or 'bundled-1k' (default: from config/checkpoint)")
        p.add_argument("--context", type=int, default=None, help="cached context length for FLOPs (default: max_seq_len)")
        p.add_argument("--report-dir", help="also write <table>.txt and <table>.jsonl here")

    p = sub.add_parser("train", help="train the baseline model")
    p.add_argument("--config", help="experiment config file (default: built-in defaults)")
    p.add_argument("--corpus", help="corpus path, 'bundled' or 'bundled-1k'")
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--epochs", type=int, help="baseline epochs (default: config, 6)")
    p.add_argument("--max-lines", type=int, help="use only the first N corpus lines")
    p.add_argument("--resume", action="store_true", help="continue from <out>/baseline.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="prune to each target size in turn, one checkpoint per size")
    p.add_argument("--config")
    p.add_argument("--checkpoint", help="starting checkpoint (default: <out>/baseline.ckpt)")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--criterion", choices=CRITERIA)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--scheduler", choices=cfg_mod.SCHEDULERS)
    p.add_argument("--one-shot", action="store_true", help="shorthand for --scheduler one_shot (n=1)")
    p.add_argument("--sizes", type=_sizes, help="comma-separated fractions of the baseline, e.g. 0.5,0.25")
    p.add_argument("--n", type=int, help="pruning steps per stage (default 10)")
    p.add_argument("--delta-t", dest="delta_t", type=int, help="steps between pruning steps (default 60)")
    p.add_argument("--lr", type=float, help="learning rate while pruning (default 0.03)")
    p.add_argument("--recovery-steps", dest="recovery_steps", type=int, help="training after each window")
    p.add_argument("--export-dense", action="store_true", help="also write densified factorized checkpoints")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("finetune", help="continue training with frozen masks")
    p.add_argument("checkpoint")
    p.add_argument("--epochs", type=int, help="default: config finetune.epochs or 10")
    p.add_argument("--config")
    p.add_argument("--corpus")
    p.add_argument("--out", help="output checkpoint path")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="dev perplexity, size and FLOPs of checkpoints")
    p.add_argument("checkpoints", nargs="+")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="comparison tables against a reference checkpoint")
    p.add_argument("--reference", required=True)
    p.add_argument("checkpoints", nargs="+")
    common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate-layer", help="prune single layers and trace dev perplexity")
    p.add_argument("checkpoint")
    p.add_argument("--layer", action="append", required=True, help="layer name (repeatable) or 'all'")
    p.add_argument("--sparsity", type=float, default=0.75)
    p.add_argument("--criterion", choices=CRITERIA, default="magnitude")
    p.add_argument("--scheduler", choices=cfg_mod.SCHEDULERS, default="one_shot")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--delta-t", dest="delta_t", type=int, default=20)
    p.add_argument("--lr", type=float, default=None)
    common(p)
    p.set_defaults(func=cmd_ablate_layer)

    p = sub.add_parser("percentiles", help="dev perplexity by word-frequency percentile")
    p.add_argument("checkpoints", nargs="+")
    common(p)
    p.set_defaults(func=cmd_percentiles)

    p = sub.add_parser("flops", help="inference FLOPs per token and speed-ups")
    p.add_argument("checkpoints", nargs="*")
    p.add_argument("--dims", type=int, nargs=2, metavar=("A", "B"), help="a single A×B layer instead")
    p.add_argument("--rank", type=int, help="factorized rank for --dims")
    common(p, corpus=False)
    p.set_defaults(func=cmd_flops)
    return ap


def _fail(code: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": " ".join(str(message).split())}) + "\n")
    return EXIT[code]


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as e:
        return _fail(e.code, str(e))
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as e:
        return _fail(e.code, str(e))
    except FileNotFoundError as e:
        return _fail("not_found", str(e))
    except IngestionError as e:
        return _fail("ingestion", str(e))
    except (cfg_mod.ConfigError, PruneConfigError, ModelConfigError, VocabConfigError, FactorizationError) as e:
        return _fail("config", str(e))
    except ckpt_mod.CheckpointError as e:
        return _fail("checkpoint", str(e))
    except EvaluationError as e:
        return _fail("evaluation", str(e))
    except TrainingDiverged as e:
        return _fail("diverged", str(e))
    except Exception as e:  # anything unexpected still leaves one parseable line
        log.debug("internal error", exc_info=True)
        return _fail("internal", f"{type(e).__name__}: {e}")


if __name__ == "__main__":
    sys.exit(main())
