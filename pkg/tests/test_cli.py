import json
import subprocess
import sys
import time

import numpy as np
import pytest

from prunelab import checkpoint
from prunelab import tensor as T
from prunelab.cli import main
from prunelab.model import Model

FAST_PRUNE = ["--n", "2", "--delta-t", "5"]


def run_cli(*argv):
    return main([str(a) for a in argv])


def load_model(path):
    tensors, meta = checkpoint.load(path)
    return Model.from_state(meta["model"], {k: v for k, v in tensors.items() if not k.startswith("opt/")}), meta


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    t = time.perf_counter()
    assert run_cli("train", "--corpus", "bundled-1k", "--out", out) == 0
    return out, time.perf_counter() - t


def test_smoke_train_on_small_bundled_corpus(trained):
    out, seconds = trained
    assert seconds < 300
    for name in ("config.ini", "vocab.json", "baseline.ckpt", "baseline_loss.txt"):
        assert (out / name).is_file()
    losses = [float(line.split()[1]) for line in (out / "baseline_loss.txt").read_text().splitlines()]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_missing_corpus_exits_2_with_one_json_line(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "prunelab", "train", "--corpus", str(tmp_path / "none.txt"),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2
    lines = proc.stderr.strip().splitlines()
    assert len(lines) == 1
    err = json.loads(lines[0])
    assert err["error"] == "not_found" and "none.txt" in err["message"]


@pytest.mark.parametrize("argv, code", [
    (["prune", "--checkpoint", "missing.ckpt"], 2),
    (["bogus"], 2),
    (["prune", "--sizes", "0.2,0.5", "--checkpoint", "x"], 3),
    (["flops"], 2),
])
def test_failure_paths_emit_single_error_line(argv, code, capsys, tmp_path):
    assert run_cli(*argv, *([] if argv == ["bogus"] or argv == ["flops"] else ["--out", tmp_path])) == code
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and set(json.loads(err[0])) == {"error", "message"}


def test_resume_is_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    common = ["--corpus", "bundled-1k", "--max-lines", "200"]
    assert run_cli("train", *common, "--out", a, "--epochs", "2") == 0
    assert run_cli("train", *common, "--out", b, "--epochs", "1") == 0
    assert run_cli("train", "--out", b, "--epochs", "2", "--resume") == 0
    assert (a / "baseline.ckpt").read_bytes() == (b / "baseline.ckpt").read_bytes()
    assert (a / "baseline_loss.txt").read_text() == (b / "baseline_loss.txt").read_text()


@pytest.fixture(scope="module")
def pruned(trained):
    out, _ = trained
    assert run_cli("prune", "--out", out, "--criterion", "data", "--scheduler", "incremental",
                   "--sizes", "0.5,0.25,0.1,0.05", *FAST_PRUNE) == 0
    return out


def test_prune_sizes_within_one_percent(pruned):
    base, _ = load_model(pruned / "baseline.ckpt")
    n = base.total_params()
    for frac, tag in ((0.5, "50"), (0.25, "25"), (0.1, "10"), (0.05, "5")):
        model, meta = load_model(pruned / f"prune-data-unstructured-incremental-{tag}.ckpt")
        assert meta["prune"]["target_size"] == frac
        assert abs(model.effective_params() - frac * n) <= 0.01 * frac * n
    events = [json.loads(x) for x in (pruned / "events.jsonl").read_text().splitlines()]
    assert sum(1 for e in events if "stage" in e) == 4


def test_later_stages_only_remove_weights(pruned):
    prev = None
    for tag in ("50", "25", "10", "5"):
        model, _ = load_model(pruned / f"prune-data-unstructured-incremental-{tag}.ckpt")
        masks = {p.name: p.mask for p in model.params.values() if p.mask is not None}
        if prev:
            assert all(np.all(masks[k] <= prev[k]) for k in masks)
        prev = masks


def test_one_shot_prunes_in_a_single_step(trained, tmp_path):
    out, _ = trained
    assert run_cli("prune", "--checkpoint", out / "baseline.ckpt", "--out", tmp_path, "--one-shot",
                   "--sizes", "0.5") == 0
    events = [json.loads(x) for x in (tmp_path / "events.jsonl").read_text().splitlines()]
    steps = {e["step"] for e in events if "layer" in e}
    assert len(steps) == 1
    assert all(e["achieved"] == pytest.approx(e["target"], abs=1e-3) for e in events if "layer" in e)


def test_factorized_export_is_logit_equivalent(trained, tmp_path):
    out, _ = trained
    assert run_cli("prune", "--checkpoint", out / "baseline.ckpt", "--out", tmp_path, "--method", "factorized",
                   "--sizes", "0.5", "--export-dense", *FAST_PRUNE) == 0
    # float64 forward so the comparison sees the export, not float32 round-off
    with T.precision(np.float64), T.no_grad():
        fac, _ = load_model(tmp_path / "prune-magnitude-factorized-one_shot-50.ckpt")
        dense, _ = load_model(tmp_path / "prune-magnitude-factorized-one_shot-50-dense.ckpt")
        assert all(p.mode == "lowrank" for p in dense.projections.values())
        assert dense.effective_params() < fac.effective_params()
        x = np.random.default_rng(0).integers(4, fac.config.vocab_size, size=(3, 20))
        np.testing.assert_allclose(dense(x).data, fac(x).data, atol=1e-6)


def test_finetune_keeps_masked_weights_at_zero(pruned, capsys):
    src = pruned / "prune-data-unstructured-incremental-10.ckpt"
    assert run_cli("finetune", src, "--epochs", "2") == 0
    res = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert len(res["ppl"]) == 3
    assert np.mean(res["ppl"][1:]) <= res["ppl"][0]
    before, _ = load_model(src)
    after, meta = load_model(pruned / "prune-data-unstructured-incremental-10-ft2.ckpt")
    assert meta["finetune_epochs"] == 2
    for name, p in after.params.items():
        if p.mask is not None:
            np.testing.assert_array_equal(p.mask, before.params[name].mask)
            assert np.all(p.tensor.data[p.mask == 0] == 0)
    trace = (pruned / "prune-data-unstructured-incremental-10-ft2.ppl.txt").read_text().splitlines()
    assert [int(line.split()[0]) for line in trace] == [0, 1, 2]


def test_report_against_itself_is_zero(trained, tmp_path, capsys):
    out, _ = trained
    ckpt = out / "baseline.ckpt"
    assert run_cli("report", "--reference", ckpt, ckpt, "--report-dir", tmp_path) == 0
    rows = [json.loads(x) for x in (tmp_path / "results.jsonl").read_text().splitlines()]
    assert rows[0]["delta_pct"] == 0.0 and rows[0]["speedup"] == 1.0
    assert "0.0" in capsys.readouterr().out


def test_reports_are_deterministic_and_views_agree(pruned, tmp_path):
    ckpts = sorted(pruned.glob("prune-data-unstructured-incremental-*[0-9].ckpt"))
    for d in ("a", "b"):
        assert run_cli("report", "--reference", pruned / "baseline.ckpt", *ckpts, "--report-dir", tmp_path / d) == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    text = (tmp_path / "a" / "results.txt").read_text().splitlines()[3:]
    rows = [json.loads(x) for x in (tmp_path / "a" / "results.jsonl").read_text().splitlines()]
    for line, row in zip(text, rows, strict=True):
        cells = line.split()
        assert cells[0] == row["model"]
        assert float(cells[5]) == row["ppl"] and float(cells[6]) == row["delta_pct"]
        assert int(cells[7]) == row["flops"]


def test_vocab_mismatch_is_an_evaluation_error(trained, tmp_path, capsys):
    out, _ = trained
    assert run_cli("train", "--corpus", "bundled-1k", "--max-lines", "100", "--epochs", "1", "--out", tmp_path) == 0
    assert run_cli("eval", out / "baseline.ckpt", tmp_path / "baseline.ckpt") == 5
    assert json.loads(capsys.readouterr().err.strip())["error"] == "evaluation"


def test_flops_for_single_layer(capsys):
    assert run_cli("flops", "--dims", "512", "512", "--rank", "12") == 0
    out = capsys.readouterr().out
    assert "524288" in out and "24576" in out and "21.3" in out


def test_percentiles_and_ablation(pruned, tmp_path, capsys):
    assert run_cli("percentiles", pruned / "baseline.ckpt", "--report-dir", tmp_path) == 0
    row = json.loads((tmp_path / "percentiles.jsonl").read_text())
    assert {"p25", "p50", "p75", "p100"} <= set(row)
    assert run_cli("ablate-layer", pruned / "baseline.ckpt", "--layer", "blocks.0.ffn.up", "--epochs", "1",
                   "--report-dir", tmp_path) == 0
    assert (tmp_path / "ablate-blocks.0.ffn.up.dat").is_file()
    assert run_cli("ablate-layer", pruned / "baseline.ckpt", "--layer", "nope") == 3
