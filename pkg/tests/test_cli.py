import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

from privfuse import fixtures_dir
from privfuse.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main
from privfuse.embeddings import read_header
from privfuse.pipeline import OUT_DIR_ENV, PipelineConfig

CFG = str(fixtures_dir() / "pipeline.cfg")
# shrinks every training loop so plumbing tests stay quick
FAST = [
    "word_epochs=1",
    "word_dim=8",
    "hetero_epochs=3",
    "hidden_dim=16",
    "out_dim=8",
    "gan_epochs=1",
    "gan_iterations=20",
    "gan_hidden=16",
    "fusion_epochs=3",
    "fusion_out_dim=8",
    "repeats=2",
]


def fast_args(*extra):
    out = ["-c", CFG]
    for kv in FAST:
        out += ["-s", kv]
    return out + list(extra)


def outputs(root: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.is_file()}


@pytest.fixture(autouse=True)
def no_env_out_dir(monkeypatch):
    monkeypatch.delenv(OUT_DIR_ENV, raising=False)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    t0 = time.perf_counter()
    code = main(["run", "-c", CFG, "-o", str(out), "-q"])
    return code, time.perf_counter() - t0, out


def test_fixture_pipeline_end_to_end(full_run):
    code, seconds, out = full_run
    assert code == EXIT_OK
    assert seconds <= 300
    for stage in ("sanitize", "embed", "align", "fuse", "eval"):
        assert (out / f"{stage}.json").exists()
    summary = json.loads((out / "eval.json").read_text())["summary"]
    assert all(0.0 <= v <= 1.0 for v in summary.values())
    assert json.loads((out / "align.json").read_text())["n_anchors"] > 0


def test_every_output_carries_provenance(full_run):
    _, _, out = full_run
    for p in out.iterdir():
        if p.name.endswith(".txt") and not p.name.startswith("anchors"):
            head = read_header(p)
        elif p.suffix == ".txt":
            head = json.loads(p.read_text().splitlines()[0][2:])
        elif p.suffix == ".jsonl":
            head = json.loads(p.read_text().splitlines()[0])["provenance"]
        elif p.suffix == ".json":
            head = json.loads(p.read_text())["provenance"]
        elif p.suffix == ".pfck":
            from privfuse.embeddings import load_checkpoint

            head = load_checkpoint(p)[1]
        else:
            pytest.fail(f"unexpected output {p.name}")
        assert head["tool"] == "privfuse" and head["seed"] == 0 and "budget" in head, p.name
        assert "inputs" in head


def test_stages_run_separately_and_deterministically(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for stage in ("sanitize", "embed", "align", "fuse", "eval"):
        assert main([stage, *fast_args("-o", str(a), "-q")]) == EXIT_OK
    assert main(["run", *fast_args("-o", str(b), "-q")]) == EXIT_OK
    assert outputs(a) == outputs(b)


def test_stage_needs_previous_stage(tmp_path, capsys):
    assert main(["embed", *fast_args("-o", str(tmp_path), "-q")]) == EXIT_VALIDATION
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["command"] == "embed" and "sanitize" in record["message"]
    assert json.loads((tmp_path / "embed.error.json").read_text()) == record


def test_seed_override_reaches_provenance(tmp_path):
    assert main(["run", *fast_args("-o", str(tmp_path), "--seed", "17", "-q")]) == EXIT_OK
    for stage in ("sanitize", "embed", "align", "fuse", "eval"):
        assert json.loads((tmp_path / f"{stage}.json").read_text())["provenance"]["seed"] == 17
    emb = next(tmp_path.glob("emb_a-*.txt"))
    assert read_header(emb)["seed"] == 17


def test_env_var_sets_out_dir(tmp_path, monkeypatch):
    target = tmp_path / "from-env"
    monkeypatch.setenv(OUT_DIR_ENV, str(target))
    assert PipelineConfig.from_sources(CFG, ["out_dir=elsewhere"]).out_dir == str(target)
    assert main(["sanitize", *fast_args("-o", str(tmp_path / "flag"), "-q")]) == EXIT_OK
    assert (target / "sanitize.json").exists() and not (tmp_path / "flag").exists()


def test_sweep_emits_four_rows_per_metric(tmp_path):
    assert main(["sweep", *fast_args("-o", str(tmp_path), "-q")]) == EXIT_OK
    doc = json.loads((tmp_path / "sweep.json").read_text())
    lines = (tmp_path / doc["csv"]).read_text().splitlines()
    assert lines[0].startswith("# ")
    rows = list(csv.DictReader(lines[1:]))
    by_metric: dict = {}
    for r in rows:
        by_metric.setdefault((r["task"], r["metric"]), []).append(float(r["epsilon"]))
    assert by_metric and all(sorted(v) == [1.0, 5.0, 10.0, 15.0] for v in by_metric.values())


def test_tmr_from_precision_table(tmp_path, capsys):
    table = {
        "task": {"attribute": 0.4, "friendship": 0.453, "posts": 0.463},
        "gender": {"attribute": 0.9, "friendship": 0.508, "posts": 0.569},
        "occupation": {"attribute": 0.5, "friendship": 0.102, "posts": 0.149},
    }
    (tmp_path / "prec.json").write_text(json.dumps(table))
    code = main(["tmr", "-c", CFG, "-o", str(tmp_path), "--precisions", str(tmp_path / "prec.json")])
    assert code == EXIT_OK
    doc = json.loads((tmp_path / "tmr.json").read_text())
    assert round(doc["rows"]["friendship"]["tmr"], 3) == 0.743
    alloc = doc["allocation"]
    assert sum(alloc.values()) == pytest.approx(22.5)
    assert "allocation" in capsys.readouterr().out


def test_tmr_measured_on_fixture(tmp_path):
    assert main(["tmr", *fast_args("-o", str(tmp_path), "-q")]) == EXIT_OK
    rows = json.loads((tmp_path / "tmr.json").read_text())["rows"]
    assert set(rows) == {"attribute", "friendship", "posts"}
    assert all(r["tmr"] > 0 for r in rows.values())


def test_unknown_subcommand_prints_usage(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_missing_command_and_bad_flag(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["run", "--no-such-flag"]) == EXIT_USAGE
    assert main(["--help"]) == EXIT_OK


def test_console_script_usage_exit():
    proc = subprocess.run([sys.executable, "-m", "privfuse.cli", "nope"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE and "usage:" in proc.stderr


@pytest.mark.parametrize(
    "override",
    ["eps_a=0", "unknown_key=1", "seed=abc", "ablation=sideways", "gan_beta=0.5", "noequals"],
)
def test_bad_configuration_is_a_validation_error(tmp_path, override, capsys):
    assert main(["sanitize", "-c", CFG, "-o", str(tmp_path), "-s", override]) == EXIT_VALIDATION
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["exit_code"] == EXIT_VALIDATION


def test_missing_graph_file(tmp_path):
    cfg = tmp_path / "p.cfg"
    cfg.write_text("graph_a = nope.jsonl\ngraph_b = nope.jsonl\n")
    assert main(["sanitize", "-c", str(cfg), "-o", str(tmp_path / "o")]) == EXIT_VALIDATION


def test_numeric_failure_exit_code(tmp_path, capsys):
    # a huge learning rate makes the encoder loss overflow
    code = main(["run", *fast_args("-o", str(tmp_path), "-s", "hetero_lr=1e200", "-s", "hetero_epochs=5", "-q")])
    assert code == EXIT_NUMERIC
    record = json.loads((tmp_path / "run.error.json").read_text())
    assert record["error"] == "FloatingPointError"
    assert not list(tmp_path.glob(".partial-*"))


def test_corrupted_embedding_reported_with_line(tmp_path, capsys):
    bad = tmp_path / "emb.txt"
    bad.write_text("2 3\nu1 0.1 0.2 0.3\nu2 0.1 oops 0.3\n")
    assert main(["verify", "--restarts", "1", "--files", str(bad)]) == EXIT_NUMERIC
    out = capsys.readouterr().out
    assert f"FAIL load {bad}" in out and f"{bad}:3:" in out


def test_verify_passes(capsys):
    assert main(["verify"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    names = {"mdp-ratio", "pm-unbiased", "encoder-gradient", "fusion-gradient", "power-oracle"}
    assert {l.split()[1].rstrip(":") for l in lines} == names
    assert all(l.startswith("PASS") for l in lines)
