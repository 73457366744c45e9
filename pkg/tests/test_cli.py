import json
import os
import shutil

import pandas as pd
import pytest

from cli import BENCH_COLUMNS, describe_circuit, linear_layer_ir, main
from graph_builder import compile_module, load_circuit
from ir_parser import parse_module
from tests.helpers import compile_fixture, fixture_path


@pytest.fixture
def workdir(tmp_path):
    for name in ("straight_line.ll", "unsupported.ll", "loop.ll"):
        shutil.copy(fixture_path(name), tmp_path / name)
    (tmp_path / "inputs.json").write_text(json.dumps({"x": [3, 4], "y": [5]}))
    return tmp_path


def test_compile_writes_circuit(workdir, capsys):
    src = str(workdir / "straight_line.ll")
    assert main(["compile", src, "--emit-json"]) == 0
    out = str(workdir / "straight_line.mpcg")
    assert os.path.exists(out) and os.path.exists(out + ".json")
    assert load_circuit(out) == compile_fixture("straight_line.ll")
    assert capsys.readouterr().out.startswith(out)


def test_compile_reports_diagnostics(workdir, capsys):
    assert main(["compile", str(workdir / "unsupported.ll")]) == 1
    assert "unsupported.ll:3:8: UnsupportedOpcode" in capsys.readouterr().err


def test_preprocess_then_local_run(workdir, capsys):
    src = str(workdir / "straight_line.ll")
    assert main(["preprocess", src, "--out-dir", str(workdir), "--inputs-json", str(workdir / "inputs.json")]) == 0
    err = capsys.readouterr().err
    assert "INSECURE" in err
    assert os.path.exists(workdir / "party1.triples") and os.path.exists(workdir / "inputs.mpci")

    report = str(workdir / "report.json")
    trace = str(workdir / "trace")
    rc = main(["run", src, "--local", "2", "--triples-dir", str(workdir), "--inputs", str(workdir / "inputs.mpci"),
               "--threads", "2", "--report-json", report, "--trace", trace])
    assert rc == 0
    out = capsys.readouterr().out
    assert "outputs: 112" in out
    with open(report, encoding="utf-8") as f:
        data = json.load(f)
    assert data["outputs"] == [112]
    assert data["triples_consumed"] == {"scalar": 2, "tiles": 0, "masks": 3}
    assert os.path.exists(trace + ".party0") and os.path.exists(trace + ".party1")


def test_run_without_triples(workdir, capsys):
    src = str(workdir / "straight_line.ll")
    assert main(["run", src, "--local", "2", "--triples-dir", str(workdir / "nowhere")]) == 1
    assert "InsufficientTriples" in capsys.readouterr().err


def test_run_needs_a_mode(workdir, capsys):
    assert main(["run", str(workdir / "straight_line.ll")]) == 2
    assert "--local" in capsys.readouterr().err


def test_inspect_with_cleartext_eval(workdir, capsys):
    assert main(["inspect", str(workdir / "straight_line.ll"), "--eval", str(workdir / "inputs.json")]) == 0
    out = capsys.readouterr().out
    assert "oracle: 112" in out
    assert "loops: none" in out


def test_describe_loop():
    text = describe_circuit(compile_fixture("loop.ll"))
    assert "header depth 1" in text
    x_line = next(line for line in text.splitlines() if line.strip().startswith("%x "))
    assert x_line.split()[1:3] == ["private", "ptr"]


def test_generated_layer_source_compiles():
    graph = compile_module(parse_module(linear_layer_ir(6, 3, b_private=True)))
    assert [(d.name, d.private) for d in graph.inputs] == [("x", True), ("W", True), ("b", True)]


def test_bench_writes_one_row_per_cell(workdir, capsys):
    out = str(workdir / "bench.csv")
    assert main(["bench", "--din", "8", "--dout", "4", "--slices", "16,64", "--out", out]) == 0
    df = pd.read_csv(out)
    assert list(df.columns) == BENCH_COLUMNS
    assert df["tiles"].tolist() == [2, 1]
    assert df["matrix_triples"].tolist() == [2, 1]
    assert df["output_digest"].nunique() == 1
    assert (df["total_ms"] >= df["online_ms"]).all()


def test_thread_count_does_not_change_the_digest(workdir, capsys):
    src = str(workdir / "straight_line.ll")
    assert main(["preprocess", src, "--out-dir", str(workdir), "--inputs-json", str(workdir / "inputs.json")]) == 0
    digests = []
    for threads in ("1", "8"):
        report = str(workdir / f"report{threads}.json")
        assert main(["run", src, "--local", "2", "--triples-dir", str(workdir), "--inputs",
                     str(workdir / "inputs.mpci"), "--threads", threads, "--report-json", report]) == 0
        with open(report, encoding="utf-8") as f:
            data = json.load(f)
        assert data["workers"] == int(threads)
        digests.append(data["output_digest"])
    assert digests[0] == digests[1]


def test_bench_with_an_empty_matrix_writes_only_the_header(workdir, capsys):
    matrix = workdir / "cells.json"
    matrix.write_text("[]")
    out = workdir / "bench.csv"
    assert main(["bench", "--matrix", str(matrix), "--out", str(out)]) == 0
    assert out.read_text().splitlines() == [",".join(BENCH_COLUMNS)]
    assert "0 row(s)" in capsys.readouterr().out


def test_inspect_function_without_a_body(tmp_path, capsys):
    src = tmp_path / "passthrough.ll"
    src.write_text("define i32 @passthrough(i32 %k) {\nentry:\n  ret i32 %k\n}\n")
    assert main(["inspect", str(src)]) == 0
    lines = capsys.readouterr().out.splitlines()
    table = lines[lines.index("nodes by kind:") + 1:]
    kinds = {line.split()[0] for line in table[:next(i for i, line in enumerate(table) if not line.startswith("  "))]}
    assert kinds == {"BlockLabel", "Input", "Root"}
    assert "privacy: public 2" in lines
    assert "loops: none" in lines
