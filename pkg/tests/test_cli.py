import csv
import json
import re
import socket
import subprocess
import sys

import numpy as np
import pytest

from eml.cli import EXIT_ABORT, EXIT_CONFIG, EXIT_IO, exit_code, main
from eml.errors import (
    AgreementMismatch,
    ConnectionFailure,
    CorrelationCheckFailed,
    MacCheckFailed,
    ParseError,
    PreprocessingExhausted,
)
from eml.krr import load_model, predict_plaintext


def _port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def _eml(*args, **kw):
    return subprocess.Popen([sys.executable, "-m", "eml.cli", *map(str, args)],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, **kw)


def _session(alice_args, bob_args, timeout=300):
    addr = f"127.0.0.1:{_port()}"
    a = _eml("alice", "--addr", addr, "--timeout", 60, *alice_args)
    b = _eml("bob", "--addr", addr, *bob_args)
    bout, berr = b.communicate(timeout=timeout)
    if b.returncode != 0:
        a.kill()
    aout, aerr = a.communicate(timeout=timeout)
    return (a.returncode, aout, aerr), (b.returncode, bout, berr)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--count", "40", "--out", str(d), "--seed", "3"]) == 0
    model = d / "model.bin"
    assert main(["plaintext", "--xyz", str(d / "molecules.xyz"), "--props", str(d / "properties.csv"),
                 "--sigma", "400", "--lam", "1e-6", "--N", "8", "--n-test", "3", "--L", "40",
                 "--save-model", str(model)]) == 0
    return d


def test_exit_code_mapping():
    assert exit_code(MacCheckFailed("x")) == EXIT_ABORT
    assert exit_code(CorrelationCheckFailed("x")) == EXIT_ABORT
    assert exit_code(PreprocessingExhausted("x")) == EXIT_IO
    assert exit_code(ConnectionFailure("x")) == EXIT_IO
    assert exit_code(AgreementMismatch("f", 1, 2)) == EXIT_CONFIG
    assert exit_code(ParseError("x", 3)) == EXIT_CONFIG
    assert exit_code(RuntimeError()) == 1


def test_synth_and_plaintext_outputs(workdir, capsys):
    assert (workdir / "molecules.xyz").exists()
    rows = list(csv.reader(open(workdir / "properties.csv")))
    assert rows[0] == ["id", "value", "unit"] and len(rows) == 41
    m = load_model(workdir / "model.bin")
    assert (m.N, m.L) == (8, 40)
    q = np.load(str(workdir / "model.bin") + ".queries.npy")
    assert q.shape == (3, 40)


def test_learning_curve_and_cv(workdir, capsys, tmp_path):
    xyz = str(workdir / "molecules.xyz")
    assert main(["plaintext", "--xyz", xyz, "--sigma", "400", "--lam", "1e-6", "--n-test", "5",
                 "--learning-curve", "8,16,32", "--csv", str(tmp_path / "lc.csv")]) == 0
    out = capsys.readouterr().out
    assert "N,mae" in out and "# fit:" in out
    assert (tmp_path / "lc.csv").read_text().startswith("N,mae\n8,")
    assert main(["cv", "--xyz", xyz, "--sigmas", "100,400", "--lams", "1e-6", "--N", "20"]) == 0
    out = capsys.readouterr().out
    assert "# best sigma=" in out


def test_config_errors_exit_2(workdir, capsys, tmp_path):
    assert main(["plaintext", "--sigma", "1"]) == EXIT_CONFIG
    bad = tmp_path / "bad.xyz"
    bad.write_text("2\nx 1.0\nH 0 0 0\n")
    assert main(["plaintext", "--xyz", str(bad), "--sigma", "1"]) == EXIT_CONFIG
    assert "line 4" in capsys.readouterr().err


def test_dealer_files_drive_a_cross_process_session(workdir):
    model = workdir / "model.bin"
    fa, fb = workdir / "a.emlp", workdir / "b.emlp"
    assert main(["dealer", "--N", "8", "--L", "40", "--P", "42", "--queries", "3", "--seed", "1",
                 "--out-a", str(fa), "--out-b", str(fb)]) == 0
    queries = str(model) + ".queries.npy"
    (ac, aout, aerr), (bc, bout, berr) = _session(
        ["--model", model, "--preproc-file", fa],
        ["--queries", queries, "--labels", str(model) + ".labels.csv", "--sigma", "400",
         "--preproc-file", fb])
    assert (ac, bc) == (0, 0), (aerr, berr)
    preds = [float(line.split("\t")[1]) for line in bout.splitlines()[1:4]]
    want = predict_plaintext(load_model(model), np.load(queries))
    assert np.allclose(preds, want, atol=1e-3)
    assert "# MAE=" in bout
    stats = json.loads(aout)
    assert stats["served"] == 3
    # Alice's output carries no prediction digits
    for p in preds:
        assert f"{p:.3f}" not in aout + aerr


def test_missing_preprocessing_exits_4(workdir):
    b = _eml("bob", "--addr", f"127.0.0.1:{_port()}", "--queries",
             str(workdir / "model.bin") + ".queries.npy", "--sigma", "400",
             "--preproc-file", workdir / "nope.emlp")
    out, err = b.communicate(timeout=60)
    assert b.returncode == EXIT_IO
    assert "eml dealer" in err


def test_parameter_mismatch(workdir):
    model = workdir / "model.bin"
    (ac, _, aerr), (bc, _, berr) = _session(
        ["--model", model, "--insecure-seed", 5, "--P", 42],
        ["--queries", str(model) + ".queries.npy", "--sigma", "400", "--insecure-seed", 5,
         "--P", 26])
    assert bc == EXIT_CONFIG and "AgreementMismatch" in berr
    assert ac == EXIT_ABORT
    assert "INSECURE" in aerr


def test_alice_logs_no_query_numerics(workdir):
    model = workdir / "model.bin"
    queries = str(model) + ".queries.npy"
    addr = f"127.0.0.1:{_port()}"
    a = _eml("-vv", "alice", "--addr", addr, "--model", model, "--insecure-seed", 9, "--timeout", 60)
    b = _eml("bob", "--addr", addr, "--queries", queries, "--sigma", "400", "--insecure-seed", 9)
    bout, _ = b.communicate(timeout=300)
    aout, aerr = a.communicate(timeout=300)
    assert a.returncode == b.returncode == 0
    q = np.load(queries)
    text = aout + aerr
    for v in q.ravel()[:20]:
        if abs(v) > 1e-3:
            assert f"{v:.4f}" not in text
    preds = [line.split("\t")[1] for line in bout.splitlines()[1:]]
    assert not any(p in text for p in preds)
    assert re.search(r"query \d+ served", aerr)


def test_bench_csv_and_determinism(workdir, tmp_path, capsys):
    args = ["bench", "--xyz", str(workdir / "molecules.xyz"), "--axis", "N", "--grid", "4,8",
            "--queries", "2", "--sigma", "400", "--lam", "1e-6", "--P", "20", "--L", "30",
            "--mode", "emulate"]
    assert main(args + ["--csv", str(tmp_path / "a.csv"), "--json", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--csv", str(tmp_path / "b.csv")]) == 0
    a = list(csv.DictReader(open(tmp_path / "a.csv")))
    b = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert [r["N"] for r in a] == ["4", "8"]
    assert a == b
    blob = json.loads((tmp_path / "a.json").read_text())
    assert len(blob["rows"]) == 2 and "bytes_fit" in blob["fits"]
    assert "bytes_fit" in capsys.readouterr().out


def test_bench_rejects_bad_grid(workdir):
    assert main(["bench", "--synthetic", "20", "--axis", "N", "--grid", "8,4", "--sigma", "1",
                 "--lam", "0.1"]) == EXIT_CONFIG
