import json

import jsonschema
import pytest

from prefixquant.cli import main
from prefixquant.harness import load_schema

ARCH = ["--layers", "2", "--hidden", "32", "--heads", "2", "--intermediate", "64", "--max-seq", "96"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-model", "--out", d / "m.pqt", "--planted", *ARCH) == 0
    assert run("gen-corpus", "--out", d / "c.txt", "--bytes", 4096) == 0
    return d


def test_bad_usage_exits_2(capsys):
    assert run("no-such-command") == 2
    assert run("analyze", "--corpus", "x") == 2
    assert run("calibrate", "--model", "m", "--corpus", "c", "--out", "o", "--scheme", "O9") == 2


def test_missing_and_corrupt_files_exit_1(work, capsys, tmp_path):
    missing = tmp_path / "nope.pqt"
    assert run("analyze", "--model", missing, "--corpus", work / "c.txt", "--out", tmp_path / "a.json") == 1
    assert str(missing) in capsys.readouterr().err
    bad = tmp_path / "bad.pqt"
    bad.write_bytes(b"JUNKJUNKJUNKJUNKJUNK")
    assert run("analyze", "--model", bad, "--corpus", work / "c.txt", "--out", tmp_path / "a.json") == 1
    assert "magic" in capsys.readouterr().err
    assert run("calibrate", "--model", work / "m.pqt", "--corpus", work / "c.txt", "--out", tmp_path / "q",
               "--bits", "4,4") == 1
    assert run("finetune", "--model", work / "m.pqt", "--corpus", work / "c.txt", "--out", tmp_path / "f") == 1
    assert "calibrate first" in capsys.readouterr().err


def _valid(path, schema):
    report = json.loads(path.read_text())
    jsonschema.validate(report, load_schema(schema))
    return report


def test_subcommand_chain(work):
    d = work
    samples = ["--n-samples", 2, "--seq-len", 32]
    assert run("rotate", "--model", d / "m.pqt", "--out", d / "r.pqt") == 0
    assert run("analyze", "--model", d / "r.pqt", "--corpus", d / "c.txt", *samples,
               "--out", d / "an.json", "--csv", d / "an.csv") == 0
    an = _valid(d / "an.json", "analysis")
    assert set(an["frequency_tally"]) == {"46"}
    assert run("find-prefix", "--model", d / "r.pqt", "--corpus", d / "c.txt", *samples,
               "--out", d / "p.pqt", "--report", d / "p.json") == 0
    assert _valid(d / "p.json", "prefix")["residual_upper"] == 0
    assert run("calibrate", "--model", d / "r.pqt", "--corpus", d / "c.txt", *samples, "--scheme", "O2",
               "--grid-step", 0.25, "--grid-s-points", 5, "--prefix", d / "p.pqt",
               "--out", d / "q.pqt", "--report", d / "q.json") == 0
    _valid(d / "q.json", "calibration")
    assert run("finetune", "--model", d / "q.pqt", "--corpus", d / "c.txt", *samples, "--epochs", 1,
               "--prefix", d / "p.pqt", "--out", d / "f.pqt", "--report", d / "f.json") == 0
    _valid(d / "f.json", "finetune")
    for name in ("e1", "e2"):
        assert run("eval", "--model", d / "f.pqt", "--corpus", d / "c.txt", "--n-bytes", 200,
                   "--context-len", 64, "--prefix", d / "p.pqt", "--out", d / f"{name}.json") == 0
    assert (d / "e1.json").read_bytes() == (d / "e2.json").read_bytes()
    _valid(d / "e1.json", "eval")
    assert run("error-table", "--model", d / "m.pqt", "--corpus", d / "c.txt", "--n-samples", 2,
               "--seq-len", 32, "--out", d / "t.json") == 0
    _valid(d / "t.json", "error_table")
