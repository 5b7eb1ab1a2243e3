import json

import pytest

from smbop.cli import run
from smbop.schema import load_dataset

from golden import CASES


@pytest.fixture
def schema_file(tmp_path):
    p = tmp_path / "schema.json"
    p.write_text(json.dumps(CASES[0]["schema"].to_json()))
    return p


def test_transpile_to_ra(schema_file, capsys):
    assert run(["transpile", "--to", "ra", "--schema", str(schema_file), CASES[0]["sql"]]) == 0
    assert capsys.readouterr().out.strip() == CASES[0]["unbalanced"]
    assert run(["transpile", "--to", "ra", "--balance", "--schema", str(schema_file), CASES[0]["sql"]]) == 0
    assert capsys.readouterr().out.strip() == CASES[0]["balanced"]


def test_transpile_to_sql_and_line_errors(schema_file, capsys, monkeypatch):
    import io
    monkeypatch.setattr("sys.stdin", io.StringIO(CASES[0]["unbalanced"] + "\n(project oops\n"))
    assert run(["transpile", "--to", "sql", "--schema", str(schema_file)]) == 1
    out = capsys.readouterr()
    assert out.out.startswith("SELECT")
    assert "line 2:" in out.err


def test_argument_errors_exit_2(capsys):
    assert run(["decode"]) == 2
    assert run(["--threads", "0", "gradcheck"]) == 2
    assert run(["gradcheck", "--op", "nope"]) == 2


def test_gradcheck(capsys):
    assert run(["gradcheck", "--op", "linear", "--op", "lstm"]) == 0
    out = capsys.readouterr().out
    assert "linear" in out and "FAIL" not in out


def test_gen_train_decode_eval(tmp_path, capsys):
    data, ckpt, tr1, tr4 = (str(tmp_path / n) for n in ("d.jsonl", "m.npz", "t1.jsonl", "t4.jsonl"))
    assert run(["--seed", "3", "gen", "--n", "6", "--max-height", "3", "--out", data]) == 0
    assert len(load_dataset(data)) == 6
    assert run(["train", "--data", data, "--out-ckpt", ckpt, "--steps", "2", "--batch-size", "3",
                "--dim", "8", "--k", "3", "--metrics", str(tmp_path / "m.csv")]) == 0
    capsys.readouterr()
    assert run(["decode", "--data", data, "--ckpt", ckpt, "--k", "3", "--t", "4", "--trace-out", tr1]) == 0
    assert run(["--threads", "4", "decode", "--data", data, "--ckpt", ckpt, "--k", "3", "--t", "4", "--trace-out", tr4]) == 0
    assert open(tr1, "rb").read() == open(tr4, "rb").read()
    assert run(["eval", "--traces", tr1, "--data", data, "--report-out", str(tmp_path / "rep")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert 0 <= summary["EM"] <= summary["BEM"] <= 1
    assert (tmp_path / "rep" / "em_by_height.csv").exists()


def test_oracle_decode(tmp_path, capsys):
    data = str(tmp_path / "d.jsonl")
    run(["gen", "--n", "5", "--out", data])
    capsys.readouterr()
    assert run(["oracle-decode", "--data", data]) == 0
    assert json.loads(capsys.readouterr().out)["EM"] == 1.0


def test_bad_dataset_exit_2(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json}\n")
    assert run(["oracle-decode", "--data", str(bad)]) == 2
