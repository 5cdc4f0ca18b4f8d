import json

import pytest

from logicloss import cli
from logicloss.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, git_blob_hash, main
from logicloss.trainer import TrainingError

TINY_GEN = ["--train", "300", "--dev", "60", "--test", "60", "--unlabeled", "120"]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "base.ini").write_text("[train]\nstage1_epochs = 2\nstage2_epochs = 2\n")
    return tmp_path


def test_git_blob_hash():
    # matches `git hash-object` for an empty file and for "hello\n"
    assert git_blob_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_gen_is_deterministic(workdir):
    assert main(["gen", "--seed", "1", *TINY_GEN, "--out", "a"]) == EXIT_OK
    assert main(["gen", "--seed", "1", *TINY_GEN, "--out", "b"]) == EXIT_OK
    for name in ("train.tsv", "T.tsv", "sentences.tsv"):
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()
    m = json.loads((workdir / "a" / "manifest.json").read_text())
    assert m["seed"] == 1 and m["config"]["n_train"] == 300 and "train.tsv" in m["outputs"]


def test_gen_usage_errors(workdir, capsys):
    assert main(["gen", "--train", "-1", "--out", "x"]) == EXIT_USAGE
    assert main(["gen", "--bogus", "--out", "x"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_compile_outputs(workdir, capsys):
    assert main(["compile", "--tnorm", "product"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "L_sym = |log c(P,H) - log c(H,P)|" in out
    assert "L_ann = -log y*(P,H)" in out
    assert main(["compile", "--tnorm", "lukasiewicz", "--dump"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "-log(clamp(" in out and "(root n" in out


def test_compile_rule_file(workdir, capsys):
    (workdir / "r.rules").write_text("labels: A, B\nrule r over (X): A(X) -> B(X)\n")
    assert main(["compile", "--rules", "r.rules", "--out", "c"]) == EXIT_OK
    assert "L_r = ReLU(log a(X) - log b(X))" in (workdir / "c" / "compiled.txt").read_text()
    assert "r.rules" in json.loads((workdir / "c" / "manifest.json").read_text())["inputs"]
    (workdir / "bad.rules").write_text("labels: A, B\nrule r over (X): A(X) ->\n")
    assert main(["compile", "--rules", "bad.rules"]) == EXIT_USAGE
    assert "rule syntax error: 3:1" in capsys.readouterr().err
    assert main(["compile", "--rules", "missing.rules"]) == EXIT_USAGE
    assert main(["compile", "--tnorm", "fancy"]) == EXIT_USAGE


def test_train_eval_and_replay(workdir, capsys):
    assert main(["gen", "--seed", "2", *TINY_GEN, "--out", "data"]) == EXIT_OK
    assert main(["train", "--config", "base.ini", "--constraints", "M,U,T", "--data", "data", "--out", "run"]) == 0
    run = workdir / "run"
    assert {p.name for p in run.iterdir()} == {"model.ckpt", "trainlog.tsv", "config.ini", "manifest.json"}
    assert len((run / "trainlog.tsv").read_text().splitlines()) == 5
    m = json.loads((run / "manifest.json").read_text())
    assert m["seed"] == 0 and "data/train.tsv" in m["inputs"] and "datasets = M,U,T" in m["config"]["train"]

    assert main(["eval", "--checkpoint", "run/model.ckpt", "--data", "data", "--out", "ev"]) == EXIT_OK
    kv = (workdir / "ev" / "metrics.txt").read_text()
    for key in ("accuracy=", "rho_S=", "tau_S=", "rho_T=", "tau_T=", "coverage_sym=", "coverage_tran="):
        assert key in kv
    report = (workdir / "ev" / "report.txt").read_text()
    assert "# cross table on U" in report and "# coverage" in report

    capsys.readouterr()
    assert main(["replay", "run/manifest.json", "--out", "run2"]) == EXIT_OK
    assert main(["replay", "ev/manifest.json", "--out", "ev2"]) == EXIT_OK
    assert capsys.readouterr().out.count("replay identical") == 2
    assert (workdir / "run2" / "model.ckpt").read_bytes() == (run / "model.ckpt").read_bytes()


def test_replay_detects_changed_inputs(workdir):
    assert main(["gen", "--seed", "3", *TINY_GEN, "--out", "data"]) == EXIT_OK
    assert main(["train", "--config", "base.ini", "--data", "data", "--out", "run"]) == EXIT_OK
    (workdir / "base.ini").write_text("[train]\nstage1_epochs = 1\n")
    assert main(["replay", "run/manifest.json", "--out", "again"]) == EXIT_USAGE


def test_train_and_eval_errors(workdir):
    assert main(["eval", "--checkpoint", "missing.ckpt", "--data", "data"]) == EXIT_USAGE
    assert main(["train", "--data", "nowhere", "--out", "r"]) == EXIT_USAGE
    assert main(["train", "--out", "r"]) == EXIT_USAGE
    assert main(["gen", "--seed", "4", *TINY_GEN, "--out", "data"]) == EXIT_OK
    assert main(["train", "--constraints", "M,Q", "--data", "data", "--out", "r"]) == EXIT_USAGE
    (workdir / "bad.ini").write_text("[train]\nwhatever = 1\n")
    assert main(["train", "--config", "bad.ini", "--data", "data", "--out", "r"]) == EXIT_USAGE
    text = (workdir / "data" / "dev.tsv").read_text()
    (workdir / "data" / "dev.tsv").write_text(text.replace("\tv1\t", "\tv7\t", 1))
    assert main(["train", "--config", "base.ini", "--data", "data", "--out", "r"]) == EXIT_USAGE


def test_numerical_failure_exit_code(workdir, monkeypatch, capsys):
    assert main(["gen", "--seed", "5", *TINY_GEN, "--out", "data"]) == EXIT_OK

    def diverge(*args, **kwargs):
        raise TrainingError("non-finite gradient at stage 1, epoch 1, batch 0")

    monkeypatch.setattr(cli, "train", diverge)
    assert main(["train", "--config", "base.ini", "--data", "data", "--out", "r"]) == EXIT_NUMERICAL
    assert "non-finite" in capsys.readouterr().err
