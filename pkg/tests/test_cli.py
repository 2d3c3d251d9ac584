from pathlib import Path

import pytest

from peftlab.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_budget_text_and_csv(capsys):
    assert main(["budget"]) == 0
    out = capsys.readouterr().out
    assert "50,429,952" in out and "prefix:13" in out
    assert main(["budget", "--csv", "--method", "adapter:5", "--method", "prefix:13"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == ["method,trainable,total,ratio_pct", "adapter:5,319608,748695672,0.0427",
                     "prefix:13,319488,748695552,0.0427"]


def test_budget_equalize_and_target(capsys):
    assert main(["budget", "--anchor", "bitfit:lnweights"]) == 0
    out = capsys.readouterr().out
    assert "adapter:5" in out and "prefix:13" in out
    assert main(["budget", "--scale", "desk", "--target", "33536", "--families", "adapter"]) == 0
    assert capsys.readouterr().out.startswith("adapter:64")


def test_invalid_method_lists_grammar(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["budget", "--method", "lora:8"])
    assert exc.value.code == 2
    assert "adapter:<b>" in capsys.readouterr().err


def test_unreachable_budget_is_an_error(capsys):
    assert main(["budget", "--anchor", "noft"]) == 1
    assert "minimum" in capsys.readouterr().err


def test_train_evaluate_report(tmp_path, capsys):
    spec = str(CONFIGS / "quick.json")
    out = str(tmp_path)
    assert main(["train", "--spec", spec, "--out", out, "--method", "full"]) == 0
    assert main(["train", "--spec", spec, "--out", out]) == 0
    rows = (tmp_path / "results.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[2].split(",")[8] != ""
    assert main(["evaluate", "--spec", spec, "--out", out]) == 0
    assert "bleu" in capsys.readouterr().out
    assert main(["report", "--out", out]) == 0
    assert (tmp_path / "report.svg").exists()


def test_evaluate_text_files(tmp_path, capsys):
    (tmp_path / "h.txt").write_text("a b c d\n", encoding="utf-8")
    (tmp_path / "r.txt").write_text("a b c d e\n", encoding="utf-8")
    assert main(["evaluate", "--hyp", str(tmp_path / "h.txt"), "--ref", str(tmp_path / "r.txt")]) == 0
    assert "bleu 77.8801" in capsys.readouterr().out


def test_missing_checkpoint(tmp_path, capsys):
    assert main(["evaluate", "--spec", str(CONFIGS / "quick.json"), "--out", str(tmp_path)]) == 1
    assert "not found" in capsys.readouterr().err
