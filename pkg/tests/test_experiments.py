from pathlib import Path

import pytest

from peftlab.exceptions import ConfigError, DegenerateInputError
from peftlab.experiments import (ExperimentResult, ExperimentSpec, attach_baseline, distance_experiment, read_results,
                                 run_experiment, size_experiment, sweep, upsert_results)
from peftlab.svg import line_chart

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def quick(**changes) -> ExperimentSpec:
    return ExperimentSpec.load(CONFIGS / "quick.json").derive(**changes)


def test_spec_hash_ignores_name_and_location():
    a = quick()
    assert a.derive(name="other", out_dir="elsewhere").hash == a.hash
    assert a.derive(method="full").hash != a.hash
    assert a.key == f"quick@{a.hash}"
    assert a.baseline().method == "full" and a.baseline().name == "quick"
    assert quick(name="grp/adapter:4").baseline().name == "grp/full"


def test_spec_roundtrip_and_validation(tmp_path):
    a = quick()
    assert ExperimentSpec.load(a.save(tmp_path / "s.json")) == a
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentSpec.from_dict({**a.to_dict(), "colour": 1})
    with pytest.raises(ConfigError):
        quick(precision="f16")
    with pytest.raises(ConfigError):
        quick(task={})


def _result(name, method, bleu):
    return ExperimentResult(name, "abc", method, 10, 100, bleu, 50.0, 2.0, 1.5)


def test_upsert_is_keyed_and_blank_seconds(tmp_path):
    path = tmp_path / "results.csv"
    upsert_results(path, [_result("a", "full", 10.0), _result("b", "noft", 5.0)])
    upsert_results(path, [_result("a", "full", 20.0)])
    rows = read_results(path)
    assert [r["name"] for r in rows] == ["a@abc", "b@abc"]
    assert rows[0]["bleu"] == "20.0000" and rows[0]["seconds"] == ""
    assert len((tmp_path / "timings.csv").read_text().splitlines()) == 4
    upsert_results(path, [_result("c", "full", 1.0)], record_seconds=True)
    assert read_results(path)[-1]["seconds"] == "1.5"


def test_attach_baseline():
    rs = attach_baseline([_result("a", "adapter:4", 29.9)], _result("f", "full", 38.2))
    assert rs[0].rel_perf == pytest.approx(78.27, abs=0.01)
    assert attach_baseline([_result("a", "x", 1.0)], None)[0].rel_perf is None


def test_run_experiment_artifacts_and_reuse(tmp_path):
    spec = quick(out_dir=str(tmp_path))
    res = run_experiment(spec)
    run_dir = tmp_path / "runs" / spec.key
    for name in ("spec.json", "history.csv", "checkpoint.npz", "hypotheses.txt", "result.json"):
        assert (run_dir / name).exists(), name
    assert len((run_dir / "hypotheses.txt").read_text().splitlines()) == 50
    again = run_experiment(spec)
    assert again == res


def test_runs_are_reproducible(tmp_path):
    a = run_experiment(quick(), tmp_path / "a")
    b = run_experiment(quick(), tmp_path / "b")
    assert (a.bleu, a.chrf, a.dev_ppl) == (b.bleu, b.chrf, b.dev_ppl)


def test_pretrained_parent_is_cached(tmp_path):
    parent = {"pretrain": {"task": {"synthetic": {"task": "copy", "s": 0, "r": 0, "vocab_size": 24, "min_len": 2,
                                                  "max_len": 5}, "train_size": 100, "dev_size": 20},
                           "train": quick().train}}
    spec = quick(parent=parent)
    run_experiment(spec, tmp_path)
    parents = list((tmp_path / "parents").glob("*.npz"))
    assert len(parents) == 1
    stamp = parents[0].stat().st_mtime_ns
    run_experiment(spec.derive(method="prefix:2"), tmp_path)
    assert parents[0].stat().st_mtime_ns == stamp


def test_sweep_outputs(tmp_path):
    rows = sweep(quick(), ["adapter", "noft"], ["bitfit:lnweights"], tmp_path)
    assert [r["method"] for r in rows] == ["noft", "adapter:5", "full"]
    assert (tmp_path / "sweep.csv").read_text().startswith("family,budget,method,trainable")
    assert (tmp_path / "sweep.svg").read_text().startswith("<svg")
    with pytest.raises(ConfigError):
        sweep(quick(), ["adapter"], ["bitfit:lnweights"], tmp_path / "empty", include_full=False)


def test_size_experiment_nested(tmp_path):
    rows = size_experiment(quick(), [50, 100], ["adapter:4"], tmp_path)
    assert [(r["size"], r["method"]) for r in rows] == [(50, "full"), (50, "adapter:4"), (100, "full"), (100, "adapter:4")]
    assert all(r["contains_previous"] == 1 for r in rows)
    with pytest.raises(ConfigError):
        size_experiment(quick(), [50, 10_000], ["adapter:4"], tmp_path)


def test_distance_experiment_degenerate_inputs(tmp_path):
    with pytest.raises(DegenerateInputError):
        distance_experiment(quick(), [(0.1, 0), (0.2, 0)], ["adapter:4"], tmp_path)
    with pytest.raises(DegenerateInputError):
        distance_experiment(quick(), [(0.2, 0)] * 3, ["adapter:4"], tmp_path)
    assert not (tmp_path / "runs").exists()


def test_line_chart():
    svg = line_chart([("a", [(10, 1.0), (1000, 2.0)]), ("b<&>", [(100, 1.5)])], title="t", x_label="x", y_label="y")
    assert svg.count("<polyline") == 2 and "b&lt;&amp;&gt;" in svg
    with pytest.raises(ValueError):
        line_chart([("a", [(0, 1.0)])])
    with pytest.raises(ValueError):
        line_chart([])
