import pytest
from hypothesis import given, settings, strategies as st

from peftlab.budget import (adapter_count, count_total, count_trainable, equalize, format_report, log_budget_grid,
                            prefix_count, reports_to_csv, solve_budget)
from peftlab.exceptions import MethodSpecError, UnreachableBudgetError
from peftlab.model import DESK_SCALE, PAPER_SCALE, ModelConfig, build_model
from peftlab.peft import Adapter, Prefix, apply_method

ALL_METHODS = ["full", "noft", "adapter:1", "adapter:7", "prefix:1", "prefix:4", "bitfit:lnbias", "bitfit:lnweights",
               "xattn"]


@pytest.mark.parametrize("method,expected", [
    ("adapter:1024", 50_429_952), ("adapter:5", 319_608), ("adapter:1", 122_904),
    ("prefix:13", 319_488), ("prefix:5", 122_880),
])
def test_paper_scale_tiers(method, expected):
    assert count_trainable(PAPER_SCALE, method).trainable == expected


def test_paper_scale_fixed_methods():
    assert count_trainable(PAPER_SCALE, "bitfit:lnbias").trainable == 333_824
    assert count_trainable(PAPER_SCALE, "bitfit:lnweights").trainable == 333_824
    assert count_trainable(PAPER_SCALE, "xattn").trainable == 50_405_376
    assert count_trainable(PAPER_SCALE, "noft").trainable == 0
    full = count_trainable(PAPER_SCALE, "full")
    assert full.trainable == full.total == count_total(PAPER_SCALE)


def test_paper_scale_equalize_blocks():
    small = equalize(PAPER_SCALE, ["adapter", "prefix"], "bitfit:lnweights")
    assert [e.method for e in small] == [Adapter(5), Prefix(13)]
    large = equalize(PAPER_SCALE, ["adapter"], "xattn")
    assert large[0].method == Adapter(1024)


def test_desk_scale_anchors():
    assert solve_budget(DESK_SCALE, "adapter", count_trainable(DESK_SCALE, "bitfit:lnweights").trainable) == Adapter(5)
    assert solve_budget(DESK_SCALE, "adapter", count_trainable(DESK_SCALE, "xattn").trainable) == Adapter(64)


def test_noft_anchor_unreachable():
    with pytest.raises(UnreachableBudgetError, match="minimum"):
        equalize(PAPER_SCALE, ["adapter", "prefix"], "noft")


def test_bad_family():
    with pytest.raises(MethodSpecError):
        solve_budget(DESK_SCALE, "bitfit", 1000)


def test_paper_scale_instrumentation_matches_closed_form():
    for method in ("adapter:5", "prefix:13", "xattn", "bitfit:lnweights"):
        model = build_model(PAPER_SCALE, materialize=False)
        apply_method(model, method)
        assert model.params.numel(True) == count_trainable(PAPER_SCALE, method).trainable


def test_report_formats():
    reports = [count_trainable(DESK_SCALE, m) for m in ("full", "prefix:3")]
    text = format_report(reports)
    assert "prefix:3" in text and "n-1+3" in text
    csv_text = reports_to_csv(reports)
    assert csv_text.splitlines()[0] == "method,trainable,total,ratio_pct"
    assert log_budget_grid(10, 1000, 3) == [10, 100, 1000]


configs = st.builds(
    lambda e, dl, h, hd, f, v, tie: ModelConfig(enc_layers=e, dec_layers=dl, heads=h, d_model=h * hd, ffn_dim=f,
                                               vocab_size=v, max_positions=16, tie_embeddings=tie),
    st.integers(0, 2), st.integers(1, 2), st.integers(1, 3), st.integers(1, 4), st.integers(1, 9),
    st.integers(5, 12), st.booleans())


@settings(max_examples=30, deadline=None)
@given(configs, st.sampled_from(ALL_METHODS))
def test_closed_form_matches_instrumented_model(config, method):
    model = build_model(config)
    apply_method(model, method)
    report = count_trainable(config, method)
    assert report.trainable == model.params.numel(True)
    assert report.total == model.params.numel()
    by_group = model.params.breakdown(trainable_only=True)
    assert {k: v for k, v in by_group.items() if v} == report.breakdown


@settings(max_examples=50, deadline=None)
@given(configs, st.integers(1, 50))
def test_counts_strictly_monotone(config, k):
    assert adapter_count(config, k + 1) > adapter_count(config, k)
    assert prefix_count(config, k + 1) > prefix_count(config, k)


@settings(max_examples=80, deadline=None)
@given(configs, st.sampled_from(["adapter", "prefix"]), st.floats(1.05, 400.0))
def test_solve_budget_is_nearest(config, family, factor):
    law = adapter_count if family == "adapter" else prefix_count
    target = int(law(config, 1) * factor)
    k = solve_budget(config, family, target)
    k = k.bottleneck if family == "adapter" else k.length
    step = law(config, 2) - law(config, 1)
    # nearest count: never more than half a step away
    assert abs(law(config, k) - target) <= step / 2
    for other in (k - 1, k + 1):
        if other >= 1:
            assert abs(law(config, other) - target) >= abs(law(config, k) - target)


@settings(max_examples=80, deadline=None)
@given(configs, st.sampled_from(["adapter", "prefix"]), st.floats(1.05, 400.0))
def test_equalize_deviation_within_five_percent_for_fine_grids(config, family, factor):
    law = adapter_count if family == "adapter" else prefix_count
    step = law(config, 2) - law(config, 1)
    anchor = int(law(config, 1) * factor)
    (e,) = equalize(config, [family], anchor)
    # half-step rounding is the only source of deviation
    assert abs(e.trainable - anchor) <= step / 2
    if anchor >= 10 * step:
        assert abs(e.deviation_pct) <= 5.0

