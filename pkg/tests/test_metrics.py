import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peftlab.exceptions import DegenerateInputError
from peftlab.metrics import bleu, bleu_stats, chrf, chrf_stats, evaluate, pearson_r, relative_performance, tokenize_13a

words = st.lists(st.sampled_from(["a", "b", "c", "dog", "cat", "x"]), min_size=1, max_size=8).map(" ".join)


def test_bleu_identity_and_brevity():
    assert bleu(["a b c d"], ["a b c d"]) == 100.0
    assert bleu(["a b c d"], ["a b c d e"]) == pytest.approx(100 * math.exp(1 - 5 / 4), abs=1e-9)
    assert bleu(["a b c d"], ["a b c d e"]) == pytest.approx(77.88, abs=0.05)


def test_bleu_exp_smoothing_oracle():
    # precisions 3/4, 1/3, then smoothed 1/(2*2) and 1/(4*1)
    expected = math.sqrt(1250.0)
    assert bleu(["a b c d"], ["a b x d"]) == pytest.approx(expected, abs=1e-9)


def test_bleu_effective_order_for_short_sentences():
    assert bleu(["the cat sat"], ["the cat sat on"]) == pytest.approx(100 * math.exp(1 - 4 / 3), abs=1e-9)
    assert bleu(["a"], ["a"]) == 100.0


def test_bleu_is_corpus_level():
    hyps, refs = ["a b c d", "x y"], ["a b c d", "x z"]
    st = bleu_stats(hyps, refs)
    assert st.correct == [5, 3, 2, 1] and st.total == [6, 4, 2, 1]
    assert bleu(hyps, refs) == pytest.approx(st.score)


def test_bleu_errors():
    with pytest.raises(ValueError):
        bleu(["a"], ["a", "b"])
    with pytest.raises(ValueError):
        bleu(["a"], [""])
    assert bleu([""], ["a"]) == 0.0


def test_tokenize_13a():
    assert tokenize_13a("Hello, world.") == "Hello , world ."
    assert tokenize_13a("3.5 and 1,000") == "3.5 and 1,000"
    assert tokenize_13a("a&amp;b") == "a & b"


def test_chrf_oracles():
    assert chrf(["the cat"], ["the cat"]) == pytest.approx(100.0)
    # char 1-grams P=R=1/2, char 2-grams and word 1-grams 0: P=R=1/6 overall
    assert chrf(["ab"], ["ac"]) == pytest.approx(100 / 6, abs=1e-9)
    assert chrf(["xyz"], ["abc"]) == 0.0
    table = chrf_stats(["ab"], ["ac"])
    assert table[0].tolist() == [2, 2, 1]


def test_pearson_hand_cases():
    r, _ = pearson_r([1, 2, 3], [2, 4, 6])
    assert abs(r - 1.0) <= 1e-12
    r, _ = pearson_r([1, 2, 3], [3, 2, 1])
    assert abs(r + 1.0) <= 1e-12
    r, _ = pearson_r([1, 2, 3], [1, 3, 2])
    assert abs(r - 0.5) <= 1e-12


def test_pearson_p_value_matches_t_distribution():
    from scipy import stats as sst

    x, y = [1, 2, 3, 4, 5], [2, 1, 4, 3, 5]
    r, p = pearson_r(x, y)
    t = r * math.sqrt(3 / (1 - r * r))
    assert p == pytest.approx(2 * sst.t.sf(abs(t), 3), rel=1e-9)


def test_pearson_degenerate():
    with pytest.raises(DegenerateInputError):
        pearson_r([1, 2], [1, 2])
    with pytest.raises(DegenerateInputError):
        pearson_r([1, 1, 1], [1, 2, 3])


def test_relative_performance():
    assert relative_performance(29.9, 38.2) == pytest.approx(78.27, abs=0.01)
    assert relative_performance(36.3, 36.6) == pytest.approx(99.18, abs=0.01)
    with pytest.raises(DegenerateInputError):
        relative_performance(1.0, 0.0)


def test_evaluate_report():
    rep = evaluate(["a b c d"], ["a b c d e"])
    assert rep.n_sentences == 1
    assert rep.brevity_penalty == pytest.approx(math.exp(-0.25))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(words, words), min_size=1, max_size=5))
def test_scores_bounded(pairs):
    hyps, refs = [h for h, _ in pairs], [r for _, r in pairs]
    assert 0.0 <= bleu(hyps, refs) <= 100.0
    assert 0.0 <= chrf(hyps, refs) <= 100.0 + 1e-9


@settings(max_examples=40, deadline=None)
@given(st.lists(words, min_size=1, max_size=5))
def test_identical_corpus_scores_100(refs):
    assert bleu(refs, refs) == pytest.approx(100.0)
    assert chrf(refs, refs) == pytest.approx(100.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=10), st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_affine_invariance(x, scale, shift):
    x = np.asarray(x)
    y = np.sin(x)
    if np.ptp(x) < 1e-6 or np.ptp(y) < 1e-6:
        return
    r1, _ = pearson_r(x, y)
    r2, _ = pearson_r(x * scale + shift, y)
    assert r1 == pytest.approx(r2, abs=1e-9)
