"""Corpus BLEU (13a, exp smoothing), chrF++ and analysis statistics."""

from __future__ import annotations

import math
import re
import string
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .exceptions import DegenerateInputError

MAX_ORDER = 4

_13A_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
]


def tokenize_13a(line: str) -> str:
    """mteval-v13a style tokenization after NFC and whitespace normalization."""
    line = unicodedata.normalize("NFC", line)
    line = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = line.replace("&quot;", '"').replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">")
    line = f" {line} "
    for pattern, repl in _13A_RULES:
        line = pattern.sub(repl, line)
    return " ".join(line.split())


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check_pair(hypotheses, references):
    if isinstance(hypotheses, str) or isinstance(references, str):
        raise TypeError("hypotheses and references must be lists of strings")
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")


@dataclass
class BleuStats:
    correct: list
    total: list
    sys_len: int
    ref_len: int

    def __add__(self, other: "BleuStats") -> "BleuStats":
        return BleuStats([a + b for a, b in zip(self.correct, other.correct)],
                         [a + b for a, b in zip(self.total, other.total)],
                         self.sys_len + other.sys_len, self.ref_len + other.ref_len)

    @property
    def brevity_penalty(self) -> float:
        if self.sys_len >= self.ref_len:
            return 1.0
        return math.exp(1.0 - self.ref_len / self.sys_len) if self.sys_len > 0 else 0.0

    @property
    def precisions(self) -> list[float]:
        """Percent precisions with exp smoothing; orders with no hypothesis n-grams are dropped."""
        out, smooth = [], 1.0
        for c, t in zip(self.correct, self.total):
            if t == 0:
                break
            if c == 0:
                smooth *= 2.0
                out.append(100.0 / (smooth * t))
            else:
                out.append(100.0 * c / t)
        return out

    @property
    def score(self) -> float:
        precisions = self.precisions
        if not precisions or self.sys_len == 0:
            return 0.0
        log_mean = sum(math.log(p) for p in precisions) / len(precisions)
        return min(100.0, self.brevity_penalty * math.exp(log_mean))


def bleu_stats(hypotheses: Sequence[str], references: Sequence[str]) -> BleuStats:
    _check_pair(hypotheses, references)
    correct, total = [0] * MAX_ORDER, [0] * MAX_ORDER
    sys_len = ref_len = 0
    for i, (hyp, ref) in enumerate(zip(hypotheses, references)):
        h, r = tokenize_13a(hyp).split(), tokenize_13a(ref).split()
        if not r:
            raise ValueError(f"reference {i} is empty")
        sys_len += len(h)
        ref_len += len(r)
        for n in range(1, MAX_ORDER + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(0, len(h) - n + 1)
    return BleuStats(correct, total, sys_len, ref_len)


def bleu(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Corpus BLEU-4 on a 0-100 scale."""
    return bleu_stats(hypotheses, references).score


# -- chrF++ --------------------------------------------------------------
def _words(line: str) -> list[str]:
    out = []
    for tok in line.split():
        if len(tok) > 1 and tok[-1] in string.punctuation:
            out += [tok[:-1], tok[-1]]
        elif len(tok) > 1 and tok[0] in string.punctuation:
            out += [tok[0], tok[1:]]
        else:
            out.append(tok)
    return out


def chrf_stats(hypotheses, references, char_n: int = 6, word_n: int = 2) -> np.ndarray:
    """Per order ``[hyp count, ref count, matches]`` summed over the corpus."""
    _check_pair(hypotheses, references)
    out = np.zeros((char_n + word_n, 3), dtype=np.int64)
    for hyp, ref in zip(hypotheses, references):
        hc, rc = "".join(hyp.split()), "".join(ref.split())
        hw, rw = _words(hyp), _words(ref)
        for k in range(char_n + word_n):
            if k < char_n:
                a, b = _ngrams(hc, k + 1), _ngrams(rc, k + 1)
            else:
                a, b = _ngrams(hw, k - char_n + 1), _ngrams(rw, k - char_n + 1)
            out[k] += (sum(a.values()), sum(b.values()), sum(min(c, b[g]) for g, c in a.items()))
    return out


def chrf_from_stats(table: np.ndarray, beta: float = 2.0) -> float:
    """Average precision and recall over orders present on both sides, then F-beta."""
    precs, recs = [], []
    for n_hyp, n_ref, n_match in table:
        if n_hyp > 0 and n_ref > 0:
            precs.append(n_match / n_hyp)
            recs.append(n_match / n_ref)
    if not precs:
        return 0.0
    p, r = sum(precs) / len(precs), sum(recs) / len(recs)
    if p + r == 0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * p * r / (b2 * p + r)


def chrf(hypotheses, references, char_n: int = 6, word_n: int = 2, beta: float = 2.0) -> float:
    """Corpus chrF++ (whitespace excluded from character n-grams) on a 0-100 scale."""
    return chrf_from_stats(chrf_stats(hypotheses, references, char_n, word_n), beta)


# -- analysis -----------------------------------------------------------
def relative_performance(method_score: float, full_ft_score: float) -> float:
    if not full_ft_score > 0:
        raise DegenerateInputError(f"relative performance needs a positive full fine-tuning score, got {full_ft_score}")
    return 100.0 * method_score / full_ft_score


def pearson_r(x, y) -> tuple[float, float]:
    """Sample correlation and its two-sided p-value under the t distribution with n-2 dof."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"x and y must be equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise DegenerateInputError(f"correlation needs at least 3 points, got {len(x)}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateInputError("correlation undefined: an input has zero variance")
    res = stats.pearsonr(x, y)
    return float(res.statistic), float(res.pvalue)


@dataclass
class MetricReport:
    bleu: float
    chrf: float
    n_sentences: int
    brevity_penalty: float
    precisions: list = field(default_factory=list)


def evaluate(hypotheses, references) -> MetricReport:
    st = bleu_stats(hypotheses, references)
    return MetricReport(st.score, chrf(hypotheses, references), len(hypotheses), st.brevity_penalty, st.precisions)
