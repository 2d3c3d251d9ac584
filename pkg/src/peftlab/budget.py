"""Closed-form parameter accounting and budget matching across method families."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

from .exceptions import MethodSpecError, UnreachableBudgetError
from .model import ModelConfig
from .peft import Adapter, BitFit, FullFT, NoFT, Prefix, XAttention, parse_method


@dataclass
class BudgetReport:
    method: object
    trainable: int
    total: int
    breakdown: dict = field(default_factory=dict)
    prefix_cost: Optional[dict] = None

    @property
    def ratio(self) -> float:
        return 100.0 * self.trainable / self.total if self.total else 0.0

    def as_row(self) -> dict:
        return {"method": self.method.spec, "trainable": self.trainable, "total": self.total,
                "ratio_pct": f"{self.ratio:.4f}"}


def _base_groups(config: ModelConfig) -> dict[str, int]:
    d, f, V, P = config.d_model, config.ffn_dim, config.vocab_size, config.max_positions
    E, D = config.enc_layers, config.dec_layers
    n_ln = 2 * E + 3 * D + 2
    embed = 2 * (V + P) * d + (0 if config.tie_embeddings else V * d)
    return {
        "attention weight": 4 * d * d * (E + D),
        "attention bias": 4 * d * (E + D),
        "ffn weight": 2 * d * f * (E + D),
        "ffn bias": (f + d) * (E + D),
        "ln gamma": n_ln * d,
        "ln beta": n_ln * d,
        "embedding": embed,
        "cross-attention": 4 * (d * d + d) * D,
    }


def adapter_count(config: ModelConfig, b: int) -> int:
    d = config.d_model
    return config.n_layers * (3 * d + b * (2 * d + 1))


def prefix_count(config: ModelConfig, p: int) -> int:
    return p * config.d_model * config.n_layers


def count_total(config: ModelConfig, method=None) -> int:
    """Base parameters plus any parameters the method adds."""
    total = sum(_base_groups(config).values())
    if isinstance(method, str):
        method = parse_method(method)
    if isinstance(method, Adapter):
        total += adapter_count(config, method.bottleneck)
    elif isinstance(method, Prefix):
        total += prefix_count(config, method.length)
    return total


def count_trainable(config: ModelConfig, method) -> BudgetReport:
    """Closed-form trainable count; agrees with the mask ``apply_method`` builds."""
    if isinstance(method, str):
        method = parse_method(method)
    config.validate()
    groups = _base_groups(config)
    d, D = config.d_model, config.dec_layers
    prefix_cost = None
    if isinstance(method, FullFT):
        breakdown = dict(groups)
    elif isinstance(method, NoFT):
        breakdown = {}
    elif isinstance(method, Adapter):
        breakdown = {"adapter": adapter_count(config, method.bottleneck)}
    elif isinstance(method, Prefix):
        breakdown = {"prefix": prefix_count(config, method.length)}
        prefix_cost = {
            "extra_rows": method.length,
            "decoder_span": f"real position n attends to n-1+{method.length} earlier rows",
        }
    elif isinstance(method, BitFit):
        ln = "ln gamma" if method.variant == "lnweights" else "ln beta"
        breakdown = {
            "attention bias": groups["attention bias"],
            "ffn bias": groups["ffn bias"],
            "cross-attention": 4 * d * D,
            ln: groups[ln],
        }
    elif isinstance(method, XAttention):
        breakdown = {"cross-attention": groups["cross-attention"], "ln gamma": d * D, "ln beta": d * D}
    else:
        raise MethodSpecError(f"unknown method {method!r}")
    breakdown = {k: v for k, v in breakdown.items() if v}
    return BudgetReport(method, sum(breakdown.values()), count_total(config, method), breakdown, prefix_cost)


def _family(family):
    if family in (Adapter, "adapter"):
        return Adapter, adapter_count
    if family in (Prefix, "prefix"):
        return Prefix, prefix_count
    raise MethodSpecError(f"budget search supports the adapter and prefix families, got {family!r}")


def solve_budget(config: ModelConfig, family, target: int):
    """Pick the ``b`` or ``p`` whose count is nearest ``target``; ties go to the smaller count."""
    cls, law = _family(family)
    minimum = law(config, 1)
    if minimum == 0 or target < minimum:
        raise UnreachableBudgetError(
            f"target {target} is below the {cls.__name__.lower()} minimum of {minimum} (size 1)")
    step = law(config, 2) - minimum
    guess = 1 + (target - minimum) // step
    best = min((k for k in (guess, guess + 1) if k >= 1), key=lambda k: (abs(law(config, k) - target), k))
    return cls(best)


@dataclass
class Equalized:
    method: object
    trainable: int
    reference: int
    deviation_pct: float


def equalize(config: ModelConfig, families, anchor, cascade: bool = True) -> list[Equalized]:
    """Match each family to the anchor's trainable count.

    With ``cascade`` each family after the first is matched to the previous
    family's achieved count, so the result forms one comparable block (the
    smallest matching adapter sets the block's size). ``anchor`` may also be a
    plain trainable count.
    """
    if isinstance(anchor, int):
        anchor_count = anchor
    else:
        anchor_count = count_trainable(config, anchor).trainable
    out = []
    reference = anchor_count
    for family in families:
        method = solve_budget(config, family, reference)
        achieved = count_trainable(config, method).trainable
        out.append(Equalized(method, achieved, reference, 100.0 * (achieved - anchor_count) / anchor_count))
        if cascade:
            reference = achieved
    return out


def format_report(reports: list[BudgetReport]) -> str:
    rows = [("method", "trainable", "total", "ratio_pct")]
    rows += [(r.method.spec, f"{r.trainable:,}", f"{r.total:,}", f"{r.ratio:.4f}") for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))) for row in rows]
    for r in reports:
        if r.prefix_cost:
            lines.append(f"# {r.method.spec}: +{r.prefix_cost['extra_rows']} rows per sequence; {r.prefix_cost['decoder_span']}")
    return "\n".join(lines) + "\n"


def reports_to_csv(reports: list[BudgetReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["method", "trainable", "total", "ratio_pct"], lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.as_row())
    return buf.getvalue()


def log_budget_grid(lo: int, hi: int, n: int) -> list[int]:
    """``n`` log-spaced integer budgets between ``lo`` and ``hi`` inclusive."""
    if n == 1:
        return [lo]
    ratio = (hi / lo) ** (1.0 / (n - 1))
    return sorted({int(round(lo * ratio ** i)) for i in range(n)})


__all__ = [
    "BudgetReport", "Equalized", "adapter_count", "prefix_count", "count_total", "count_trainable",
    "solve_budget", "equalize", "format_report", "reports_to_csv", "log_budget_grid",
]
