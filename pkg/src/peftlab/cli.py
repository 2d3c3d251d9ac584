"""Command-line entry point: ``peftlab <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .budget import count_trainable, equalize, format_report, reports_to_csv, solve_budget
from .exceptions import MethodSpecError, PeftLabError
from .experiments import (ExperimentResult, ExperimentSpec, attach_baseline, distance_experiment, load_task, read_results,
                          run_experiment, size_experiment, sweep, translate, upsert_results)
from .metrics import bleu, chrf
from .model import DESK_SCALE, PAPER_SCALE, ModelConfig, load_checkpoint
from .peft import METHOD_GRAMMAR, parse_method
from .svg import write_line_chart

DEFAULT_BUDGET_METHODS = ["full", "noft", "adapter:1", "adapter:5", "adapter:1024", "prefix:5", "prefix:13",
                          "bitfit:lnbias", "bitfit:lnweights", "xattn"]


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _load_spec(args, parser) -> ExperimentSpec:
    if not args.spec:
        parser.error("--spec is required for this command")
    spec = ExperimentSpec.load(args.spec)
    changes = {}
    if getattr(args, "method", None):
        changes["method"] = args.method
    if args.seed is not None:
        changes["train"] = dict(spec.train, seed=args.seed)
        changes["model"] = dict(spec.model, seed=args.seed)
    if args.precision:
        changes["precision"] = args.precision
    if args.out:
        changes["out_dir"] = args.out
    return spec.derive(**changes) if changes else spec


def _validate_method(parser, text):
    if text is None:
        return
    try:
        parse_method(text)
    except MethodSpecError:
        parser.error(f"invalid --method {text!r}; expected one of: {METHOD_GRAMMAR}")


def _print_rows(rows: list[dict], out=None):
    out = out or sys.stdout
    if not rows:
        print("(no rows)", file=out)
        return
    cols = list(rows[0])
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    print("  ".join(c.ljust(widths[c]) for c in cols), file=out)
    for r in rows:
        print("  ".join(str(r[c]).ljust(widths[c]) for c in cols), file=out)


# -- commands ------------------------------------------------------------
def cmd_train(args, parser):
    spec = _load_spec(args, parser)
    result = run_experiment(spec, spec.out_dir, reuse=not args.force)
    baseline_dir = Path(spec.out_dir) / "runs" / spec.baseline().key.replace("/", "_") / "result.json"
    if result.method != "full" and baseline_dir.exists():
        attach_baseline([result], ExperimentResult(**json.loads(baseline_dir.read_text(encoding="utf-8"))))
    elif result.method == "full":
        result.rel_perf = 100.0
    upsert_results(Path(spec.out_dir) / "results.csv", [result], record_seconds=args.record_seconds)
    _print_rows([result.row(True)])
    return 0


def cmd_evaluate(args, parser):
    if args.hyp and args.ref:
        hyps = Path(args.hyp).read_text(encoding="utf-8").splitlines()
        refs = Path(args.ref).read_text(encoding="utf-8").splitlines()
    else:
        spec = _load_spec(args, parser)
        ckpt = Path(args.checkpoint) if args.checkpoint else (
            Path(spec.out_dir) / "runs" / spec.key.replace("/", "_") / "checkpoint.npz")
        if not ckpt.exists():
            raise PeftLabError(f"checkpoint {ckpt} not found; run `peftlab train` first or pass --checkpoint")
        model, _ = load_checkpoint(ckpt)
        _, _, test_c = load_task(spec.task)
        hyps = translate(model, test_c)
        refs = [test_c.target_text(i) for i in range(len(test_c))]
    print(f"bleu {bleu(hyps, refs):.4f}")
    print(f"chrf {chrf(hyps, refs):.4f}")
    print(f"sentences {len(hyps)}")
    return 0


def cmd_budget(args, parser):
    if args.spec:
        config = ModelConfig.from_dict(ExperimentSpec.load(args.spec).model)
    else:
        config = PAPER_SCALE if args.scale == "paper" else DESK_SCALE
    if args.anchor:
        _validate_method(parser, args.anchor)
        rows = [{"method": e.method.spec, "trainable": e.trainable, "reference": e.reference,
                 "deviation_pct": f"{e.deviation_pct:+.3f}"}
                for e in equalize(config, _csv_list(args.families), args.anchor)]
        _print_rows(rows)
        return 0
    if args.target is not None:
        for fam in _csv_list(args.families):
            m = solve_budget(config, fam, args.target)
            print(f"{m.spec}\t{count_trainable(config, m).trainable}")
        return 0
    methods = args.method or DEFAULT_BUDGET_METHODS
    for m in methods:
        _validate_method(parser, m)
    reports = [count_trainable(config, m) for m in methods]
    sys.stdout.write(reports_to_csv(reports) if args.csv else format_report(reports))
    return 0


def cmd_sweep(args, parser):
    spec = _load_spec(args, parser)
    rows = sweep(spec, _csv_list(args.methods), _csv_list(args.budgets), spec.out_dir, jobs=args.jobs,
                 include_full=not args.no_full)
    _print_rows(rows)
    return 0


def _parse_distances(text: str) -> list[tuple[float, float]]:
    out = []
    for item in text.split(";"):
        item = item.strip()
        if item:
            s, r = item.split(",")
            out.append((float(s), float(r)))
    return out


def cmd_distance(args, parser):
    spec = _load_spec(args, parser)
    corr = distance_experiment(spec, _parse_distances(args.distances), _csv_list(args.methods), spec.out_dir,
                               jobs=args.jobs)
    _print_rows([{"method": c["method"], "pearson_r": f"{c['pearson_r']:.4f}", "p_value": f"{c['p_value']:.4f}",
                  "significant": "yes" if c["significant"] else "no"} for c in corr])
    return 0


def cmd_size(args, parser):
    spec = _load_spec(args, parser)
    rows = size_experiment(spec, [int(s) for s in _csv_list(args.sizes)], _csv_list(args.methods), spec.out_dir,
                           jobs=args.jobs)
    _print_rows(rows)
    return 0


def cmd_report(args, parser):
    out = Path(args.out or ".")
    rows = read_results(out / "results.csv")
    if not rows:
        raise PeftLabError(f"no results.csv in {out}")
    _print_rows(rows)
    series: dict = {}
    for r in rows:
        if r["rel_perf_pct"] and int(r["trainable"]) > 0:
            family = r["method"].split(":")[0]
            series.setdefault(family, []).append((int(r["trainable"]), float(r["rel_perf_pct"])))
    if series:
        path = write_line_chart(out / "report.svg", sorted((k, sorted(v)) for k, v in series.items()),
                                title="Relative performance vs trainable parameters",
                                x_label="trainable parameters (log)", y_label="relative performance (%)")
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peftlab", description="Parameter-efficient fine-tuning lab.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, method=True):
        p.add_argument("--spec", help="experiment spec (JSON)")
        if method:
            p.add_argument("--method", help=f"tuning method: {METHOD_GRAMMAR}")
        p.add_argument("--seed", type=int, help="override model and training seeds")
        p.add_argument("--out", help="output directory (overrides the spec)")
        p.add_argument("--precision", choices=["f32", "f64"])
        return p

    p = common(sub.add_parser("train", help="train one spec and append its row to results.csv"))
    p.add_argument("--force", action="store_true", help="ignore a cached result for this spec")
    p.add_argument("--record-seconds", action="store_true", help="write wall-clock seconds into results.csv")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("evaluate", help="score a trained spec on its test split, or score text files"))
    p.add_argument("--checkpoint")
    p.add_argument("--hyp", help="hypothesis file (one sentence per line)")
    p.add_argument("--ref", help="reference file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("budget", help="trainable-parameter accounting")
    p.add_argument("--spec")
    p.add_argument("--scale", choices=["desk", "paper"], default="paper")
    p.add_argument("--method", action="append", help="method to count (repeatable)")
    p.add_argument("--csv", action="store_true", help="emit CSV instead of aligned text")
    p.add_argument("--target", type=int, help="solve the families for this trainable count")
    p.add_argument("--anchor", help="equalize the families against this method's count")
    p.add_argument("--families", default="adapter,prefix")
    p.set_defaults(func=cmd_budget)

    p = common(sub.add_parser("sweep", help="budget sweep with relative performance plot"), method=False)
    p.add_argument("--methods", default="adapter,prefix", help="families or fixed methods, comma separated")
    p.add_argument("--budgets", default="bitfit:lnweights,xattn", help="counts or anchor methods, comma separated")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-full", action="store_true", help="reuse an existing full fine-tuning result")
    p.set_defaults(func=cmd_sweep)

    p = common(sub.add_parser("distance-experiment", help="relative performance vs synthetic language distance"),
               method=False)
    p.add_argument("--distances", default="0,0;0.25,0;0.5,0;0.75,0;1,0", help="s,r pairs separated by ';'")
    p.add_argument("--methods", default="adapter:5")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_distance)

    p = common(sub.add_parser("size-experiment", help="BLEU vs training-set size on nested subsets"), method=False)
    p.add_argument("--sizes", default="250,1000,4000,16000")
    p.add_argument("--methods", default="full,adapter:64")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_size)

    p = sub.add_parser("report", help="print results.csv and plot relative performance")
    p.add_argument("--out", help="directory holding results.csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _validate_method(parser, getattr(args, "method", None) if isinstance(getattr(args, "method", None), str) else None)
    try:
        return args.func(args, parser)
    except PeftLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
