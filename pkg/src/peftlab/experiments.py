"""Experiment specs, single runs, and the sweep / distance / size protocols.

Every run is a pure function of its spec. Results are keyed by ``name@hash``
and upserted into ``results.csv`` so reruns overwrite their own row.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .budget import count_trainable, solve_budget
from .data import (ParallelCorpus, SyntheticTaskSpec, Vocabulary, generate_synthetic, load_parallel, pad,
                   subset)
from .exceptions import ConfigError, DegenerateInputError
from .metrics import bleu, chrf, pearson_r, relative_performance
from .model import ModelConfig, build_model, greedy_decode_batch, load_checkpoint, save_checkpoint
from .peft import Adapter, Prefix, apply_method, parse_method
from .svg import write_line_chart
from .train import TrainConfig, train, write_history

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["name", "method", "trainable", "total", "ratio_pct", "bleu", "chrf", "dev_ppl", "rel_perf_pct", "seconds"]
DECODE_CHUNK = 250


# -- specs -------------------------------------------------------------
@dataclass
class ExperimentSpec:
    """One run: model, method, task, training and (optionally) a parent to start from.

    ``task`` is either ``{"synthetic": {...}, "train_size": n}`` or
    ``{"files": {"train_src": ..., "train_tgt": ..., "dev_src": ..., ...}}``.
    ``parent`` is ``None`` (train from the random init), ``{"checkpoint": path}``
    or ``{"pretrain": {"task": ..., "train": {...}}}`` for a cached full-FT parent.
    """

    name: str = "run"
    model: dict = field(default_factory=lambda: ModelConfig().to_dict())
    method: str = "full"
    task: dict = field(default_factory=lambda: {"synthetic": SyntheticTaskSpec().to_dict(), "train_size": 4000})
    train: dict = field(default_factory=lambda: TrainConfig().to_dict())
    parent: Optional[dict] = None
    subset: Optional[dict] = None
    precision: str = "f64"
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        ModelConfig.from_dict(self.model).validate()
        TrainConfig.from_dict(self.train)
        parse_method(self.method)
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if ("synthetic" in self.task) == ("files" in self.task):
            raise ConfigError("task needs exactly one of 'synthetic' or 'files'")
        if "synthetic" in self.task:
            SyntheticTaskSpec.from_dict(self.task["synthetic"])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**copy.deepcopy(data))

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @property
    def hash(self) -> str:
        """Digest of everything that affects the outcome (not the name or output location)."""
        payload = {k: v for k, v in self.to_dict().items() if k not in ("name", "out_dir")}
        return _digest(payload)

    @property
    def key(self) -> str:
        return f"{self.name}@{self.hash}"

    def derive(self, **changes) -> "ExperimentSpec":
        data = self.to_dict()
        data.update(copy.deepcopy(changes))
        return ExperimentSpec.from_dict(data)

    def baseline(self) -> "ExperimentSpec":
        """The full fine-tuning counterpart: ``group/method`` names map to ``group/full``."""
        return self.derive(method="full", name=f"{self.name.rsplit('/', 1)[0]}/full" if "/" in self.name else self.name)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train)


def _digest(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:12]


@dataclass
class ExperimentResult:
    name: str
    spec_hash: str
    method: str
    trainable: int
    total: int
    bleu: float
    chrf: float
    dev_ppl: float
    seconds: float
    rel_perf: Optional[float] = None

    @property
    def key(self) -> str:
        return f"{self.name}@{self.spec_hash}"

    @property
    def ratio(self) -> float:
        return 100.0 * self.trainable / self.total if self.total else 0.0

    def row(self, with_seconds: bool = False) -> dict:
        return {
            "name": self.key, "method": self.method, "trainable": self.trainable, "total": self.total,
            "ratio_pct": f"{self.ratio:.4f}", "bleu": f"{self.bleu:.4f}", "chrf": f"{self.chrf:.4f}",
            "dev_ppl": f"{self.dev_ppl:.6f}",
            "rel_perf_pct": "" if self.rel_perf is None else f"{self.rel_perf:.4f}",
            "seconds": f"{self.seconds:.1f}" if with_seconds else "",
        }

    def to_json(self) -> dict:
        return asdict(self)


# -- data ----------------------------------------------------------------
def load_task(task: dict) -> tuple[ParallelCorpus, ParallelCorpus, ParallelCorpus]:
    if "synthetic" in task:
        syn = SyntheticTaskSpec.from_dict(task["synthetic"])
        return (generate_synthetic(syn, int(task.get("train_size", 4000)), "train"),
                generate_synthetic(syn, int(task.get("dev_size", 1000)), "dev"),
                generate_synthetic(syn, int(task.get("test_size", 1000)), "test"))
    files = task["files"]
    vocab = Vocabulary.from_file(files["vocab"]) if files.get("vocab") else None
    train_c = load_parallel(files["train_src"], files["train_tgt"], vocab=vocab)
    vocab = train_c.vocab
    return (train_c, load_parallel(files["dev_src"], files["dev_tgt"], vocab=vocab),
            load_parallel(files["test_src"], files["test_tgt"], vocab=vocab))


def task_distance(task: dict) -> float:
    if "distance" in task:
        return float(task["distance"])
    if "synthetic" in task:
        return SyntheticTaskSpec.from_dict(task["synthetic"]).distance
    raise ConfigError("file-based tasks need an explicit 'distance' entry")


# -- runs ------------------------------------------------------------------
def _parent_path(spec: ExperimentSpec, out_dir: Path) -> Optional[Path]:
    if spec.parent is None:
        return None
    if "checkpoint" in spec.parent:
        return Path(spec.parent["checkpoint"])
    digest = _digest({"model": spec.model, "parent": spec.parent, "precision": spec.precision})
    return out_dir / "parents" / f"{digest}.npz"


def prepare_parent(spec: ExperimentSpec, out_dir) -> Optional[Path]:
    """Return the parent checkpoint path, pretraining (full FT) and caching it if needed."""
    out_dir = Path(out_dir)
    path = _parent_path(spec, out_dir)
    if path is None or path.exists():
        return path
    if "pretrain" not in spec.parent:
        raise ConfigError(f"parent checkpoint {path} not found")
    pre = spec.parent["pretrain"]
    with ad.default_dtype(spec.precision):
        train_c, dev_c, _ = load_task(dict(pre["task"], test_size=1))
        model = build_model(spec.model_config)
        apply_method(model, "full")
        cfg = TrainConfig.from_dict(pre.get("train", spec.train))
        log.info("pretraining parent %s", path.name)
        result = train(model, train_c, dev_c, cfg)
        model.method = None
        save_checkpoint(model, path.with_suffix(".tmp.npz"), train_c.vocab.tokens)
        path.with_suffix(".tmp.npz").replace(path)
        write_history(result.history, path.with_suffix(".history.csv"))
    return path


def _fresh_model(spec: ExperimentSpec, parent: Optional[Path]):
    if parent is None:
        return build_model(spec.model_config)
    model, _ = load_checkpoint(parent)
    if model.config.to_dict() != spec.model_config.to_dict():
        raise ConfigError("parent checkpoint config differs from the spec's model config")
    if model.method is not None:
        model.method = None
    return model


def translate(model, corpus: ParallelCorpus, max_len: Optional[int] = None) -> list[str]:
    longest = max(len(s) for s in corpus.sources)
    max_len = max_len or min(model.config.max_positions - 1, 2 * longest + 4)
    hyps = []
    for start in range(0, len(corpus), DECODE_CHUNK):
        chunk = corpus.sources[start : start + DECODE_CHUNK]
        for ids in greedy_decode_batch(model, pad(chunk), max_len):
            hyps.append(" ".join(corpus.vocab.decode(ids)))
    return hyps


def run_experiment(spec: ExperimentSpec, out_dir=None, reuse: bool = True) -> ExperimentResult:
    """Build (or load the parent), instrument, train, evaluate on test, persist artifacts."""
    out_dir = Path(out_dir or spec.out_dir)
    run_dir = out_dir / "runs" / spec.key.replace("/", "_")
    cached = run_dir / "result.json"
    if reuse and cached.exists():
        return ExperimentResult(**json.loads(cached.read_text(encoding="utf-8")))
    parent = prepare_parent(spec, out_dir)
    start = time.perf_counter()
    with ad.default_dtype(spec.precision):
        train_c, dev_c, test_c = load_task(spec.task)
        if spec.subset:
            train_c = subset(train_c, int(spec.subset["size"]), int(spec.subset.get("seed", 0)))
        model = _fresh_model(spec, parent)
        method = parse_method(spec.method)
        apply_method(model, method)
        result = train(model, train_c, dev_c, spec.train_config)
        hyps = translate(model, test_c)
    refs = [test_c.target_text(i) for i in range(len(test_c))]
    seconds = time.perf_counter() - start
    report = count_trainable(spec.model_config, method)
    if report.trainable != model.params.numel(True):
        raise ConfigError(f"closed-form count {report.trainable} disagrees with the instrumented model")
    res = ExperimentResult(spec.name, spec.hash, method.spec, report.trainable, report.total,
                           bleu(hyps, refs), chrf(hyps, refs), result.best_dev_ppl, seconds)
    run_dir.mkdir(parents=True, exist_ok=True)
    spec.save(run_dir / "spec.json")
    write_history(result.history, run_dir / "history.csv")
    save_checkpoint(model, run_dir / "checkpoint.npz", train_c.vocab.tokens)
    (run_dir / "hypotheses.txt").write_text("\n".join(hyps) + "\n", encoding="utf-8")
    cached.write_text(json.dumps(res.to_json(), sort_keys=True) + "\n", encoding="utf-8")
    return res


def _run_one(args):
    spec_dict, out_dir, reuse = args
    return run_experiment(ExperimentSpec.from_dict(spec_dict), out_dir, reuse).to_json()


def run_many(specs: list[ExperimentSpec], out_dir, jobs: int = 1, reuse: bool = True) -> list[ExperimentResult]:
    """Run specs (deduplicated by key) serially or in worker processes; results keep input order."""
    out_dir = Path(out_dir)
    for spec in specs:
        prepare_parent(spec, out_dir)
    unique = {}
    for spec in specs:
        unique.setdefault(spec.key, spec)
    args = [(s.to_dict(), str(out_dir), reuse) for s in unique.values()]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_run_one, args))
    else:
        done = [_run_one(a) for a in args]
    by_key = {ExperimentResult(**d).key: ExperimentResult(**d) for d in done}
    return [copy.copy(by_key[s.key]) for s in specs]


# -- results.csv -------------------------------------------------------------
def read_results(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def upsert_results(path, results: list[ExperimentResult], record_seconds: bool = False) -> Path:
    """Append rows keyed by ``name@hash``, overwriting rows with the same key in place.

    Wall-clock seconds are left blank unless ``record_seconds`` so reruns stay
    byte-identical; real timings always go to the ``timings.csv`` sidecar.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = read_results(path)
    index = {r["name"]: i for i, r in enumerate(rows)}
    for res in results:
        row = res.row(record_seconds)
        if row["name"] in index:
            rows[index[row["name"]]] = row
        else:
            index[row["name"]] = len(rows)
            rows.append(row)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    timings = path.with_name("timings.csv")
    with open(timings, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fh.tell() == 0:
            writer.writerow(["name", "seconds"])
        for res in results:
            writer.writerow([res.key, f"{res.seconds:.3f}"])
    return path


def attach_baseline(results: list[ExperimentResult], baseline: Optional[ExperimentResult]) -> list[ExperimentResult]:
    """Fill relative performance when (and only when) a full-FT result exists."""
    for r in results:
        r.rel_perf = None if baseline is None else relative_performance(r.bleu, baseline.bleu)
    return results


def find_result(results_path, key: str) -> Optional[dict]:
    for row in read_results(results_path):
        if row["name"] == key:
            return row
    return None


def _write_csv(path, header: list, rows: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _baseline_result(base: ExperimentSpec, out_dir: Path, include_full: bool, jobs: int) -> ExperimentResult:
    full = base.derive(method="full", name=f"{base.name}/full")
    if include_full:
        return run_many([full], out_dir, jobs)[0]
    row = find_result(out_dir / "results.csv", full.key)
    cached = out_dir / "runs" / full.key.replace("/", "_") / "result.json"
    if row is None or not cached.exists():
        raise ConfigError(f"no full fine-tuning baseline ({full.key}) in {out_dir}; run the full method first")
    return ExperimentResult(**json.loads(cached.read_text(encoding="utf-8")))


# -- sweep -------------------------------------------------------------------
ADJUSTABLE = {"adapter": Adapter, "prefix": Prefix}


def _budget_target(config: ModelConfig, budget) -> int:
    if isinstance(budget, (int, np.integer)):
        return int(budget)
    text = str(budget)
    if text.isdigit():
        return int(text)
    return count_trainable(config, parse_method(text)).trainable


def sweep(base: ExperimentSpec, methods: list, budgets: list, out_dir, jobs: int = 1,
          include_full: bool = True) -> list[dict]:
    """Budget sweep: adjustable families are solved per budget, fixed methods run once, plus full FT.

    Budgets may be integers or method strings whose trainable count is the target.
    Writes ``sweep.csv`` (ascending trainable count) and ``sweep.svg``.
    """
    out_dir = Path(out_dir)
    config = base.model_config
    plan = []
    for m in methods:
        if m in ADJUSTABLE:
            for b in budgets:
                method = solve_budget(config, m, _budget_target(config, b))
                plan.append((m, str(b), base.derive(method=method.spec, name=f"{base.name}/{method.spec}")))
        else:
            method = parse_method(m)
            plan.append((method.spec, "", base.derive(method=method.spec, name=f"{base.name}/{method.spec}")))
    baseline = _baseline_result(base, out_dir, include_full, jobs)
    results = attach_baseline(run_many([p[2] for p in plan], out_dir, jobs), baseline)
    baseline.rel_perf = 100.0
    upsert_results(out_dir / "results.csv", results + [baseline])
    rows = [(fam, b, r) for (fam, b, _), r in zip(plan, results)] + [("full", "", baseline)]
    rows.sort(key=lambda t: t[2].trainable)
    table = [[fam, b, r.method, r.trainable, r.total, f"{r.ratio:.4f}", f"{r.bleu:.4f}", f"{r.chrf:.4f}",
              f"{r.dev_ppl:.6f}", f"{r.rel_perf:.4f}"] for fam, b, r in rows]
    _write_csv(out_dir / "sweep.csv", ["family", "budget", "method", "trainable", "total", "ratio_pct", "bleu",
                                       "chrf", "dev_ppl", "rel_perf_pct"], table)
    series: dict = {}
    for fam, _, r in rows:
        if r.trainable > 0:
            series.setdefault(fam, set()).add((r.trainable, r.rel_perf))
    write_line_chart(out_dir / "sweep.svg", [(k, sorted(v)) for k, v in series.items()],
                     title="Relative performance vs trainable parameters", x_label="trainable parameters (log)",
                     y_label="relative performance (%)")
    return [dict(zip(["family", "budget", "method", "trainable", "total", "ratio_pct", "bleu", "chrf", "dev_ppl",
                      "rel_perf_pct"], row)) for row in table]


# -- distance ------------------------------------------------------------
def distance_experiment(base: ExperimentSpec, distances: list, methods: list, out_dir, jobs: int = 1) -> list[dict]:
    """Train full FT and each method at every (s, r) point; correlate distance with relative performance."""
    out_dir = Path(out_dir)
    if len(distances) < 3:
        raise DegenerateInputError(f"a correlation needs at least 3 distance points, got {len(distances)}")
    if "synthetic" not in base.task:
        raise ConfigError("the distance experiment generates synthetic corpora; use a synthetic base task")
    tasks = []
    for s, r in distances:
        syn = dict(base.task["synthetic"], s=float(s), r=float(r))
        tasks.append(dict(base.task, synthetic=SyntheticTaskSpec.from_dict(syn).to_dict()))
    dist = [task_distance(t) for t in tasks]
    if np.ptp(dist) == 0:
        pearson_r(dist, np.arange(len(dist)))  # raises the degenerate-input error before any training
    specs = []
    for i, t in enumerate(tasks):
        for m in ["full"] + [m for m in methods if m != "full"]:
            specs.append(base.derive(task=t, method=parse_method(m).spec, name=f"{base.name}/d{i}/{parse_method(m).spec}"))
    results = run_many(specs, out_dir, jobs)
    per_point = len(results) // len(tasks)
    rows, rel = [], {}
    for i, t in enumerate(tasks):
        block = results[i * per_point : (i + 1) * per_point]
        baseline = block[0]
        attach_baseline(block, baseline)
        syn = t["synthetic"]
        for r in block:
            rows.append([r.method, syn["s"], syn["r"], f"{dist[i]:.4f}", f"{r.bleu:.4f}", f"{baseline.bleu:.4f}",
                         f"{r.rel_perf:.4f}"])
            rel.setdefault(r.method, []).append(r.rel_perf)
    upsert_results(out_dir / "results.csv", results)
    _write_csv(out_dir / "distance.csv", ["method", "s", "r", "distance", "bleu", "full_bleu", "rel_perf_pct"], rows)
    corr = []
    for m in methods:
        spec = parse_method(m).spec
        if spec == "full":
            continue
        r, p = pearson_r(dist, rel[spec])
        corr.append({"method": spec, "pearson_r": r, "p_value": p, "significant": p < 0.05})
    _write_csv(out_dir / "correlation.csv", ["method", "pearson_r", "p_value", "significant"],
               [[c["method"], f"{c['pearson_r']:.6f}", f"{c['p_value']:.6f}", int(c["significant"])] for c in corr])
    return corr


# -- dataset size --------------------------------------------------------
def size_experiment(base: ExperimentSpec, sizes: list, methods: list, out_dir, jobs: int = 1,
                    subset_seed: Optional[int] = None) -> list[dict]:
    """Train every method (full FT included) on nested subsets of the task's training set.

    Emits ``size.csv`` and ``size.svg``.
    """
    out_dir = Path(out_dir)
    sizes = sorted(int(s) for s in sizes)
    seed = base.train_config.seed if subset_seed is None else subset_seed
    pool_task = dict(base.task)
    train_pool, _, _ = load_task(dict(pool_task, dev_size=1, test_size=1))
    if max(sizes) > len(train_pool):
        raise ConfigError(f"largest size {max(sizes)} exceeds the {len(train_pool)} available pairs")
    indices = {n: subset(train_pool, n, seed).provenance["subset"]["indices"] for n in sizes}
    ordered = ["full"] + [parse_method(m).spec for m in methods if parse_method(m).spec != "full"]
    specs = [base.derive(task=pool_task, subset={"size": n, "seed": seed}, method=m, name=f"{base.name}/n{n}/{m}")
             for n in sizes for m in ordered]
    results = run_many(specs, out_dir, jobs)
    rows = []
    prev = set()
    for k, n in enumerate(sizes):
        block = results[k * len(ordered) : (k + 1) * len(ordered)]
        attach_baseline(block, block[0])
        nested = int(prev <= set(indices[n]))
        digest = _digest(indices[n])
        prev = set(indices[n])
        for r in block:
            rows.append([n, r.method, r.trainable, f"{r.bleu:.4f}", f"{r.chrf:.4f}", f"{r.dev_ppl:.6f}",
                         f"{r.rel_perf:.4f}", digest, nested])
    upsert_results(out_dir / "results.csv", results)
    header = ["size", "method", "trainable", "bleu", "chrf", "dev_ppl", "rel_perf_pct", "subset_digest", "contains_previous"]
    _write_csv(out_dir / "size.csv", header, rows)
    series = [(m, [(int(r[0]), float(r[3])) for r in rows if r[1] == m]) for m in ordered]
    write_line_chart(out_dir / "size.svg", series, title="BLEU vs training set size",
                     x_label="training pairs (log)", y_label="test BLEU")
    return [dict(zip(header, r)) for r in rows]
