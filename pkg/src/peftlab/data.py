"""Parallel corpora: file ingestion, synthetic tasks, subsetting and token batching."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import AlignmentError, ConfigError, CorpusEncodingError
from .model import BOS_ID, EOS_ID, PAD_ID, UNK_ID

RESERVED = ("<s>", "</s>", "<pad>", "<unk>")
DEV_SIZE = TEST_SIZE = 1000
_SPLIT_STREAM = {"train": 1, "dev": 2, "test": 3}


def tokenize(line: str) -> list[str]:
    return line.split()


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


class Vocabulary:
    """Token list whose first four entries are the reserved BOS/EOS/PAD/UNK symbols."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ConfigError(f"vocabulary must start with {RESERVED}, got {tuple(tokens[:4])}")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        """Map ids to tokens, dropping BOS/PAD and stopping at EOS."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (BOS_ID, PAD_ID):
                continue
            out.append(self.tokens[i] if 0 <= i < len(self.tokens) else RESERVED[UNK_ID])
        return out

    @classmethod
    def build(cls, sentences: Sequence[Sequence[str]], max_size: Optional[int] = None) -> "Vocabulary":
        """Most frequent tokens first, ties alphabetical."""
        counts = Counter(w for s in sentences for w in s if w not in RESERVED)
        ordered = sorted(counts, key=lambda w: (-counts[w], w))
        if max_size is not None:
            ordered = ordered[: max(0, max_size - len(RESERVED))]
        return cls(list(RESERVED) + ordered)

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    def to_file(self, path) -> Path:
        path = Path(path)
        path.write_text("\n".join(self.tokens) + "\n", encoding="utf-8")
        return path


@dataclass
class ParallelCorpus:
    """Pairs of token-id tuples; targets carry BOS ... EOS, sources carry no specials."""

    pairs: list
    vocab: Vocabulary
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, (s, t) in enumerate(self.pairs):
            if len(s) == 0 or len(t) <= 2:
                raise AlignmentError(f"pair {i} has an empty side")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> list[tuple]:
        return [s for s, _ in self.pairs]

    @property
    def targets(self) -> list[tuple]:
        return [t for _, t in self.pairs]

    def source_text(self, i: int) -> str:
        return detokenize(self.vocab.decode(self.pairs[i][0]))

    def target_text(self, i: int) -> str:
        return detokenize(self.vocab.decode(self.pairs[i][1]))


def _read_lines(path) -> list[str]:
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    out = []
    for no, line in enumerate(lines, start=1):
        try:
            out.append(line.rstrip(b"\r").decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CorpusEncodingError(f"{path}: line {no} is not valid UTF-8 ({exc.reason})") from None
    return out


def load_parallel(src_path, tgt_path, tokenizer: Callable[[str], list[str]] = tokenize,
                  vocab: Optional[Vocabulary] = None) -> ParallelCorpus:
    """Read line-aligned UTF-8 files; unknown tokens map to UNK and targets get BOS/EOS."""
    src_lines, tgt_lines = _read_lines(src_path), _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise AlignmentError(f"{src_path} has {len(src_lines)} lines but {tgt_path} has {len(tgt_lines)}")
    src_tok = [tokenizer(line) for line in src_lines]
    tgt_tok = [tokenizer(line) for line in tgt_lines]
    for i, (s, t) in enumerate(zip(src_tok, tgt_tok), start=1):
        if not s or not t:
            raise AlignmentError(f"line {i} has an empty side")
    if vocab is None:
        vocab = Vocabulary.build(src_tok + tgt_tok)
    pairs = [(tuple(vocab.encode(s)), (BOS_ID, *vocab.encode(t), EOS_ID)) for s, t in zip(src_tok, tgt_tok)]
    return ParallelCorpus(pairs, vocab, {"source": str(src_path), "target": str(tgt_path)})


# -- synthetic tasks ----------------------------------------------------
@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: str = "lexical-translation"
    vocab_size: int = 64
    min_len: int = 3
    max_len: int = 10
    s: float = 0.5
    r: float = 0.1
    seed: int = 0
    pool: str = "source"

    def __post_init__(self):
        if self.task not in ("copy", "reverse", "lexical-translation"):
            raise ConfigError(f"unknown synthetic task {self.task!r}")
        if self.vocab_size < 8:
            raise ConfigError(f"vocab_size must be at least 8 (4 ids are reserved), got {self.vocab_size}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"invalid length range [{self.min_len}, {self.max_len}]")
        if not (0.0 <= self.s <= 1.0 and 0.0 <= self.r <= 1.0):
            raise ConfigError("s and r must lie in [0, 1]")
        if self.pool not in ("source", "all"):
            raise ConfigError(f"pool must be 'source' or 'all', got {self.pool!r}")
        if self.pool == "all" and self.task != "copy":
            raise ConfigError("pool='all' is only defined for the copy task")
        if self.task == "copy" and (self.s or self.r):
            raise ConfigError("the copy task requires s = r = 0")

    @property
    def distance(self) -> float:
        return (self.s + self.r) / 2.0

    @property
    def n_source_words(self) -> int:
        return (self.vocab_size - len(RESERVED)) // 2

    @property
    def n_input_symbols(self) -> int:
        """Symbols sources are drawn from; ``pool="all"`` also uses target-only symbols."""
        return self.n_source_words if self.pool == "source" else self.vocab_size - len(RESERVED)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticTaskSpec":
        return cls(**data)


def synthetic_vocabulary(vocab_size: int) -> Vocabulary:
    """Source words ``w*`` followed by target-only symbols ``t*``; shared by every task of that size."""
    n_src = (vocab_size - len(RESERVED)) // 2
    n_tgt = vocab_size - len(RESERVED) - n_src
    return Vocabulary(list(RESERVED) + [f"w{i}" for i in range(n_src)] + [f"t{i}" for i in range(n_tgt)])


def synthetic_lexicon(spec: SyntheticTaskSpec) -> dict[int, int]:
    """Bijective source-id to target-id map; a fraction ``s`` of words move to target-only symbols.

    The substituted words for a smaller ``s`` are a subset of those for a larger
    one (same seed), so corpora at different distances differ only by degree.
    """
    n_src = spec.n_source_words
    first_src, first_tgt = len(RESERVED), len(RESERVED) + n_src
    rng = np.random.default_rng([spec.seed, 0])
    order = rng.permutation(n_src)
    symbols = rng.permutation(spec.vocab_size - first_tgt)
    k = int(round(spec.s * n_src))
    lexicon = {i: i for i in range(first_src, spec.vocab_size)}
    for j in range(k):
        lexicon[first_src + int(order[j])] = first_tgt + int(symbols[j])
    return lexicon


def _reorder(tokens: list, draws: np.ndarray, r: float) -> list:
    out = list(tokens)
    i = 0
    while i + 1 < len(out):
        if draws[i] < r:
            out[i], out[i + 1] = out[i + 1], out[i]
            i += 2
        else:
            i += 1
    return out


def transform_sentence(spec: SyntheticTaskSpec, lexicon: dict, source: Sequence[int], draws=None) -> list[int]:
    tokens = list(source)[::-1] if spec.task == "reverse" else list(source)
    tokens = [lexicon[t] for t in tokens]
    if spec.r > 0:
        tokens = _reorder(tokens, draws, spec.r)
    return tokens


def generate_synthetic(spec: SyntheticTaskSpec, n: int, split: str = "train") -> ParallelCorpus:
    """Deterministic corpus of ``n`` pairs for ``split`` (disjoint seed streams per split)."""
    if n < 1:
        raise ConfigError(f"n must be at least 1, got {n}")
    vocab = synthetic_vocabulary(spec.vocab_size)
    lexicon = synthetic_lexicon(spec)
    stream = _SPLIT_STREAM[split]
    words = np.random.default_rng([spec.seed, stream, 0])
    swaps = np.random.default_rng([spec.seed, stream, 1])
    first = len(RESERVED)
    pairs = []
    for _ in range(n):
        length = int(words.integers(spec.min_len, spec.max_len + 1))
        source = [first + int(w) for w in words.integers(0, spec.n_input_symbols, size=length)]
        draws = swaps.random(spec.max_len)
        target = transform_sentence(spec, lexicon, source, draws)
        pairs.append((tuple(source), (BOS_ID, *target, EOS_ID)))
    return ParallelCorpus(pairs, vocab, {"synthetic": spec.to_dict(), "split": split, "n": n})


def synthetic_splits(spec: SyntheticTaskSpec, n_train: int, n_dev: int = DEV_SIZE, n_test: int = TEST_SIZE):
    return (generate_synthetic(spec, n_train, "train"), generate_synthetic(spec, n_dev, "dev"),
            generate_synthetic(spec, n_test, "test"))


def subset(corpus: ParallelCorpus, size: int, seed: int) -> ParallelCorpus:
    """Uniform sample without replacement; for one seed, smaller subsets nest inside larger ones."""
    if not 1 <= size <= len(corpus):
        raise ConfigError(f"subset size must be in [1, {len(corpus)}], got {size}")
    order = np.random.default_rng(seed).permutation(len(corpus))
    chosen = sorted(int(i) for i in order[:size])
    provenance = dict(corpus.provenance, subset={"size": size, "seed": seed, "indices": chosen})
    return ParallelCorpus([corpus.pairs[i] for i in chosen], corpus.vocab, provenance)


@dataclass
class Batch:
    src: np.ndarray
    tgt: np.ndarray
    indices: list

    @property
    def n_tokens(self) -> int:
        """Predicted (non-pad) target tokens, i.e. everything after BOS."""
        return int((self.tgt[:, 1:] != PAD_ID).sum())

    def __len__(self) -> int:
        return len(self.indices)


def pad(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def batch_by_tokens(corpus: ParallelCorpus, max_tokens: int, seed: int) -> list[Batch]:
    """Shuffled length-bucketed batches with (longest target) x (rows) <= ``max_tokens``."""
    if len(corpus) == 0:
        raise ConfigError("cannot batch an empty corpus")
    lengths = [len(t) for _, t in corpus.pairs]
    for i, n in enumerate(lengths):
        if n > max_tokens:
            raise ConfigError(f"sentence {i} has {n} target tokens, more than max_tokens={max_tokens}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    order = sorted(order.tolist(), key=lambda i: lengths[i])
    groups, current, longest = [], [], 0
    for i in order:
        width = max(longest, lengths[i])
        if current and width * (len(current) + 1) > max_tokens:
            groups.append(current)
            current, width = [], lengths[i]
        current.append(i)
        longest = width
    groups.append(current)
    batches = [Batch(pad([corpus.pairs[i][0] for i in g]), pad([corpus.pairs[i][1] for i in g]), g) for g in groups]
    return [batches[i] for i in rng.permutation(len(batches))]


def load_distances(path) -> dict[str, float]:
    """Read an external ``lang_pair,distance`` CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"lang_pair", "distance"} <= set(reader.fieldnames):
            raise ConfigError(f"{path}: expected columns lang_pair,distance")
        return {row["lang_pair"]: float(row["distance"]) for row in reader}
