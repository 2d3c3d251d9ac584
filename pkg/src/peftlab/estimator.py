"""scikit-learn style wrapper: ``fit(sources, targets)`` / ``predict(sources)`` / ``score``."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .data import ParallelCorpus, Vocabulary, tokenize
from .exceptions import AlignmentError, ConfigError
from .experiments import translate
from .metrics import bleu
from .model import BOS_ID, EOS_ID, UNK_ID, ModelConfig, build_model, load_checkpoint
from .peft import apply_method, parse_method
from .train import TrainConfig, train


def check_text(X, name: str = "X") -> list[str]:
    """Validate a sequence of non-empty sentences and return it as a list."""
    if isinstance(X, str) or not hasattr(X, "__len__"):
        raise TypeError(f"{name} must be a sequence of strings, got {type(X).__name__}")
    X = list(X)
    if not X:
        raise ValueError(f"{name} is empty")
    for i, s in enumerate(X):
        if not isinstance(s, str):
            raise TypeError(f"{name}[{i}] is {type(s).__name__}, expected str")
        if not s.split():
            raise ValueError(f"{name}[{i}] is blank")
    return X


def check_pairs(X, y) -> tuple[list[str], list[str]]:
    X, y = check_text(X, "X"), check_text(y, "y")
    if len(X) != len(y):
        raise AlignmentError(f"X has {len(X)} sentences but y has {len(y)}")
    return X, y


def _corpus(X, y, vocab: Vocabulary) -> ParallelCorpus:
    pairs = [(tuple(vocab.encode(tokenize(s))), (BOS_ID, *vocab.encode(tokenize(t)), EOS_ID)) for s, t in zip(X, y)]
    return ParallelCorpus(pairs, vocab)


class PeftTranslator(BaseEstimator):
    """Fine-tune a (parent) seq2seq transformer with one tuning method.

    ``parent`` is a checkpoint path; without it the model starts from its
    random initialization and the vocabulary is built from the training data.
    """

    def __init__(self, method: str = "full", parent: Optional[str] = None, model_config: Optional[dict] = None,
                 max_lr: float = 1e-3, warmup_steps: int = 100, total_steps: int = 1000, label_smoothing: float = 0.1,
                 dropout: float = 0.1, max_tokens_per_batch: int = 1024, update_frequency: int = 1,
                 patience_epochs: int = 5, validation_fraction: float = 0.1, precision: str = "f64", seed: int = 0):
        self.method = method
        self.parent = parent
        self.model_config = model_config
        self.max_lr = max_lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.label_smoothing = label_smoothing
        self.dropout = dropout
        self.max_tokens_per_batch = max_tokens_per_batch
        self.update_frequency = update_frequency
        self.patience_epochs = patience_epochs
        self.validation_fraction = validation_fraction
        self.precision = precision
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(max_lr=self.max_lr, warmup_steps=self.warmup_steps, total_steps=self.total_steps,
                           label_smoothing=self.label_smoothing, dropout=self.dropout,
                           max_tokens_per_batch=self.max_tokens_per_batch, update_frequency=self.update_frequency,
                           patience_epochs=self.patience_epochs, seed=self.seed)

    def fit(self, X, y, eval_set: Optional[tuple] = None):
        X, y = check_pairs(X, y)
        parse_method(self.method)
        cfg = self._train_config()
        if not 0.0 < self.validation_fraction < 1.0 and eval_set is None:
            raise ConfigError("validation_fraction must lie in (0, 1) when no eval_set is given")
        with ad.default_dtype(self.precision):
            if self.parent is not None:
                model, tokens = load_checkpoint(self.parent)
                model.method = None
                if tokens is None:
                    raise ConfigError(f"parent checkpoint {self.parent} carries no vocabulary")
                vocab = Vocabulary(tokens)
            else:
                vocab = Vocabulary.build([tokenize(s) for s in X + y])
                config = dict(self.model_config or {})
                config.setdefault("vocab_size", len(vocab))
                config.setdefault("seed", self.seed)
                model = build_model(ModelConfig(**config))
            if len(vocab) > model.config.vocab_size:
                raise ConfigError(f"vocabulary of {len(vocab)} exceeds model vocab_size {model.config.vocab_size}")
            if eval_set is not None:
                dev_X, dev_y = check_pairs(*eval_set)
                train_X, train_y = X, y
            else:
                order = np.random.default_rng(self.seed).permutation(len(X))
                n_dev = max(1, int(round(self.validation_fraction * len(X))))
                if n_dev >= len(X):
                    raise ValueError("too few pairs to hold out a validation split")
                dev_idx, train_idx = sorted(order[:n_dev]), sorted(order[n_dev:])
                train_X, train_y = [X[i] for i in train_idx], [y[i] for i in train_idx]
                dev_X, dev_y = [X[i] for i in dev_idx], [y[i] for i in dev_idx]
            apply_method(model, self.method)
            result = train(model, _corpus(train_X, train_y, vocab), _corpus(dev_X, dev_y, vocab), cfg)
        self.model_ = model
        self.vocab_ = vocab
        self.history_ = result.history
        self.best_dev_ppl_ = result.best_dev_ppl
        self.n_trainable_ = model.params.numel(True)
        return self

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        X = check_text(X)
        corpus = ParallelCorpus([(tuple(self.vocab_.encode(tokenize(s))), (BOS_ID, UNK_ID, EOS_ID)) for s in X], self.vocab_)
        with ad.default_dtype(self.precision):
            return translate(self.model_, corpus)

    def score(self, X, y) -> float:
        """Corpus BLEU of ``predict(X)`` against ``y``."""
        X, y = check_pairs(X, y)
        return bleu(self.predict(X), y)
