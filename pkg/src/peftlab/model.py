"""Miniature pre-LN encoder-decoder transformer with a named parameter store."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, DimensionError

BOS_ID, EOS_ID, PAD_ID, UNK_ID = 0, 1, 2, 3
LN_EPS = 1e-5
_MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    d_model: int = 64
    heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 64
    max_positions: int = 64
    dropout: float = 0.1
    activation: str = "relu"
    tie_embeddings: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_model < 1 or self.heads < 1:
            raise ConfigError("d_model and heads must be positive")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ConfigError("layer counts cannot be negative")
        if self.ffn_dim < 1 or self.max_positions < 1:
            raise ConfigError("ffn_dim and max_positions must be positive")
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must leave room beyond the four reserved ids")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def n_layers(self) -> int:
        return self.enc_layers + self.dec_layers

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = cls.__dataclass_fields__
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


# Desk-scale default and the large reference shape (used for parameter counting only).
DESK_SCALE = ModelConfig()
PAPER_SCALE = ModelConfig(
    enc_layers=12, dec_layers=12, d_model=1024, heads=16, ffn_dim=4096,
    vocab_size=128_112, max_positions=1024, dropout=0.3,
)

PARAM_GROUPS = (
    "attention weight", "attention bias", "ffn weight", "ffn bias",
    "ln gamma", "ln beta", "embedding", "cross-attention", "adapter", "prefix",
)


def param_group(name: str) -> str:
    """Classify a parameter by its hierarchical name."""
    if name.startswith("prefix."):
        return "prefix"
    if ".adapter." in name:
        return "adapter"
    if ".cross_attn." in name:
        return "cross-attention"
    if name.endswith(".gamma"):
        return "ln gamma"
    if name.endswith(".beta"):
        return "ln beta"
    if "embed" in name or "output_projection" in name:
        return "embedding"
    if ".self_attn." in name:
        return "attention bias" if name.endswith(".bias") else "attention weight"
    if ".ffn." in name:
        return "ffn bias" if name.endswith(".bias") else "ffn weight"
    raise ValueError(f"cannot classify parameter {name!r}")


def _attention_shapes(prefix: str, d: int) -> dict:
    shapes = {}
    for proj in ("q", "k", "v", "out"):
        shapes[f"{prefix}.{proj}.weight"] = (d, d)
        shapes[f"{prefix}.{proj}.bias"] = (d,)
    return shapes


def _ln_shapes(prefix: str, d: int) -> dict:
    return {f"{prefix}.gamma": (d,), f"{prefix}.beta": (d,)}


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Every base-model parameter name with its shape, in registration order."""
    d, f, v, p = config.d_model, config.ffn_dim, config.vocab_size, config.max_positions
    shapes: dict[str, tuple] = {}
    for stack, n in (("encoder", config.enc_layers), ("decoder", config.dec_layers)):
        shapes[f"{stack}.embed_tokens.weight"] = (v, d)
        shapes[f"{stack}.embed_positions.weight"] = (p, d)
        for i in range(n):
            base = f"{stack}.layer{i}"
            shapes.update(_ln_shapes(f"{base}.ln1", d))
            shapes.update(_attention_shapes(f"{base}.self_attn", d))
            if stack == "decoder":
                shapes.update(_ln_shapes(f"{base}.ln2", d))
                shapes.update(_attention_shapes(f"{base}.cross_attn", d))
                ffn_ln = "ln3"
            else:
                ffn_ln = "ln2"
            shapes.update(_ln_shapes(f"{base}.{ffn_ln}", d))
            shapes[f"{base}.ffn.fc1.weight"] = (d, f)
            shapes[f"{base}.ffn.fc1.bias"] = (f,)
            shapes[f"{base}.ffn.fc2.weight"] = (f, d)
            shapes[f"{base}.ffn.fc2.bias"] = (d,)
        shapes.update(_ln_shapes(f"{stack}.ln_final", d))
    if not config.tie_embeddings:
        shapes["decoder.output_projection.weight"] = (d, v)
    return shapes


class ParameterStore:
    """Named parameters with per-name trainable flags."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def register(self, name: str, tensor: Tensor, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} already registered")
        tensor.name = name
        self._tensors[name] = tensor
        self._trainable[name] = False
        self.set_trainable(name, trainable)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = bool(flag)
        self._tensors[name].requires_grad = bool(flag)

    def freeze_all(self) -> None:
        for name in self._tensors:
            self.set_trainable(name, False)

    def unfreeze_all(self) -> None:
        for name in self._tensors:
            self.set_trainable(name, True)

    def trainable_names(self) -> list[str]:
        return [n for n, flag in self._trainable.items() if flag]

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._tensors[n]) for n in self.trainable_names()]

    def numel(self, trainable_only: bool = False) -> int:
        names = self.trainable_names() if trainable_only else self._tensors
        return sum(int(np.prod(self._tensors[n].shape)) for n in names)

    def breakdown(self, trainable_only: bool = True) -> dict[str, int]:
        counts = {g: 0 for g in PARAM_GROUPS}
        names = self.trainable_names() if trainable_only else self._tensors
        for n in names:
            counts[param_group(n)] += int(np.prod(self._tensors[n].shape))
        return {g: c for g, c in counts.items() if c}

    def state_dict(self, names=None) -> dict[str, np.ndarray]:
        names = self._tensors if names is None else names
        return {n: np.array(self._tensors[n].data, copy=True) for n in names}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._tensors) - set(state)
            extra = set(state) - set(self._tensors)
            if missing or extra:
                raise KeyError(f"state mismatch; missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for n, arr in state.items():
            t = self._tensors[n]
            if tuple(arr.shape) != t.shape:
                raise DimensionError(f"{n}: checkpoint shape {arr.shape} != parameter shape {t.shape}")
            t.data = np.array(arr, dtype=t.dtype, copy=True)


def _xavier(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _init_param(name: str, shape: tuple, rng: np.random.Generator, dtype) -> np.ndarray:
    if name.endswith(".gamma"):
        return np.ones(shape, dtype=dtype)
    if name.endswith(".beta") or name.endswith(".bias"):
        return np.zeros(shape, dtype=dtype)
    return _xavier(rng, shape, dtype)


def causal_mask(length: int, prefix: int = 0) -> np.ndarray:
    """Boolean [L+p, L+p] mask; True marks visible key positions.

    With ``prefix`` rows in front, real position ``n`` (1-based) sees the ``p``
    prefix rows, the ``n - 1`` earlier real positions and itself.
    """
    total = length + prefix
    return np.tril(np.ones((total, total), dtype=bool))


class Seq2SeqTransformer:
    """Pre-LN encoder-decoder transformer; PEFT methods hook in via ``adapters`` and ``prefix``."""

    def __init__(self, config: ModelConfig, params: ParameterStore):
        self.config = config
        self.params = params
        self.method = None
        self.adapters: dict = {}
        self.prefix = None
        self.trainable_mask = frozenset(params.names())
        self.materialized = True
        self.training = False
        self.dropout_p = config.dropout
        self.rng = np.random.default_rng(config.seed)

    # -- modes ------------------------------------------------------------
    def train(self, mode: bool = True) -> "Seq2SeqTransformer":
        self.training = mode
        return self

    def eval(self) -> "Seq2SeqTransformer":
        return self.train(False)

    @property
    def dtype(self):
        return next(iter(self.params._tensors.values())).dtype

    # -- building blocks --------------------------------------------------
    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _drop(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.dropout_p, self.rng, self.training)

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return ad.layer_norm(x, self._p(f"{name}.gamma"), self._p(f"{name}.beta"), LN_EPS)

    def _act(self, x: Tensor) -> Tensor:
        return ad.relu(x) if self.config.activation == "relu" else ad.gelu(x)

    def _attention(self, x_q: Tensor, x_kv: Tensor, name: str, visible: np.ndarray) -> Tensor:
        """Multi-head attention; ``visible`` broadcasts to [B, 1, Tq, Tk]."""
        B, Tq, d = x_q.shape
        Tk = x_kv.shape[1]
        H, dh = self.config.heads, self.config.head_dim
        q = ad.linear(x_q, self._p(f"{name}.q.weight"), self._p(f"{name}.q.bias"))
        k = ad.linear(x_kv, self._p(f"{name}.k.weight"), self._p(f"{name}.k.bias"))
        v = ad.linear(x_kv, self._p(f"{name}.v.weight"), self._p(f"{name}.v.bias"))
        q = ad.transpose(q.reshape(B, Tq, H, dh), (0, 2, 1, 3))
        k = ad.transpose(k.reshape(B, Tk, H, dh), (0, 2, 3, 1))
        v = ad.transpose(v.reshape(B, Tk, H, dh), (0, 2, 1, 3))
        scores = ad.matmul(q, k) * (1.0 / math.sqrt(dh))
        bias = np.where(visible, 0.0, _MASK_VALUE).astype(scores.dtype)
        weights = ad.softmax(scores + bias, axis=-1)
        ctx = ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)).reshape(B, Tq, d)
        return ad.linear(ctx, self._p(f"{name}.out.weight"), self._p(f"{name}.out.bias"))

    def _ffn(self, x: Tensor, name: str) -> Tensor:
        h = self._act(ad.linear(x, self._p(f"{name}.fc1.weight"), self._p(f"{name}.fc1.bias")))
        return ad.linear(h, self._p(f"{name}.fc2.weight"), self._p(f"{name}.fc2.bias"))

    def _embed(self, ids: np.ndarray, stack: str) -> Tensor:
        B, T = ids.shape
        if T > self.config.max_positions:
            raise DimensionError(f"sequence length {T} exceeds max_positions={self.config.max_positions}")
        tok = ad.embedding(self._p(f"{stack}.embed_tokens.weight"), ids)
        pos = ad.embedding(self._p(f"{stack}.embed_positions.weight"), np.arange(T))
        return self._drop(tok + pos)

    def _adapt(self, x: Tensor, layer: str) -> Tensor:
        adapter = self.adapters.get(layer)
        if adapter is None:
            return x
        from .peft import adapter_forward

        return adapter_forward(adapter, x, self.config.activation)

    def _inject(self, x: Tensor, stack: str, layer: int) -> Tensor:
        if self.prefix is None:
            return x
        return self.prefix.inject(stack, layer, x)

    @property
    def prefix_length(self) -> int:
        return 0 if self.prefix is None else self.prefix.length

    # -- forward passes ---------------------------------------------------
    def encode(self, src: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Encoder states [B, p+S, d] and key visibility [B, p+S]."""
        src = _as_batch(src, "source")
        x = self._embed(src, "encoder")
        x = self._inject(x, "encoder", 0)
        p = self.prefix_length
        keys = np.concatenate([np.ones((src.shape[0], p), dtype=bool), src != PAD_ID], axis=1)
        visible = keys[:, None, None, :]
        for i in range(self.config.enc_layers):
            base = f"encoder.layer{i}"
            if i > 0:
                x = self._inject(x, "encoder", i)
            h = self._ln(x, f"{base}.ln1")
            x = x + self._drop(self._attention(h, h, f"{base}.self_attn", visible))
            x = x + self._drop(self._ffn(self._ln(x, f"{base}.ln2"), f"{base}.ffn"))
            x = self._adapt(x, base)
        return self._ln(x, "encoder.ln_final"), keys

    def decode(self, tgt_in: np.ndarray, memory: Tensor, memory_keys: np.ndarray) -> Tensor:
        """Logits [B, T, V] for teacher-forced decoder input ``tgt_in``."""
        tgt_in = _as_batch(tgt_in, "target")
        T = tgt_in.shape[1]
        x = self._embed(tgt_in, "decoder")
        x = self._inject(x, "decoder", 0)
        p = self.prefix_length
        self_visible = causal_mask(T, p)[None, None, :, :]
        cross_visible = memory_keys[:, None, None, :]
        for i in range(self.config.dec_layers):
            base = f"decoder.layer{i}"
            if i > 0:
                x = self._inject(x, "decoder", i)
            h = self._ln(x, f"{base}.ln1")
            x = x + self._drop(self._attention(h, h, f"{base}.self_attn", self_visible))
            x = x + self._drop(self._attention(self._ln(x, f"{base}.ln2"), memory, f"{base}.cross_attn", cross_visible))
            x = x + self._drop(self._ffn(self._ln(x, f"{base}.ln3"), f"{base}.ffn"))
            x = self._adapt(x, base)
        x = self._ln(x, "decoder.ln_final")
        if p:
            x = x[:, p:, :]
        if self.config.tie_embeddings:
            w = ad.transpose(self._p("decoder.embed_tokens.weight"), (1, 0))
            return ad.matmul(x, w)
        return ad.linear(x, self._p("decoder.output_projection.weight"))

    def forward(self, src_tokens, tgt_tokens) -> Tensor:
        """Teacher-forced logits; 1-D inputs give [T, V], 2-D inputs give [B, T, V]."""
        src = np.asarray(src_tokens)
        tgt = np.asarray(tgt_tokens)
        single = src.ndim == 1
        if single != (tgt.ndim == 1):
            raise DimensionError("source and target must both be single sequences or both batches")
        memory, keys = self.encode(src)
        logits = self.decode(tgt, memory, keys)
        return logits.reshape(logits.shape[1:]) if single else logits

    __call__ = forward

    def loss(self, src, tgt, smoothing: float = 0.0, reduction: str = "mean") -> Tensor:
        """Label-smoothed loss of predicting ``tgt[:, 1:]`` from ``tgt[:, :-1]``."""
        src = _as_batch(src, "source")
        tgt = _as_batch(tgt, "target")
        logits = self.forward(src, tgt[:, :-1])
        return ad.cross_entropy_label_smoothed(logits, tgt[:, 1:], smoothing, PAD_ID, reduction)


def _as_batch(ids, side: str) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionError(f"{side} tokens must be 1-D or 2-D, got shape {arr.shape}")
    if arr.shape[1] == 0:
        raise DimensionError(f"empty {side} sequence")
    return arr


def build_model(config: ModelConfig, materialize: bool = True) -> Seq2SeqTransformer:
    """Allocate and initialize every parameter from ``config.seed``.

    ``materialize=False`` backs each base parameter with a zero-stride view so
    paper-sized configurations can be instrumented and counted without
    allocating their weights.
    """
    config.validate()
    dtype = ad.get_default_dtype()
    rng = np.random.default_rng(config.seed)
    store = ParameterStore()
    for name, shape in parameter_shapes(config).items():
        if materialize:
            data = _init_param(name, shape, rng, dtype)
        else:
            data = np.broadcast_to(np.zeros((), dtype=dtype), shape)
        store.register(name, Tensor(data, dtype=dtype), trainable=True)
    model = Seq2SeqTransformer(config, store)
    model.materialized = materialize
    return model


def forward(model: Seq2SeqTransformer, src_tokens, tgt_tokens) -> Tensor:
    return model.forward(src_tokens, tgt_tokens)


def greedy_decode_batch(model: Seq2SeqTransformer, src: np.ndarray, max_len: int) -> list[list[int]]:
    """Argmax decoding from BOS for a padded source batch; each output stops after EOS."""
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    src = _as_batch(src, "source")
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            memory, keys = model.encode(src)
            B = src.shape[0]
            seqs = np.full((B, 1), BOS_ID, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            for _ in range(max_len):
                logits = model.decode(seqs, memory, keys).data[:, -1, :]
                nxt = logits.argmax(axis=-1)
                nxt = np.where(done, PAD_ID, nxt)
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
                done |= nxt == EOS_ID
                if done.all():
                    break
    finally:
        model.train(was_training)
    out = []
    for row in seqs[:, 1:]:
        tokens = []
        for tok in row.tolist():
            if tok == PAD_ID:
                break
            tokens.append(tok)
            if tok == EOS_ID:
                break
        out.append(tokens)
    return out


def greedy_decode(model: Seq2SeqTransformer, src_tokens, max_len: int) -> list[int]:
    """Greedy decode one source sequence; the result ends in EOS unless ``max_len`` cut it short."""
    return greedy_decode_batch(model, np.asarray(src_tokens)[None, :], max_len)[0]


# -- checkpoints --------------------------------------------------------
def save_checkpoint(model: Seq2SeqTransformer, path, vocabulary: Optional[list[str]] = None) -> Path:
    """Write config, method, vocabulary and every parameter (little-endian) to an ``.npz`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "config": model.config.to_dict(),
        "method": None if model.method is None else model.method.spec,
        "vocabulary": vocabulary,
    }
    arrays = {f"param:{n}": np.ascontiguousarray(t.data).astype(t.dtype.newbyteorder("<")) for n, t in model.params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[Seq2SeqTransformer, Optional[list[str]]]:
    """Rebuild a model (re-applying its tuning method) and restore every parameter bit-exactly."""
    with np.load(Path(path), allow_pickle=False) as archive:
        meta = json.loads(bytes(archive["__meta__"]).decode("utf-8"))
        state = {k[len("param:"):]: archive[k] for k in archive.files if k.startswith("param:")}
    config = ModelConfig.from_dict(meta["config"])
    dtype = next(iter(state.values())).dtype.newbyteorder("=")
    precision = "f32" if dtype == np.float32 else "f64"
    with ad.default_dtype(precision):
        model = build_model(config)
        if meta["method"] is not None:
            from .peft import apply_method, parse_method

            apply_method(model, parse_method(meta["method"]))
    model.params.load_state_dict({k: v.astype(dtype) for k, v in state.items()})
    return model, meta.get("vocabulary")

