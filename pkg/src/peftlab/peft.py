"""Tuning regimes as model surgery plus trainable-flag masks.

A method either marks a subset of the base parameters trainable (full, noft,
bitfit, xattn) or freezes the base model and registers new trainable
parameters (adapter, prefix).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DimensionError, InstrumentationError, MethodSpecError
from .model import LN_EPS, Seq2SeqTransformer

METHOD_GRAMMAR = "full | noft | adapter:<b> | prefix:<p> | bitfit:lnbias | bitfit:lnweights | xattn"


@dataclass(frozen=True)
class FullFT:
    @property
    def spec(self) -> str:
        return "full"


@dataclass(frozen=True)
class NoFT:
    @property
    def spec(self) -> str:
        return "noft"


@dataclass(frozen=True)
class Adapter:
    bottleneck: int

    def __post_init__(self):
        if not isinstance(self.bottleneck, int) or self.bottleneck < 1:
            raise MethodSpecError(f"adapter bottleneck must be a positive integer, got {self.bottleneck!r}")

    @property
    def spec(self) -> str:
        return f"adapter:{self.bottleneck}"


@dataclass(frozen=True)
class Prefix:
    length: int

    def __post_init__(self):
        if not isinstance(self.length, int) or self.length < 1:
            raise MethodSpecError(f"prefix length must be a positive integer, got {self.length!r}")

    @property
    def spec(self) -> str:
        return f"prefix:{self.length}"


@dataclass(frozen=True)
class BitFit:
    variant: str = "lnweights"

    def __post_init__(self):
        if self.variant not in ("lnbias", "lnweights"):
            raise MethodSpecError(f"bitfit variant must be lnbias or lnweights, got {self.variant!r}")

    @property
    def spec(self) -> str:
        return f"bitfit:{self.variant}"


@dataclass(frozen=True)
class XAttention:
    @property
    def spec(self) -> str:
        return "xattn"


PeftMethod = Union[FullFT, NoFT, Adapter, Prefix, BitFit, XAttention]

_POSITIVE = re.compile(r"^[1-9][0-9]*$")


def parse_method(text: str) -> PeftMethod:
    """Parse a method string; see ``METHOD_GRAMMAR``."""
    raw = text.strip().lower() if isinstance(text, str) else text
    if raw == "full":
        return FullFT()
    if raw == "noft":
        return NoFT()
    if raw == "xattn":
        return XAttention()
    if isinstance(raw, str) and ":" in raw:
        head, _, arg = raw.partition(":")
        if head == "bitfit" and arg in ("lnbias", "lnweights"):
            return BitFit(arg)
        if head in ("adapter", "prefix") and _POSITIVE.match(arg):
            return Adapter(int(arg)) if head == "adapter" else Prefix(int(arg))
    raise MethodSpecError(f"invalid method {text!r}; expected one of: {METHOD_GRAMMAR}")


# -- adapters -------------------------------------------------------------
@dataclass
class AdapterModule:
    """Bottleneck unit ``LN -> down -> f -> up`` with a residual around it."""

    ln_gamma: Tensor
    ln_beta: Tensor
    W_down: Tensor
    b_down: Tensor
    W_up: Tensor
    b_up: Tensor

    @property
    def d_model(self) -> int:
        return self.W_down.shape[0]

    @property
    def bottleneck(self) -> int:
        return self.W_down.shape[1]

    def named_tensors(self) -> dict[str, Tensor]:
        return {
            "ln.gamma": self.ln_gamma, "ln.beta": self.ln_beta,
            "down.weight": self.W_down, "down.bias": self.b_down,
            "up.weight": self.W_up, "up.bias": self.b_up,
        }

    @classmethod
    def initialize(cls, d: int, b: int, rng: np.random.Generator, dtype=None, materialize: bool = True):
        dtype = dtype or ad.get_default_dtype()
        if not materialize:
            z = np.zeros((), dtype=dtype)
            make = lambda shape: Tensor(np.broadcast_to(z, shape), dtype=dtype)  # noqa: E731
            return cls(make((d,)), make((d,)), make((d, b)), make((b,)), make((b, d)), make((d,)))
        bound = math.sqrt(6.0 / (d + b))
        return cls(
            ln_gamma=Tensor(np.ones(d), dtype=dtype),
            ln_beta=Tensor(np.zeros(d), dtype=dtype),
            W_down=Tensor(rng.uniform(-bound, bound, size=(d, b)), dtype=dtype),
            b_down=Tensor(np.zeros(b), dtype=dtype),
            W_up=Tensor(np.zeros((b, d)), dtype=dtype),
            b_up=Tensor(np.zeros(d), dtype=dtype),
        )


def adapter_forward(adapter: AdapterModule, h: Tensor, activation: str = "relu") -> Tensor:
    """Return ``A(h) + h`` applied row-wise over the last axis."""
    if h.shape[-1] != adapter.d_model:
        raise DimensionError(f"adapter expects last dimension {adapter.d_model}, got input shape {h.shape}")
    z = ad.layer_norm(h, adapter.ln_gamma, adapter.ln_beta, LN_EPS)
    inner = ad.linear(z, adapter.W_down, adapter.b_down)
    inner = ad.relu(inner) if activation == "relu" else ad.gelu(inner)
    return ad.linear(inner, adapter.W_up, adapter.b_up) + h


# -- prefixes -------------------------------------------------------------
class PrefixBank:
    """One ``[p, d]`` prefix per transformer layer per stack.

    Entry 0 of a stack is concatenated in front of the embeddings and acts as
    that stack's first-layer injection; entries ``l >= 1`` overwrite the first
    ``p`` hidden rows before layer ``l``.
    """

    def __init__(self, vectors: dict[str, list[Tensor]], length: int):
        self.vectors = vectors
        self.length = length

    def __len__(self) -> int:
        return sum(len(v) for v in self.vectors.values())

    @classmethod
    def initialize(cls, enc_layers: int, dec_layers: int, p: int, d: int, rng: np.random.Generator, dtype=None):
        dtype = dtype or ad.get_default_dtype()
        std = math.sqrt(2.0 / (p + d))
        vectors = {
            stack: [Tensor(rng.normal(0.0, std, size=(p, d)), dtype=dtype) for _ in range(n)]
            for stack, n in (("encoder", enc_layers), ("decoder", dec_layers))
        }
        return cls(vectors, p)

    def named_tensors(self) -> dict[str, Tensor]:
        return {f"prefix.{stack}.layer{i}": t for stack, ts in self.vectors.items() for i, t in enumerate(ts)}

    def inject(self, stack: str, layer: int, states: Tensor, length: int | None = None) -> Tensor:
        return prefix_inject(self, (stack, layer), states, length)


def prefix_inject(bank: PrefixBank, stage, states: Tensor, length: int | None = None) -> Tensor:
    """Insert or overwrite the prefix rows of ``states`` ([L or L+p, d] or batched).

    ``stage`` is ``(stack, layer)``; ``(stack, "embeddings")`` is an alias for
    layer 0. ``length`` optionally pins the number of real rows ``L``.
    """
    stack, layer = stage
    layer = 0 if layer == "embeddings" else int(layer)
    entries = bank.vectors.get(stack, [])
    if not 0 <= layer < len(entries):
        raise IndexError(f"no prefix for {stack} layer {layer}")
    p = bank.length
    v = entries[layer]
    rows = states.shape[-2]
    batched = states.ndim == 3
    if layer == 0:
        if length is not None and rows != length:
            raise DimensionError(f"{stack} embeddings: expected {length} rows, got {rows}")
        if batched:
            v = ad.broadcast_to(v, (states.shape[0], p, states.shape[-1]))
        return ad.concat([v, states], axis=-2)
    expected = None if length is None else length + p
    if rows <= p or (expected is not None and rows != expected):
        raise DimensionError(f"{stack} layer {layer}: states have {rows} rows, expected {expected or f'more than {p}'}")
    real = states[:, p:, :] if batched else states[p:, :]
    if batched:
        v = ad.broadcast_to(v, (states.shape[0], p, states.shape[-1]))
    return ad.concat([v, real], axis=-2)


# -- parameter selections -----------------------------------------------
def _is_layer_norm(name: str) -> bool:
    return name.endswith(".gamma") or name.endswith(".beta")


def select_bitfit(model: Seq2SeqTransformer, variant: str = "lnweights") -> frozenset[str]:
    """Every non-LN bias plus all LN betas (``lnbias``) or all LN gammas (``lnweights``)."""
    if variant not in ("lnbias", "lnweights"):
        raise MethodSpecError(f"bitfit variant must be lnbias or lnweights, got {variant!r}")
    ln_suffix = ".beta" if variant == "lnbias" else ".gamma"
    mask = set()
    for name in model.params.names():
        if ".adapter." in name or name.startswith("prefix."):
            continue
        if name.endswith(".bias") and not _is_layer_norm(name):
            mask.add(name)
        elif name.endswith(ln_suffix):
            mask.add(name)
    return frozenset(mask)


def select_xattention(model: Seq2SeqTransformer) -> frozenset[str]:
    """Cross-attention projections plus the layer norm feeding each cross-attention block."""
    mask = set()
    for i in range(model.config.dec_layers):
        base = f"decoder.layer{i}"
        mask.update(n for n in model.params.names() if n.startswith(f"{base}.cross_attn."))
        mask.update({f"{base}.ln2.gamma", f"{base}.ln2.beta"})
    return frozenset(mask)


def apply_method(model: Seq2SeqTransformer, method) -> tuple[Seq2SeqTransformer, frozenset[str]]:
    """Instrument ``model`` in place and return it with its trainable mask."""
    if isinstance(method, str):
        method = parse_method(method)
    if model.method is not None:
        raise InstrumentationError(f"model already instrumented with {model.method.spec}")
    params = model.params
    cfg = model.config
    rng = np.random.default_rng([cfg.seed, 7919])
    materialize = getattr(model, "materialized", True)
    params.freeze_all()

    if isinstance(method, FullFT):
        params.unfreeze_all()
    elif isinstance(method, NoFT):
        pass
    elif isinstance(method, Adapter):
        for stack, n in (("encoder", cfg.enc_layers), ("decoder", cfg.dec_layers)):
            for i in range(n):
                layer = f"{stack}.layer{i}"
                module = AdapterModule.initialize(cfg.d_model, method.bottleneck, rng, model.dtype, materialize)
                for suffix, tensor in module.named_tensors().items():
                    params.register(f"{layer}.adapter.{suffix}", tensor, trainable=True)
                model.adapters[layer] = module
    elif isinstance(method, Prefix):
        bank = PrefixBank.initialize(cfg.enc_layers, cfg.dec_layers, method.length, cfg.d_model, rng, model.dtype)
        for name, tensor in bank.named_tensors().items():
            params.register(name, tensor, trainable=True)
        model.prefix = bank
    elif isinstance(method, BitFit):
        for name in select_bitfit(model, method.variant):
            params.set_trainable(name, True)
    elif isinstance(method, XAttention):
        for name in select_xattention(model):
            params.set_trainable(name, True)
    else:
        raise MethodSpecError(f"unknown method {method!r}")

    mask = frozenset(params.trainable_names())
    if not mask and not isinstance(method, NoFT):
        raise InstrumentationError(f"{method.spec} marks no parameters trainable for this configuration")
    model.method = method
    model.trainable_mask = mask
    return model, mask


# -- layer-norm bias redundancy ----------------------------------------
def absorb_ln_bias(W_m, delta_beta) -> np.ndarray:
    """Bias change ``W_m @ delta_beta`` for the linear layer after a layer norm.

    ``W_m`` is [d_out, d]. Adding the result to that layer's bias reproduces an
    update of ``delta_beta`` to the layer norm's beta for every input.
    """
    W = np.asarray(W_m.data if isinstance(W_m, Tensor) else W_m)
    db = np.asarray(delta_beta.data if isinstance(delta_beta, Tensor) else delta_beta)
    if W.ndim != 2 or db.ndim != 1 or W.shape[1] != db.shape[0]:
        raise DimensionError(f"absorb_ln_bias: W_m {W.shape} incompatible with delta_beta {db.shape}")
    return W @ db


def required_bias_shifts(W_m, gamma_old, gamma_new, normalized_rows) -> np.ndarray:
    """Per-input bias change that would mimic replacing ``gamma_old`` by ``gamma_new``.

    Row ``i`` equals ``W_m @ ((gamma_new - gamma_old) * z_i)``. A single bias
    update can stand in for the gamma update only if all rows coincide.
    """
    W = np.asarray(W_m)
    dg = np.asarray(gamma_new) - np.asarray(gamma_old)
    Z = np.atleast_2d(np.asarray(normalized_rows))
    return (Z * dg) @ W.T
