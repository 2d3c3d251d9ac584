"""Desk-scale laboratory for parameter-efficient fine-tuning of encoder-decoder transformers."""

from .autodiff import Tensor, grad_check, no_grad, set_default_dtype
from .budget import BudgetReport, count_total, count_trainable, equalize, solve_budget
from .data import ParallelCorpus, SyntheticTaskSpec, Vocabulary, batch_by_tokens, generate_synthetic, load_parallel, subset
from .estimator import PeftTranslator
from .experiments import ExperimentResult, ExperimentSpec, run_experiment
from .metrics import bleu, chrf, pearson_r, relative_performance
from .model import DESK_SCALE, PAPER_SCALE, ModelConfig, build_model, greedy_decode, load_checkpoint, save_checkpoint
from .peft import (Adapter, BitFit, FullFT, NoFT, Prefix, XAttention, absorb_ln_bias, adapter_forward, apply_method,
                   parse_method, prefix_inject, select_bitfit, select_xattention)
from .train import TrainConfig, lr_at, perplexity, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "grad_check", "no_grad", "set_default_dtype",
    "BudgetReport", "count_total", "count_trainable", "equalize", "solve_budget",
    "ParallelCorpus", "SyntheticTaskSpec", "Vocabulary", "batch_by_tokens", "generate_synthetic", "load_parallel",
    "subset", "PeftTranslator", "ExperimentResult", "ExperimentSpec", "run_experiment",
    "bleu", "chrf", "pearson_r", "relative_performance",
    "DESK_SCALE", "PAPER_SCALE", "ModelConfig", "build_model", "greedy_decode", "load_checkpoint", "save_checkpoint",
    "Adapter", "BitFit", "FullFT", "NoFT", "Prefix", "XAttention", "absorb_ln_bias", "adapter_forward",
    "apply_method", "parse_method", "prefix_inject", "select_bitfit", "select_xattention",
    "TrainConfig", "lr_at", "perplexity", "train",
]
