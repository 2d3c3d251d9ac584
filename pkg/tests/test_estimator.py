import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from peftlab.data import SyntheticTaskSpec, generate_synthetic
from peftlab.estimator import PeftTranslator, check_pairs, check_text
from peftlab.exceptions import AlignmentError, MethodSpecError
from peftlab.model import build_model, save_checkpoint

SMALL = dict(enc_layers=1, dec_layers=1, d_model=16, heads=2, ffn_dim=32, max_positions=32)


def _pairs(n=60, seed=0):
    c = generate_synthetic(SyntheticTaskSpec(task="copy", s=0, r=0, vocab_size=16, min_len=2, max_len=4, seed=seed), n)
    return [c.source_text(i) for i in range(n)], [c.target_text(i) for i in range(n)]


def test_validation_helpers():
    assert check_text(("a b", "c")) == ["a b", "c"]
    with pytest.raises(TypeError):
        check_text("a b")
    with pytest.raises(ValueError):
        check_text(["a", "  "])
    with pytest.raises(AlignmentError):
        check_pairs(["a"], ["b", "c"])


def test_get_params_and_clone():
    est = PeftTranslator(method="adapter:8", max_lr=2e-3)
    params = est.get_params()
    assert params["method"] == "adapter:8" and params["max_lr"] == 2e-3
    assert clone(est).get_params() == params
    est.set_params(method="prefix:2")
    assert est.method == "prefix:2"


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        PeftTranslator().predict(["a"])


def test_bad_method_rejected_at_fit():
    X, y = _pairs(10)
    with pytest.raises(MethodSpecError):
        PeftTranslator(method="lora:4").fit(X, y)


def test_fit_predict_score_from_scratch():
    X, y = _pairs()
    est = PeftTranslator(method="full", model_config=SMALL, total_steps=30, warmup_steps=5, patience_epochs=2,
                         max_tokens_per_batch=128)
    est.fit(X, y)
    assert est.n_trainable_ == est.model_.params.numel()
    out = est.predict(X[:5])
    assert len(out) == 5 and all(isinstance(s, str) for s in out)
    assert 0.0 <= est.score(X[:5], y[:5]) <= 100.0
    assert est.history_


def test_fit_from_parent_checkpoint(tmp_path):
    from peftlab.data import synthetic_vocabulary
    from peftlab.model import ModelConfig

    vocab = synthetic_vocabulary(16)
    parent = build_model(ModelConfig(vocab_size=16, **SMALL))
    path = save_checkpoint(parent, tmp_path / "p.npz", vocab.tokens)
    X, y = _pairs(30)
    est = PeftTranslator(method="adapter:2", parent=str(path), total_steps=10, warmup_steps=2, patience_epochs=1)
    est.fit(X, y, eval_set=(X[:5], y[:5]))
    frozen = "encoder.layer0.ffn.fc1.weight"
    np.testing.assert_array_equal(est.model_.params[frozen].data, parent.params[frozen].data)
    assert est.model_.method.spec == "adapter:2"
