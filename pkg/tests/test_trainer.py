import math
from dataclasses import replace

import numpy as np
import pytest

from logicloss.classifier import ModelParams, init_params, predict_proba, zero_params
from logicloss.data import Dataset, GenConfig, generate
from logicloss.metrics import global_violation
from logicloss.rules import load_nli_rules
from logicloss.tnorm import TNorm, compile_rules
from logicloss.trainer import (
    AdamState, LossWeights, TrainConfig, TrainingError, adam_step, mix_losses, parse_config, train,
)

LABELS = ("E", "C", "N")
RULES = load_nli_rules()
COMPILED = compile_rules(RULES, TNorm.PRODUCT)
FAST = TrainConfig(stage1_epochs=3, stage2_epochs=3, log_metrics=False)


@pytest.fixture(scope="module")
def bundle():
    return generate(GenConfig(n_train=600, n_dev=100, n_test=100, n_unlabeled=300), seed=11)


# ---------------------------------------------------------------------------
# Adam


def textbook_adam(w, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def test_adam_first_step():
    w, st = adam_step(np.array([0.0]), np.array([1.0]), AdamState.zeros(1), lr=1e-3)
    assert w[0] == pytest.approx(-1e-3, rel=1e-7)
    assert st.t == 1


def test_adam_zero_gradient():
    st = AdamState(np.array([0.5]), np.array([0.25]), 3)
    w, new = adam_step(np.array([2.0]), np.array([0.0]), AdamState(np.zeros(1), np.zeros(1), 3), lr=0.1)
    assert w[0] == 2.0
    w, new = adam_step(np.array([2.0]), np.array([0.0]), st, lr=0.1)
    assert new.m[0] == pytest.approx(0.45) and new.v[0] == pytest.approx(0.25 * 0.999)
    assert st.m[0] == 0.5  # input state untouched


def test_adam_quadratic_matches_reference():
    w, st = np.array([0.0]), AdamState.zeros(1)
    for _ in range(100):
        w, st = adam_step(w, 2 * (w - 3), st, lr=0.1)
    assert abs(w[0] - 3) < 0.5
    assert w[0] == pytest.approx(textbook_adam(0.0, lambda x: 2 * (x - 3), 100, 0.1), abs=1e-12)


def test_adam_shape_check():
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.zeros(2), 0.1)


# ---------------------------------------------------------------------------
# mix_losses


def position_model(probs_by_slot) -> ModelParams:
    """Model whose output for feature vector e_i is probs_by_slot[i]."""
    p = zero_params(LABELS, dim=8, hidden=16)
    for i, probs in enumerate(probs_by_slot):
        p.W1[i, i] = math.atanh(0.5)
        p.W2[:, i] = 2 * np.log(probs)
    return p


def test_single_triple_transitivity_value():
    probs = [[0.9, 0.05, 0.05], [0.9, 0.05, 0.05], [0.05, 0.05, 0.9]]
    model = position_model(probs)
    eye = np.eye(8)
    feats = {(0, 1): eye[[0]], (1, 2): eye[[1]], (0, 2): eye[[2]],
             (1, 0): eye[[3]], (2, 1): eye[[3]], (2, 0): eye[[3]]}
    T = Dataset("triple", np.array([[0, 1, 2]]), feats, {})
    w = LossWeights()
    mixed = mix_losses(model, {"T": T}, COMPILED, w)
    assert mixed.parts["tran"] == pytest.approx(math.log(0.81 / 0.05), abs=1e-9)
    assert mixed.value == pytest.approx(w.lambda_tran * 2.7850, abs=1e-5)


def test_labeled_only_is_cross_entropy(bundle):
    params = init_params(LABELS, seed=1)
    batch = bundle.train.take(np.arange(50))
    mixed = mix_losses(params, {"labeled": batch}, COMPILED, LossWeights())
    p = predict_proba(params, batch.features[(0, 1)])
    ce = -np.log(p[np.arange(50), batch.gold[(0, 1)]]).sum()
    assert mixed.value == pytest.approx(ce, rel=1e-12)
    assert mixed.parts["sym"] == mixed.parts["tran"] == 0.0


def test_zero_weights_leave_annotation_only(bundle):
    params = init_params(LABELS, seed=2)
    batch = {"labeled": bundle.train.take(np.arange(40)), "M": bundle.M.take(np.arange(40)),
             "U": bundle.U.take(np.arange(40)), "T": bundle.T.take(np.arange(40))}
    zero = LossWeights(0.0, 0.0, 0.0)
    full = mix_losses(params, batch, COMPILED, zero)
    ann = mix_losses(params, {"labeled": batch["labeled"]}, COMPILED, zero)
    assert full.value == ann.value
    assert np.array_equal(full.grad, ann.grad)


def test_gradient_is_linear_in_weights(bundle):
    params = init_params(LABELS, seed=3)
    batch = {"labeled": bundle.train.take(np.arange(30)), "M": bundle.M.take(np.arange(30)),
             "U": bundle.U.take(np.arange(30)), "T": bundle.T.take(np.arange(30))}
    w = LossWeights(0.7, 0.05, 0.2)
    total = mix_losses(params, batch, COMPILED, w)
    one = LossWeights(1.0, 1.0, 1.0)
    parts = {g: mix_losses(params, {g: ds}, COMPILED, one) for g, ds in batch.items()}
    expected = sum(w.for_group(g) * parts[g].grad for g in batch)
    np.testing.assert_allclose(total.grad, expected, rtol=0, atol=1e-12)
    assert total.value == pytest.approx(sum(w.for_group(g) * parts[g].value for g in batch), rel=1e-12)


def test_mixed_gradient_matches_finite_differences(bundle):
    params = init_params(LABELS, seed=4)
    batch = {"labeled": bundle.train.take(np.arange(5)), "U": bundle.U.take(np.arange(5)),
             "T": bundle.T.take(np.arange(5))}
    w = LossWeights(1.0, 0.5, 0.5)
    g = mix_losses(params, batch, COMPILED, w).grad
    v = params.to_vector()
    rng = np.random.default_rng(0)
    h = 1e-6
    for i in rng.choice(len(v), 25, replace=False):
        up, dn = v.copy(), v.copy()
        up[i] += h
        dn[i] -= h
        num = (mix_losses(params.with_vector(up), batch, COMPILED, w).value
               - mix_losses(params.with_vector(dn), batch, COMPILED, w).value) / (2 * h)
        assert abs(g[i] - num) / max(1.0, abs(g[i])) < 1e-4


# ---------------------------------------------------------------------------
# train


def test_training_is_deterministic(bundle):
    cfg = FAST.with_constraints("M,U,T")
    a, la = train(cfg, bundle, RULES)
    b, lb = train(cfg, bundle, RULES)
    assert np.array_equal(a.to_vector(), b.to_vector())
    assert la.to_tsv() == lb.to_tsv()


def test_zero_lambdas_equal_baseline(bundle):
    base, lb = train(FAST.with_constraints("none"), bundle, RULES)
    zero = replace(FAST, weights=LossWeights(0.0, 0.0, 0.0)).with_constraints("M,U,T")
    z, lz = train(zero, bundle, RULES)
    assert np.array_equal(base.to_vector(), z.to_vector())
    assert [r.L_ann for r in lb.records] == [r.L_ann for r in lz.records]


def test_log_shape(bundle):
    cfg = replace(FAST, log_metrics=True).with_constraints("M,U,T")
    _, log = train(cfg, bundle, RULES)
    assert [r.epoch for r in log.records] == list(range(1, 7))
    assert [r.stage for r in log.records] == [1, 1, 1, 2, 2, 2]
    assert all(r.L_sym == 0 for r in log.records[:3]) and log.records[-1].L_sym > 0
    assert log.records[-1].dev_accuracy is not None and log.records[-1].tau_S is not None
    lines = log.to_tsv().splitlines()
    assert lines[0].startswith("stage\tepoch\tL_ann") and len(lines) == 7


def test_stage_two_descends(bundle):
    cfg = TrainConfig(stage1_epochs=10, stage2_epochs=10, log_metrics=False).with_constraints("M,U,T")
    _, log = train(cfg, bundle, RULES)
    stage2 = [r.objective for r in log.records if r.stage == 2]
    for prev, nxt in zip(stage2, stage2[1:]):
        assert nxt <= prev * 1.02


def test_training_improves_accuracy(bundle):
    params, _ = train(replace(FAST, stage1_epochs=10, stage2_epochs=0), bundle, RULES)
    assert global_violation(bundle.test, RULES, params).accuracy > 0.6


def test_errors(bundle):
    empty = replace(bundle, train=bundle.train.take(np.arange(0)))
    with pytest.raises(TrainingError, match="labeled"):
        train(FAST, empty, RULES)
    bad = init_params(LABELS)
    bad.W2[0, 0] = np.nan
    with pytest.raises(TrainingError, match="stage 1, epoch 1, batch 0"):
        train(FAST, bundle, RULES, init=bad)
    with pytest.raises(ValueError):
        TrainConfig(stage1_lr=0)
    with pytest.raises(ValueError):
        FAST.with_constraints("M,X")
    with pytest.raises(ValueError):
        LossWeights(lambda_sym=-1)


# ---------------------------------------------------------------------------
# config files


def test_config_round_trip():
    cfg = replace(TrainConfig(seed=5, batch_size=32), weights=LossWeights(0.5, 0.02, None)).with_constraints("M,T")
    back, data = parse_config(cfg.to_ini())
    assert back == cfg and data == {}


def test_config_sections():
    text = "[model]\nhidden = 8\n[constraints]\ndatasets = U\nlambda_tran = 0.5\n[data]\ndir = somewhere\n"
    cfg, data = parse_config(text)
    assert cfg.hidden == 8 and cfg.datasets == ("U",) and cfg.weights.lambda_tran == 0.5
    assert data == {"dir": "somewhere"}
    with pytest.raises(ValueError, match="unknown key"):
        parse_config("[train]\nepochs = 3\n")
    with pytest.raises(ValueError, match="section"):
        parse_config("[optim]\nlr = 1\n")
