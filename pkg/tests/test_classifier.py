from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from logicloss.autodiff import backward, check_gradient, forward
from logicloss.classifier import (
    argmax_labels, backprop, build_tape, init_params, load_checkpoint, predict_label, predict_proba,
    save_checkpoint, softmax, zero_params,
)

LABELS = ("E", "C", "N")
GOLDEN = Path(__file__).parent / "golden" / "classifier_seed42.tsv"


def test_zero_weights_uniform():
    p = predict_proba(zero_params(LABELS), np.ones(8))
    np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-15)


def test_softmax_closed_form():
    np.testing.assert_allclose(softmax(np.array([np.log(2), 0.0, 0.0])), [0.5, 0.25, 0.25], atol=1e-15)


@pytest.mark.parametrize("probs, label", [
    ((0.5, 0.25, 0.25), "E"), ((1 / 3, 1 / 3, 1 / 3), "E"), ((0.1, 0.6, 0.3), "C"), ((0.2, 0.4, 0.4), "C"),
])
def test_argmax_ties_go_to_first_label(probs, label):
    assert LABELS[int(argmax_labels(np.array(probs)))] == label


def test_predict_label():
    p = zero_params(LABELS)
    p.b2[:] = [0.0, 1.0, 0.5]
    assert predict_label(p, np.zeros(8)) == "C"
    assert predict_label(p, np.zeros((2, 8))) == ["C", "C"]


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        predict_proba(init_params(LABELS), np.zeros(5))


def test_golden_seed_42():
    params = init_params(LABELS, dim=8, hidden=16, seed=42)
    rows = [line.split("\t") for line in GOLDEN.read_text().splitlines()[1:]]
    x = np.array([[float(v) for v in r[0].split()] for r in rows])
    want = np.array([[float(v) for v in r[1].split()] for r in rows])
    np.testing.assert_allclose(predict_proba(params, x), want, rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(logits, shift):
    z = np.array(logits)
    p = softmax(z)
    assert abs(p.sum() - 1) <= 1e-9
    assert np.all((p >= 0) & (p <= 1))
    assert argmax_labels(softmax(z + shift)) == argmax_labels(p)


def test_tape_matches_numpy():
    params = init_params(LABELS, seed=3)
    x = np.random.default_rng(0).normal(size=8)
    tape, outs = build_tape(params)
    feed = {f"x[{j}]": v for j, v in enumerate(x)}
    got = [forward(tape, feed, root=o) for o in outs]
    np.testing.assert_allclose(got, predict_proba(params, x), atol=1e-14)


def test_backprop_matches_tape():
    params = init_params(LABELS, seed=4)
    x = np.random.default_rng(1).normal(size=8)
    tape, outs = build_tape(params)
    root = tape.neg(tape.log(outs[1]))
    forward(tape, {f"x[{j}]": v for j, v in enumerate(x)}, root=root)
    g = backward(tape)
    tape_grad = np.array([g[n] for n in params.names()])
    p = predict_proba(params, x)
    np_grad = backprop(params, x[None], np.array([[0.0, -1 / p[1], 0.0]]))
    np.testing.assert_allclose(np_grad, tape_grad, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_nll_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = init_params(LABELS, seed=seed)
    tape, outs = build_tape(params)
    label = int(rng.integers(3))
    tape.set_root(tape.neg(tape.log(outs[label])))
    res = check_gradient(tape, {f"x[{j}]": v for j, v in enumerate(rng.normal(size=8))}, wrt_inputs=False)
    assert not res.skipped
    assert res.checked == len(params.to_vector())
    assert res.max_rel_error <= 1e-4


def test_shared_parameters_across_calls():
    params = init_params(LABELS, seed=5)
    tape, a = build_tape(params, prefix="u")
    n_params = len(tape.params)
    tape, b = build_tape(params, tape, prefix="v")
    assert len(tape.params) == n_params
    assert a != b


def test_vector_round_trip():
    params = init_params(LABELS, seed=6)
    v = params.to_vector()
    assert np.array_equal(params.with_vector(v).to_vector(), v)
    assert len(params.names()) == len(v)
    with pytest.raises(ValueError):
        params.with_vector(v[:-1])


def test_checkpoint_round_trip(tmp_path):
    params = init_params(LABELS, seed=7)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert loaded.labels == LABELS
    assert np.array_equal(loaded.to_vector(), params.to_vector())
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_text("hello\n")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(bad)
    params = init_params(LABELS)
    save_checkpoint(params, bad)
    bad.write_text(bad.read_text().replace(" v1", " v9", 1))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(bad)
