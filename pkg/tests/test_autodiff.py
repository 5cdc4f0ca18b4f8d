import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from logicloss.autodiff import ARITY, NumericalError, Tape, backward, check_gradient, forward


def test_product_residuum_value():
    t = Tape()
    a, b = t.input("a"), t.input("b")
    t.min(t.const(1.0), t.div(b, a))
    assert forward(t, {"a": 0.8, "b": 0.4}) == pytest.approx(0.5, abs=1e-15)


def test_lukasiewicz_tnorm_value():
    t = Tape()
    a, b = t.input("a"), t.input("b")
    t.max(t.const(0.0), t.sub(t.add(a, b), t.const(1.0)))
    assert forward(t, {"a": 0.7, "b": 0.5}) == pytest.approx(0.2, abs=1e-15)


def test_neg_log_at_one():
    t = Tape()
    t.neg(t.log(t.input("x")))
    assert forward(t, {"x": 1.0}) == 0.0


def test_relu_gradient_active_branch():
    t = Tape()
    a, b = t.param("a", 0.8), t.param("b", 0.4)
    t.relu(t.sub(t.log(a), t.log(b)))
    forward(t, {})
    g = backward(t)
    assert g["a"] == pytest.approx(1.25, rel=1e-14)
    assert g["b"] == pytest.approx(-2.5, rel=1e-14)


def test_neg_log_gradient():
    t = Tape()
    t.neg(t.log(t.param("x", 0.5)))
    forward(t, {})
    assert backward(t)["x"] == pytest.approx(-2.0, rel=1e-14)


def test_linear_graph_exact():
    t = Tape()
    t.mul(t.param("w", 2.0), t.input("x"))
    res = check_gradient(t, {"x": 3.0})
    assert not res.skipped and res.max_rel_error <= 1e-9


def test_symmetry_graph_gradient():
    t = Tape()
    a, b = t.input("a"), t.input("b")
    t.abs(t.sub(t.log(a), t.log(b)))
    res = check_gradient(t, {"a": 0.73, "b": 0.21})
    assert not res.skipped and res.max_rel_error <= 1e-4


def test_kink_is_skipped():
    t = Tape()
    t.relu(t.sub(t.input("a"), t.input("b")))
    assert check_gradient(t, {"a": 0.5, "b": 0.5}).skipped


def test_subgradient_conventions():
    t = Tape()
    x, y = t.param("x", 1.0), t.param("y", 1.0)
    t.sum([t.relu(t.sub(x, y)), t.abs(t.sub(x, y)), t.min(x, y), t.max(x, y)])
    forward(t, {})
    g = backward(t)
    # relu and abs give 0 at the kink; min and max both route to the first child
    assert g["x"] == 2.0 and g["y"] == 0.0


def test_where_routes_to_selected_branch():
    t = Tape()
    a, b = t.param("a", 0.3), t.param("b", 0.6)
    t.where(a, b, t.const(1.0), b)
    assert forward(t, {}) == 1.0
    g = backward(t)
    assert g["a"] == 0.0 and g["b"] == 0.0
    assert forward(t, {}, {"a": 0.7}) == 0.6
    assert backward(t)["b"] == 1.0


def test_errors():
    t = Tape()
    t.log(t.input("x"))
    with pytest.raises(RuntimeError):
        backward(t)
    with pytest.raises(KeyError, match="unbound"):
        forward(t, {})
    with pytest.raises(NumericalError, match="log"):
        forward(t, {"x": -1.0})
    with pytest.raises(ValueError):
        t._add("add", (0,))
    with pytest.raises(ValueError):
        t.param("p")
        t.param("p")


def test_shared_subexpressions():
    t = Tape()
    x = t.input("x")
    assert t.log(x) == t.log(x)
    assert t.input("x") == x
    n = len(t.nodes)
    t.add(t.log(x), t.log(x))
    assert len(t.nodes) == n + 1


def test_batched_values():
    t = Tape()
    t.mul(t.param("w", 2.0), t.log(t.input("x")))
    xs = np.array([1.0, 2.0, 4.0])
    np.testing.assert_allclose(forward(t, {"x": xs}), 2 * np.log(xs))
    g = backward(t)
    np.testing.assert_allclose(g.inputs["x"], 2 / xs)
    np.testing.assert_allclose(g["w"], np.log(xs))


def test_dump_format():
    t = Tape()
    t.mul(t.input("a"), t.const(2.0))
    assert t.dump().splitlines() == ['(n0 input "a")', "(n1 const 2.0)", "(n2 mul n0 n1)", "(root n2)"]


# ---------------------------------------------------------------------------
# random graphs


def random_graph(rng: np.random.Generator, size: int = 20):
    """A random graph of ``size`` nodes over 3 params and 2 inputs in [0.5, 2]."""
    t = Tape()
    params = {f"p{i}": float(rng.uniform(0.5, 2.0)) for i in range(3)}
    inputs = {f"x{i}": float(rng.uniform(0.5, 2.0)) for i in range(2)}
    pool = [t.param(k, v) for k, v in params.items()] + [t.input(k) for k in inputs]
    ops = [op for op, n in ARITY.items() if n in (1, 2)]
    while len(t.nodes) < size:
        op = ops[rng.integers(len(ops))]
        kids = [pool[rng.integers(len(pool))] for _ in range(ARITY[op])]
        if op == "log":
            # keep the argument positive
            kids = [t.add(t.abs(kids[0]), t.const(0.5))]
        elif op == "exp":
            kids = [t.mul(t.const(0.1), kids[0])]
        elif op == "div":
            kids[1] = t.add(t.abs(kids[1]), t.const(0.5))
        pool.append(getattr(t, op)(*kids))
    t.set_root(t.sum(pool[-4:]))
    return t, params, inputs


def test_random_graphs_match_finite_differences():
    checked = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        for _ in range(50):
            t, params, inputs = random_graph(rng)
            try:
                v = forward(t, inputs, params)
            except NumericalError:
                continue
            if abs(v) > 1e4:
                continue
            res = check_gradient(t, inputs, h=1e-6, params=params)
            if not res.skipped:
                break
        else:
            pytest.fail(f"seed {seed}: no kink-free graph found")
        assert res.max_rel_error < 1e-4, seed
        checked += 1
    assert checked == 100


def test_linearity_of_gradients():
    rng = np.random.default_rng(7)
    t, params, inputs = random_graph(rng)
    roots = [t.nodes[-1].id, t.nodes[-3].id]
    grads = []
    for r in roots:
        forward(t, inputs, params, root=r)
        grads.append(backward(t))
    both = t.add(*roots)
    forward(t, inputs, params, root=both)
    g = backward(t)
    for name in params:
        assert g[name] == pytest.approx(grads[0][name] + grads[1][name], abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_is_pure(seed):
    t, params, inputs = random_graph(np.random.default_rng(seed))
    try:
        a = forward(t, inputs, params)
    except NumericalError:
        return
    b = forward(t, inputs, params)
    assert np.array_equal(a, b)


def test_thread_local_buffers():
    t = Tape()
    t.mul(t.input("x"), t.input("x"))
    out = {}

    def work(x):
        forward(t, {"x": x})
        out[x] = backward(t).inputs["x"]

    threads = [threading.Thread(target=work, args=(float(x),)) for x in range(1, 9)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert out == {float(x): 2.0 * x for x in range(1, 9)}
