"""Scalar expression graphs with forward evaluation and reverse-mode gradients.

A :class:`Tape` is built once and then evaluated many times. Node values may be
Python floats or equal-shaped numpy arrays; arrays evaluate the same scalar graph
element-wise over a batch, which is how compiled losses run over a dataset.

Subgradients: ``relu'(0) = 0``, ``abs'(0) = 0``, ``min``/``max`` send the whole
adjoint to the attaining child (the first child on ties). ``where(a, b, x, y)``
selects ``x`` when ``a <= b`` and ``y`` otherwise; nothing flows into ``a``/``b``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

ARITY = {
    "const": 0, "param": 0, "input": 0,
    "neg": 1, "log": 1, "exp": 1, "relu": 1, "abs": 1,
    "add": 2, "sub": 2, "mul": 2, "div": 2, "min": 2, "max": 2,
    "where": 4,
}
KINKED = frozenset({"relu", "abs", "min", "max", "where"})


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    children: tuple[int, ...] = ()
    value: float | None = None  # const value or param default
    name: str | None = None  # param/input name


@dataclass
class Gradient:
    params: dict[str, float | np.ndarray]
    inputs: dict[str, float | np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.params[name]


class Tape:
    """Append-only node list; construction order is a topological order.

    Structurally identical nodes are shared, so a subexpression such as
    ``log c(P,H)`` appears once however many times a loss mentions it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}
        self.inputs: dict[str, int] = {}
        self.root: int | None = None
        self._memo: dict[tuple, int] = {}
        self._reach: dict[int, tuple[int, list[int]]] = {}
        self._local = threading.local()

    # -- construction -----------------------------------------------------
    def _add(self, op: str, children: tuple[int, ...] = (), value=None, name=None) -> int:
        if len(children) != ARITY[op]:
            raise ValueError(f"{op} takes {ARITY[op]} children, got {len(children)}")
        for c in children:
            if not 0 <= c < len(self.nodes):
                raise ValueError(f"unknown child node {c}")
        key = (op, children, value, name)
        if op != "param" and key in self._memo:
            return self._memo[key]
        nid = len(self.nodes)
        self.nodes.append(Node(nid, op, children, value, name))
        self._memo[key] = nid
        self.root = nid
        return nid

    def const(self, v: float) -> int:
        return self._add("const", value=float(v))

    def param(self, name: str, value: float = 0.0) -> int:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        nid = self._add("param", value=float(value), name=name)
        self.params[name] = nid
        return nid

    def input(self, name: str) -> int:
        if name in self.inputs:
            return self.inputs[name]
        nid = self._add("input", name=name)
        self.inputs[name] = nid
        return nid

    def neg(self, a): return self._add("neg", (a,))
    def log(self, a): return self._add("log", (a,))
    def exp(self, a): return self._add("exp", (a,))
    def relu(self, a): return self._add("relu", (a,))
    def abs(self, a): return self._add("abs", (a,))
    def add(self, a, b): return self._add("add", (a, b))
    def sub(self, a, b): return self._add("sub", (a, b))
    def mul(self, a, b): return self._add("mul", (a, b))
    def div(self, a, b): return self._add("div", (a, b))
    def min(self, a, b): return self._add("min", (a, b))
    def max(self, a, b): return self._add("max", (a, b))

    def where(self, a, b, x, y):
        return self._add("where", (a, b, x, y))

    def sum(self, nodes: Iterable[int]) -> int:
        nodes = list(nodes)
        if not nodes:
            return self.const(0.0)
        acc = nodes[0]
        for n in nodes[1:]:
            acc = self.add(acc, n)
        return acc

    def reachable(self, root: int) -> list[int]:
        """Ids of ``root`` and its descendants, ascending (hence topological)."""
        cached = self._reach.get(root)
        if cached is None or cached[0] != len(self.nodes):
            seen = {root}
            stack = [root]
            while stack:
                for c in self.nodes[stack.pop()].children:
                    if c not in seen:
                        seen.add(c)
                        stack.append(c)
            cached = (len(self.nodes), sorted(seen))
            self._reach[root] = cached
        return cached[1]

    def set_root(self, nid: int) -> int:
        self.root = nid
        return nid

    # -- evaluation ---------------------------------------------------------
    @property
    def values(self) -> list | None:
        return getattr(self._local, "values", None)

    def forward(self, inputs: Mapping[str, float | np.ndarray] | None = None,
                params: Mapping[str, float | np.ndarray] | None = None, root: int | None = None):
        return forward(self, inputs or {}, params, root)

    def backward(self, root: int | None = None) -> Gradient:
        return backward(self, root)

    def dump(self) -> str:
        return dump(self)


def _path(tape: Tape, nid: int) -> str:
    """Readable chain from ``nid`` down through its first children to a leaf."""
    parts = []
    while True:
        n = tape.nodes[nid]
        label = n.op if n.name is None else f"{n.op}:{n.name}"
        parts.append(f"n{nid}({label})")
        if not n.children:
            return " <- ".join(parts)
        nid = n.children[0]


def forward(tape: Tape, inputs: Mapping[str, float | np.ndarray],
            params: Mapping[str, float | np.ndarray] | None = None, root: int | None = None):
    """Evaluate ``root`` (default: the tape root); caches values for :func:`backward`."""
    root = tape.root if root is None else root
    if root is None:
        raise ValueError("empty tape")
    reach = tape.reachable(root)
    missing = [name for name, nid in tape.inputs.items() if name not in inputs and nid in reach]
    if missing:
        raise KeyError(f"unbound input(s): {', '.join(missing)}")
    params = params or {}
    vals: list = [None] * len(tape.nodes)
    with np.errstate(all="ignore"):
        for nid in reach:
            n = tape.nodes[nid]
            op, ch = n.op, n.children
            if op == "const":
                v = n.value
            elif op == "param":
                v = params.get(n.name, n.value)
            elif op == "input":
                v = inputs[n.name]
            elif op == "neg":
                v = -vals[ch[0]]
            elif op == "log":
                v = np.log(vals[ch[0]])
            elif op == "exp":
                v = np.exp(vals[ch[0]])
            elif op == "relu":
                v = np.maximum(vals[ch[0]], 0.0)
            elif op == "abs":
                v = np.abs(vals[ch[0]])
            elif op == "add":
                v = vals[ch[0]] + vals[ch[1]]
            elif op == "sub":
                v = vals[ch[0]] - vals[ch[1]]
            elif op == "mul":
                v = vals[ch[0]] * vals[ch[1]]
            elif op == "div":
                v = vals[ch[0]] / vals[ch[1]]
            elif op == "min":
                a, b = vals[ch[0]], vals[ch[1]]
                v = np.where(a <= b, a, b)
            elif op == "max":
                a, b = vals[ch[0]], vals[ch[1]]
                v = np.where(a >= b, a, b)
            elif op == "where":
                v = np.where(vals[ch[0]] <= vals[ch[1]], vals[ch[2]], vals[ch[3]])
            else:  # pragma: no cover
                raise ValueError(f"unknown op {op}")
            if isinstance(v, np.ndarray) and v.ndim == 0:
                v = float(v)
            if not np.all(np.isfinite(v)):
                raise NumericalError(f"non-finite value at {_path(tape, n.id)}")
            vals[n.id] = v
    tape._local.values = vals
    tape._local.root = root
    return vals[root]


def backward(tape: Tape, root: int | None = None) -> Gradient:
    """Adjoints of the last forward root w.r.t. every parameter and input."""
    vals = tape.values
    if vals is None:
        raise RuntimeError("backward called before forward")
    root = tape._local.root if root is None else root
    if vals[root] is None:
        raise RuntimeError(f"node {root} was not evaluated by the last forward pass")
    adj: list = [0.0] * len(tape.nodes)
    adj[root] = np.ones_like(vals[root]) if isinstance(vals[root], np.ndarray) else 1.0
    for nid in reversed(tape.reachable(root)):
        n = tape.nodes[nid]
        g = adj[nid]
        if n.op in ("const", "param", "input") or (np.isscalar(g) and g == 0.0):
            continue
        ch = n.children
        x = [vals[c] for c in ch]
        op = n.op
        if op == "neg":
            adj[ch[0]] = adj[ch[0]] - g
        elif op == "log":
            adj[ch[0]] = adj[ch[0]] + g / x[0]
        elif op == "exp":
            adj[ch[0]] = adj[ch[0]] + g * vals[n.id]
        elif op == "relu":
            adj[ch[0]] = adj[ch[0]] + g * (x[0] > 0)
        elif op == "abs":
            adj[ch[0]] = adj[ch[0]] + g * np.sign(x[0])
        elif op == "add":
            adj[ch[0]] = adj[ch[0]] + g
            adj[ch[1]] = adj[ch[1]] + g
        elif op == "sub":
            adj[ch[0]] = adj[ch[0]] + g
            adj[ch[1]] = adj[ch[1]] - g
        elif op == "mul":
            adj[ch[0]] = adj[ch[0]] + g * x[1]
            adj[ch[1]] = adj[ch[1]] + g * x[0]
        elif op == "div":
            adj[ch[0]] = adj[ch[0]] + g / x[1]
            adj[ch[1]] = adj[ch[1]] - g * x[0] / (x[1] * x[1])
        elif op in ("min", "max"):
            first = x[0] <= x[1] if op == "min" else x[0] >= x[1]
            adj[ch[0]] = adj[ch[0]] + g * first
            adj[ch[1]] = adj[ch[1]] + g * np.logical_not(first)
        elif op == "where":
            take = x[0] <= x[1]
            adj[ch[2]] = adj[ch[2]] + g * take
            adj[ch[3]] = adj[ch[3]] + g * np.logical_not(take)
    grads = {name: _finite(adj[nid], name) for name, nid in tape.params.items()}
    ins = {name: adj[nid] for name, nid in tape.inputs.items()}
    return Gradient(grads, ins)


def _finite(v, name):
    if not np.all(np.isfinite(v)):
        raise NumericalError(f"non-finite gradient for parameter {name!r}")
    return float(v) if isinstance(v, np.ndarray) and v.ndim == 0 else v


@dataclass
class GradCheck:
    max_rel_error: float
    skipped: bool = False
    checked: int = 0


def near_kink(tape: Tape, margin: float) -> bool:
    """True if the last forward pass put any kinked op within ``margin`` of its switch point."""
    vals = tape.values
    for nid in tape.reachable(tape._local.root):
        n = tape.nodes[nid]
        if n.op not in KINKED:
            continue
        if n.op in ("relu", "abs"):
            gap = np.abs(vals[n.children[0]])
        else:
            gap = np.abs(vals[n.children[0]] - vals[n.children[1]])
        if np.any(gap < margin):
            return True
    return False


def check_gradient(tape: Tape, inputs: Mapping[str, float], h: float = 1e-6,
                   params: Mapping[str, float] | None = None, wrt_inputs: bool = True) -> GradCheck:
    """Compare reverse-mode adjoints with central differences.

    Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``. Points
    within ``10 h`` of a kink are not checked and come back with ``skipped=True``.
    """
    params = {name: tape.nodes[nid].value for name, nid in tape.params.items()} | dict(params or {})
    inputs = dict(inputs)
    forward(tape, inputs, params)
    if near_kink(tape, 10 * h):
        return GradCheck(0.0, skipped=True)
    grad = backward(tape)
    worst, count = 0.0, 0

    def central(bump):
        return (bump(+h) - bump(-h)) / (2 * h)

    for name in tape.params:
        def bump(d, name=name):
            return forward(tape, inputs, params | {name: params[name] + d})
        worst = max(worst, _rel(grad.params[name], central(bump)))
        count += 1
    if wrt_inputs:
        for name in tape.inputs:
            def bump(d, name=name):
                return forward(tape, inputs | {name: inputs[name] + d}, params)
            worst = max(worst, _rel(grad.inputs[name], central(bump)))
            count += 1
    forward(tape, inputs, params)
    return GradCheck(worst, False, count)


def _rel(analytic, numeric):
    return float(abs(analytic - numeric) / max(1.0, abs(analytic)))


def dump(tape: Tape) -> str:
    """One s-expression per node: ``(n<id> <op> <children or payload>)``."""
    lines = []
    for n in tape.nodes:
        if n.op == "const":
            body = repr(n.value)
        elif n.op in ("param", "input"):
            body = f'"{n.name}"'
        else:
            body = " ".join(f"n{c}" for c in n.children)
        lines.append(f"(n{n.id} {n.op} {body})")
    if tape.root is not None:
        lines.append(f"(root n{tape.root})")
    return "\n".join(lines)
