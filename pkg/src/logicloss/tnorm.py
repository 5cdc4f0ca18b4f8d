"""Lowering of consistency rules to soft truth values and differentiable losses.

Connectives follow the usual three t-norm families:

=============  ==========  ==============  ==================
               product     Goedel          Lukasiewicz
=============  ==========  ==============  ==================
not a          1 - a       1 - a           1 - a
a and b        ab          min(a, b)       max(0, a + b - 1)
a or b         a + b - ab  max(a, b)       min(1, a + b)
a implies b    min(1, b/a) 1 if b >= a     min(1, 1 - a + b)
                           else b
=============  ==========  ==============  ==================

Product losses are emitted directly in negative-log space: a conjunction becomes a
sum, ``a -> b`` becomes ``relu(log a - log b)`` and ``true -> r`` becomes
``-log r``. The other two families use ``-log(clamp(truth))``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Tape
from .logic import (
    GOLD, And, Formula, Iff, Implies, Not, Or, Pred, Rule, RuleSet, Top,
    desugar, predicates,
)

EPS = 1e-7
# slot bounds; the lower one is 1 - (1 - EPS) so that 1 - p maps the interval onto itself exactly
P_MAX = 1.0 - EPS
P_MIN = 1.0 - P_MAX


class TNorm(enum.Enum):
    PRODUCT = "product"
    GOEDEL = "goedel"
    LUKASIEWICZ = "lukasiewicz"

    @classmethod
    def parse(cls, name: str) -> "TNorm":
        aliases = {"godel": "goedel", "gödel": "goedel", "łukasiewicz": "lukasiewicz"}
        key = name.strip().lower()
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown t-norm {name!r}; choose from product, goedel, lukasiewicz") from None


@dataclass(frozen=True)
class SoftSlot:
    """A model probability standing in for a Boolean predicate."""

    args: tuple[str, ...]
    label: str

    @property
    def name(self) -> str:
        sym = "y*" if self.label == GOLD else self.label.lower()
        return f"{sym}({','.join(self.args)})"


def clamp_prob(p):
    return np.clip(p, P_MIN, P_MAX)


class _Lowering:
    def __init__(self, tape: Tape, tnorm: TNorm, slot: Callable[[SoftSlot], int], fuse_abs: bool = True):
        self.t, self.tnorm, self.slot, self.fuse_abs = tape, tnorm, slot, fuse_abs

    def truth(self, f: Formula) -> int:
        t = self.t
        if isinstance(f, Top):
            return t.const(1.0)
        if isinstance(f, Pred):
            return self.slot(SoftSlot(f.args, f.label))
        if isinstance(f, Not):
            return t.sub(t.const(1.0), self.truth(f.arg))
        if isinstance(f, Iff):
            raise ValueError("biconditional must be desugared before softening")
        a, b = self.truth(f.left), self.truth(f.right)
        one, zero = t.const(1.0), t.const(0.0)
        kind = self.tnorm
        if isinstance(f, And):
            if kind is TNorm.PRODUCT:
                return t.mul(a, b)
            if kind is TNorm.GOEDEL:
                return t.min(a, b)
            return t.max(zero, t.sub(t.add(a, b), one))
        if isinstance(f, Or):
            if kind is TNorm.PRODUCT:
                return t.sub(t.add(a, b), t.mul(a, b))
            if kind is TNorm.GOEDEL:
                return t.max(a, b)
            return t.min(one, t.add(a, b))
        if isinstance(f, Implies):
            if kind is TNorm.PRODUCT:
                return t.min(one, t.div(b, a))
            if kind is TNorm.GOEDEL:
                return t.where(a, b, one, b)
            return t.min(one, t.add(t.sub(one, a), b))
        raise TypeError(f"not a formula: {f!r}")

    def clamped(self, node: int) -> int:
        t = self.t
        return t.max(t.const(EPS), t.min(t.const(1.0), node))

    # product, negative-log space
    def log_truth(self, f: Formula) -> int | None:
        """log of the product truth value; None stands for log 1 = 0."""
        t = self.t
        if isinstance(f, Top):
            return None
        if isinstance(f, Pred):
            return t.log(self.slot(SoftSlot(f.args, f.label)))
        if isinstance(f, Not) and isinstance(f.arg, Pred):
            # slot clamping keeps 1 - p >= P_MIN
            return t.log(self.truth(f))
        if isinstance(f, And):
            a, b = self.log_truth(f.left), self.log_truth(f.right)
            if a is None or b is None:
                return b if a is None else a
            return t.add(a, b)
        if isinstance(f, Implies):
            return t.neg(self.implication_loss(f.left, f.right))
        return t.log(t.max(t.const(EPS), self.truth(f)))

    def implication_loss(self, left: Formula, right: Formula) -> int:
        t = self.t
        lr = self.log_truth(right)
        if lr is None:
            return t.const(0.0)
        ll = self.log_truth(left)
        if ll is None:
            return t.neg(lr)
        return t.relu(t.sub(ll, lr))

    def product_loss(self, f: Formula) -> int:
        t = self.t
        if isinstance(f, And):
            if self.fuse_abs and _mirrored(f):
                return t.abs(t.sub(self.log_truth(f.left.left), self.log_truth(f.left.right)))
            return t.add(self.product_loss(f.left), self.product_loss(f.right))
        if isinstance(f, Implies):
            return self.implication_loss(f.left, f.right)
        if isinstance(f, Top):
            return t.const(0.0)
        return t.neg(self.log_truth(f))

    def loss(self, f: Formula) -> int:
        if self.tnorm is TNorm.PRODUCT:
            return self.product_loss(f)
        return self.t.neg(self.t.log(self.clamped(self.truth(f))))


def _mirrored(f: And) -> bool:
    """``(A -> B) & (B -> A)`` with neither side trivially true."""
    l, r = f.left, f.right
    return (
        isinstance(l, Implies) and isinstance(r, Implies)
        and l.left == r.right and l.right == r.left
        and not isinstance(l.left, Top) and not isinstance(l.right, Top)
    )


def _slot_tape(tape: Tape, order: list[SoftSlot]) -> Callable[[SoftSlot], int]:
    def slot(s: SoftSlot) -> int:
        if s not in order:
            order.append(s)
        return tape.input(s.name)
    return slot


def soften(f: Formula, tnorm: TNorm, tape: Tape | None = None,
           slot: Callable[[SoftSlot], int] | None = None) -> tuple[Tape, int]:
    """Soft truth of a desugared formula as a tape whose inputs are slot probabilities."""
    tape = tape or Tape()
    slot = slot or _slot_tape(tape, [])
    root = _Lowering(tape, tnorm, slot).truth(f)
    tape.set_root(root)
    return tape, root


def to_loss(f: Formula, tnorm: TNorm, tape: Tape | None = None,
            slot: Callable[[SoftSlot], int] | None = None, fuse_abs: bool = True) -> tuple[Tape, int]:
    """Nonnegative loss of a desugared formula; zero exactly when its soft truth is 1.

    With ``fuse_abs`` the product pair ``relu(u) + relu(-u)`` arising from a
    biconditional is emitted as ``abs(u)``.
    """
    tape = tape or Tape()
    slot = slot or _slot_tape(tape, [])
    root = _Lowering(tape, tnorm, slot, fuse_abs).loss(f)
    tape.set_root(root)
    return tape, root


@dataclass
class CompiledLoss:
    rule: Rule
    tnorm: TNorm
    labels: tuple[str, ...]
    truth_graph: Tape
    loss_graph: Tape
    slots: list[SoftSlot] = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.rule.name

    @cached_property
    def arg_tuples(self) -> list[tuple[str, ...]]:
        seen: dict[tuple[str, ...], None] = {}
        for s in self.slots:
            seen.setdefault(s.args, None)
        return list(seen)

    @property
    def needs_gold(self) -> bool:
        return any(s.label == GOLD for s in self.slots)

    def emit(self, tape: Tape, slot: Callable[[SoftSlot], int], fuse_abs: bool = True) -> int:
        """Re-lower the rule onto another tape, e.g. on top of classifier nodes."""
        return _Lowering(tape, self.tnorm, slot, fuse_abs).loss(desugar(self.rule.body))

    def bind(self, probs: Mapping[tuple[str, ...], np.ndarray],
             gold: Mapping[tuple[str, ...], np.ndarray] | None = None) -> dict[str, np.ndarray]:
        """Slot inputs from probability arrays of shape ``(..., n_labels)``, clamped."""
        inputs = {}
        for s in self.slots:
            p = np.asarray(probs[s.args], dtype=float)
            if s.label == GOLD:
                if gold is None:
                    raise ValueError(f"rule {self.name!r} needs gold labels")
                idx = np.asarray(gold[s.args])
                if np.any(idx < 0):
                    raise ValueError(f"rule {self.name!r} applied to unlabeled collections")
                v = np.take_along_axis(p, idx[..., None], axis=-1)[..., 0]
            else:
                v = p[..., self.labels.index(s.label)]
            inputs[s.name] = clamp_prob(v)
        return inputs

    def prob_gradients(self, slot_grads: Mapping[str, np.ndarray], probs, gold=None) -> dict:
        """Route slot adjoints back to the probability arrays they were read from."""
        out: dict[tuple[str, ...], np.ndarray] = {}
        for s in self.slots:
            p = np.asarray(probs[s.args], dtype=float)
            g = out.setdefault(s.args, np.zeros_like(p))
            if s.label == GOLD:
                idx = np.asarray(gold[s.args])
                v = np.take_along_axis(p, idx[..., None], axis=-1)[..., 0]
                mask = (v > P_MIN) & (v < P_MAX)
                onehot = np.eye(len(self.labels))[idx]
                g += onehot * (slot_grads[s.name] * mask)[..., None]
            else:
                k = self.labels.index(s.label)
                mask = (p[..., k] > P_MIN) & (p[..., k] < P_MAX)
                g[..., k] += slot_grads[s.name] * mask
        return out

    def loss(self, probs, gold=None):
        return self.loss_graph.forward(self.bind(probs, gold))

    def truth(self, probs, gold=None):
        return self.truth_graph.forward(self.bind(probs, gold))

    def render(self) -> str:
        return f"L_{self.name} = {render(self.loss_graph, self.loss_graph.root)}"

    def dump(self) -> str:
        return self.loss_graph.dump()


def compile_rule(rule: Rule, tnorm: TNorm, labels: Sequence[str], fuse_abs: bool = True) -> CompiledLoss:
    body = desugar(rule.body)
    order: list[SoftSlot] = []
    # slots in first-appearance order of the rule text
    for p in predicates(body):
        s = SoftSlot(p.args, p.label)
        if s not in order:
            order.append(s)
    truth_tape, _ = soften(body, tnorm)
    loss_tape, _ = to_loss(body, tnorm, fuse_abs=fuse_abs)
    return CompiledLoss(rule, tnorm, tuple(labels), truth_tape, loss_tape, order)


def compile_rules(rs: RuleSet, tnorm: TNorm, labels: Sequence[str] | None = None,
                  fuse_abs: bool = True) -> list[CompiledLoss]:
    """One :class:`CompiledLoss` per rule, in file order."""
    if labels is not None and tuple(labels) != tuple(rs.labels):
        raise ValueError(f"rule labels {rs.labels} do not match model labels {tuple(labels)}")
    return [compile_rule(r, tnorm, rs.labels, fuse_abs) for r in rs.rules]


# ---------------------------------------------------------------------------
# algebraic rendering

_ATOMIC = {"input", "const", "relu", "abs", "min", "max", "log", "exp"}


def render(tape: Tape, nid: int) -> str:
    n = tape.nodes[nid]
    ch = n.children
    r = lambda i: render(tape, ch[i])  # noqa: E731
    op = n.op
    if op == "const":
        return f"{n.value:g}"
    if op in ("input", "param"):
        return n.name
    if op == "max" and _is_eps(tape, ch[0]):
        inner = tape.nodes[ch[1]]
        if inner.op == "min" and _is_const(tape, inner.children[0], 1.0):
            return f"clamp({render(tape, inner.children[1])})"
        return f"clamp({r(1)})"
    if op == "log":
        arg = tape.nodes[ch[0]]
        return f"log {r(0)}" if arg.op == "input" else f"log({r(0)})"
    if op == "exp":
        return f"exp({r(0)})"
    if op == "neg":
        return f"-{_paren(tape, ch[0])}"
    if op == "relu":
        return f"ReLU({r(0)})"
    if op == "abs":
        return f"|{r(0)}|"
    if op == "add":
        return f"{r(0)} + {r(1)}"
    if op == "sub":
        return f"{r(0)} - {_paren(tape, ch[1])}"
    if op == "mul":
        return f"{_paren(tape, ch[0])}*{_paren(tape, ch[1])}"
    if op == "div":
        return f"{_paren(tape, ch[0])}/{_paren(tape, ch[1])}"
    if op in ("min", "max"):
        return f"{op}({r(0)}, {r(1)})"
    if op == "where":
        return f"({render(tape, ch[2])} if {r(0)} <= {r(1)} else {render(tape, ch[3])})"
    raise ValueError(op)


def _paren(tape: Tape, nid: int) -> str:
    s = render(tape, nid)
    return s if tape.nodes[nid].op in _ATOMIC else f"({s})"


def _is_const(tape: Tape, nid: int, value: float) -> bool:
    n = tape.nodes[nid]
    return n.op == "const" and n.value == value


def _is_eps(tape: Tape, nid: int) -> bool:
    return _is_const(tape, nid, EPS)


# ---------------------------------------------------------------------------


def _nli_transitivity() -> CompiledLoss:
    from .rules import load_nli_rules
    rs = load_nli_rules()
    return compile_rule(rs.rule("tran"), TNorm.PRODUCT, rs.labels)


def eval_transitivity_example(p_ph: Sequence[float], p_hz: Sequence[float], p_pz: Sequence[float]) -> float:
    """Product transitivity loss for one sentence triple.

    Each argument is an (entailment, contradiction, neutral) probability vector for
    the pairs (P,H), (H,Z) and (P,Z) respectively.
    """
    vecs = []
    for name, v in (("(P,H)", p_ph), ("(H,Z)", p_hz), ("(P,Z)", p_pz)):
        a = np.asarray(v, dtype=float)
        if a.shape != (3,) or np.any(a < 0) or np.any(a > 1) or abs(a.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} is not a 3-way probability vector: {v!r}")
        vecs.append(a)
    compiled = _nli_transitivity()
    probs = {("P", "H"): vecs[0], ("H", "Z"): vecs[1], ("P", "Z"): vecs[2]}
    return float(compiled.loss(probs))
