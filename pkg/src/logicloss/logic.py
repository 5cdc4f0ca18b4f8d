"""Consistency rules over label predictions: AST, rule-file parser, Boolean semantics.

A rule file looks like::

    # NLI consistency rules
    labels: E, C, N
    rule sym over (P,H): C(P,H) <-> C(H,P)

Operators, tightest first: ``!``, ``&``, ``|``, ``->`` (right-assoc), ``<->``.
The reserved predicate ``gold`` stands for the annotated label of its argument
tuple, so ``true -> gold(P,H)`` is the annotation constraint.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence, Union

import numpy as np

GOLD = "gold"
KEYWORDS = frozenset({"rule", "over", "true", "labels", "arity", GOLD})


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Top:
    pass


@dataclass(frozen=True)
class Pred:
    label: str
    args: tuple[str, ...]


@dataclass(frozen=True)
class Not:
    arg: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Implies:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Iff:
    left: "Formula"
    right: "Formula"


Formula = Union[Top, Pred, Not, And, Or, Implies, Iff]
TOP = Top()


@dataclass(frozen=True)
class Rule:
    name: str
    vars: tuple[str, ...]
    body: Formula

    @property
    def arity(self) -> int:
        return len(self.vars)

    def clauses(self) -> list[tuple[Formula, Formula]]:
        """The (antecedent, consequent) pairs this rule conjoins, after desugaring."""
        return implication_clauses(desugar(self.body))

    @property
    def needs_gold(self) -> bool:
        return any(p.label == GOLD for p in predicates(self.body))


@dataclass(frozen=True)
class RuleSet:
    labels: tuple[str, ...]
    rules: tuple[Rule, ...] = ()
    pred_arity: int | None = None

    def __post_init__(self):
        if not self.labels:
            raise ValueError("label set must be nonempty")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"duplicate labels in {self.labels}")
        names = [r.name for r in self.rules]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate rule names in {names}")

    def rule(self, name: str) -> Rule:
        for r in self.rules:
            if r.name == name:
                return r
        raise KeyError(name)

    def by_arity(self, arity: int) -> list[Rule]:
        return [r for r in self.rules if r.arity == arity]


class RuleSyntaxError(ValueError):
    def __init__(self, message: str, line: int = 0, col: int = 0, expected: Sequence[str] = ()):
        self.line, self.col, self.expected = line, col, tuple(expected)
        where = f"{line}:{col}: " if line else ""
        hint = f" (expected {', '.join(self.expected)})" if self.expected else ""
        super().__init__(f"{where}{message}{hint}")


# ---------------------------------------------------------------------------
# traversal helpers


def predicates(f: Formula) -> Iterator[Pred]:
    """Pred leaves in left-to-right order (duplicates included)."""
    if isinstance(f, Pred):
        yield f
    elif isinstance(f, Not):
        yield from predicates(f.arg)
    elif isinstance(f, (And, Or, Implies, Iff)):
        yield from predicates(f.left)
        yield from predicates(f.right)


def arg_tuples(f: Formula) -> list[tuple[str, ...]]:
    """Distinct predicate argument tuples, first-appearance order."""
    seen: dict[tuple[str, ...], None] = {}
    for p in predicates(f):
        seen.setdefault(p.args, None)
    return list(seen)


def desugar(f: Formula) -> Formula:
    """Rewrite every ``A <-> B`` as ``(A -> B) & (B -> A)``."""
    if isinstance(f, Iff):
        a, b = desugar(f.left), desugar(f.right)
        return And(Implies(a, b), Implies(b, a))
    if isinstance(f, Not):
        return Not(desugar(f.arg))
    if isinstance(f, (And, Or, Implies)):
        return type(f)(desugar(f.left), desugar(f.right))
    return f


def implication_clauses(f: Formula) -> list[tuple[Formula, Formula]]:
    if isinstance(f, And):
        return implication_clauses(f.left) + implication_clauses(f.right)
    if isinstance(f, Implies):
        return [(f.left, f.right)]
    raise ValueError(f"not a conjunction of implications: {to_text(f)}")


def is_rule_form(f: Formula) -> bool:
    """Top level must be an implication, a biconditional, or a conjunction of those."""
    if isinstance(f, (Implies, Iff)):
        return True
    if isinstance(f, And):
        return is_rule_form(f.left) and is_rule_form(f.right)
    return False


# ---------------------------------------------------------------------------
# Boolean semantics

Assignment = Mapping[tuple[str, ...], str]


def eval_boolean(f: Formula, assignment: Assignment, gold: Assignment | None = None) -> bool:
    """Two-valued truth of ``f``; ``Pred(l, args)`` holds iff ``assignment[args] == l``."""
    if isinstance(f, Top):
        return True
    if isinstance(f, Pred):
        try:
            predicted = assignment[f.args]
        except KeyError:
            raise KeyError(f"no prediction for {f.args}") from None
        if f.label == GOLD:
            if gold is None or f.args not in gold:
                raise KeyError(f"no gold label for {f.args}")
            return predicted == gold[f.args]
        return predicted == f.label
    if isinstance(f, Not):
        return not eval_boolean(f.arg, assignment, gold)
    if isinstance(f, And):
        return eval_boolean(f.left, assignment, gold) and eval_boolean(f.right, assignment, gold)
    if isinstance(f, Or):
        return eval_boolean(f.left, assignment, gold) or eval_boolean(f.right, assignment, gold)
    if isinstance(f, Implies):
        return (not eval_boolean(f.left, assignment, gold)) or eval_boolean(f.right, assignment, gold)
    if isinstance(f, Iff):
        return eval_boolean(f.left, assignment, gold) == eval_boolean(f.right, assignment, gold)
    raise TypeError(f"not a formula: {f!r}")


def eval_boolean_batch(
    f: Formula,
    predicted: Mapping[tuple[str, ...], np.ndarray],
    labels: Sequence[str],
    gold: Mapping[tuple[str, ...], np.ndarray] | None = None,
) -> np.ndarray:
    """Vectorised :func:`eval_boolean` over label-index arrays of equal length."""
    if isinstance(f, Top):
        n = len(next(iter(predicted.values()))) if predicted else 1
        return np.ones(n, dtype=bool)
    if isinstance(f, Pred):
        pred = predicted[f.args]
        if f.label == GOLD:
            return pred == gold[f.args]
        return pred == labels.index(f.label)
    if isinstance(f, Not):
        return ~eval_boolean_batch(f.arg, predicted, labels, gold)
    a = eval_boolean_batch(f.left, predicted, labels, gold)
    b = eval_boolean_batch(f.right, predicted, labels, gold)
    if isinstance(f, And):
        return a & b
    if isinstance(f, Or):
        return a | b
    if isinstance(f, Implies):
        return ~a | b
    if isinstance(f, Iff):
        return a == b
    raise TypeError(f"not a formula: {f!r}")


# ---------------------------------------------------------------------------
# printing

_PREC = {Iff: 1, Implies: 2, Or: 3, And: 4, Not: 5, Pred: 6, Top: 6}
_SYM = {Iff: "<->", Implies: "->", Or: "|", And: "&"}


def to_text(f: Formula) -> str:
    if isinstance(f, Top):
        return "true"
    if isinstance(f, Pred):
        return f"{f.label}({','.join(f.args)})"
    if isinstance(f, Not):
        inner = to_text(f.arg)
        return f"!{inner}" if _PREC[type(f.arg)] >= _PREC[Not] else f"!({inner})"
    p = _PREC[type(f)]
    right_assoc = isinstance(f, Implies)
    lp, rp = _PREC[type(f.left)], _PREC[type(f.right)]
    left = to_text(f.left)
    right = to_text(f.right)
    if lp < p or (right_assoc and lp == p):
        left = f"({left})"
    if rp < p or (not right_assoc and rp == p):
        right = f"({right})"
    return f"{left} {_SYM[type(f)]} {right}"


def rule_to_text(r: Rule) -> str:
    return f"rule {r.name} over ({','.join(r.vars)}): {to_text(r.body)}"


def ruleset_to_text(rs: RuleSet) -> str:
    lines = [f"labels: {', '.join(rs.labels)}"]
    if rs.pred_arity is not None:
        lines.append(f"arity: {rs.pred_arity}")
    lines += [rule_to_text(r) for r in rs.rules]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"(?P<ws>[ \t\r]+)|(?P<nl>\n)|(?P<comment>\#[^\n]*)"
    r"|(?P<op><->|->|[!&|(),:])|(?P<num>\d+)|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise RuleSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            toks.append(_Tok("nl", "\n", line, pos - line_start + 1))
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            toks.append(_Tok(kind, m.group(), line, pos - line_start + 1))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


@dataclass
class _Parser:
    toks: list[_Tok]
    labels: tuple[str, ...] = ()
    pos: int = 0
    vars: tuple[str, ...] = ()
    pred_arity: int | None = None
    rules: list[Rule] = field(default_factory=list)

    # token plumbing; newlines only matter inside header lines
    def peek(self, skip_nl: bool = True) -> _Tok:
        i = self.pos
        while skip_nl and self.toks[i].kind == "nl":
            i += 1
        return self.toks[i]

    def next(self, skip_nl: bool = True) -> _Tok:
        while skip_nl and self.toks[self.pos].kind == "nl":
            self.pos += 1
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def expect(self, *texts: str, kind: str | None = None, skip_nl: bool = True) -> _Tok:
        tok = self.next(skip_nl)
        ok = tok.kind == kind if kind else tok.text in texts
        if not ok:
            wanted = [kind] if kind else [repr(t) for t in texts]
            found = tok.text if tok.kind != "eof" else "end of input"
            raise RuleSyntaxError(f"unexpected {found!r}", tok.line, tok.col, wanted)
        return tok

    def ident(self) -> _Tok:
        tok = self.expect(kind="ident")
        return tok

    # grammar
    def parse_file(self) -> RuleSet:
        head = self.expect("labels")
        self.expect(":")
        names = [self.ident()]
        while self.peek(skip_nl=False).text == ",":
            self.next(skip_nl=False)
            names.append(self.ident())
        for tok in names:
            if tok.text in KEYWORDS:
                raise RuleSyntaxError(f"reserved word {tok.text!r} used as label", tok.line, tok.col)
        self.labels = tuple(t.text for t in names)
        if len(set(self.labels)) != len(self.labels):
            raise RuleSyntaxError("duplicate label in declaration", head.line, head.col)
        if self.peek().text == "arity":
            self.next()
            self.expect(":")
            tok = self.expect(kind="num")
            self.pred_arity = int(tok.text)
        while self.peek().kind != "eof":
            self.rules.append(self.parse_rule())
        names_seen: set[str] = set()
        for r in self.rules:
            if r.name in names_seen:
                raise RuleSyntaxError(f"duplicate rule name {r.name!r}")
            names_seen.add(r.name)
        return RuleSet(self.labels, tuple(self.rules), self.pred_arity)

    def parse_rule(self) -> Rule:
        start = self.expect("rule")
        name = self.ident()
        if name.text in KEYWORDS:
            raise RuleSyntaxError(f"reserved word {name.text!r} used as rule name", name.line, name.col)
        self.expect("over")
        self.expect("(")
        vs = [self.ident().text]
        while self.peek().text == ",":
            self.next()
            vs.append(self.ident().text)
        self.expect(")")
        self.expect(":")
        if len(set(vs)) != len(vs):
            raise RuleSyntaxError(f"duplicate variable in rule {name.text!r}", start.line, start.col)
        self.vars = tuple(vs)
        body = self.parse_iff()
        if not is_rule_form(body):
            raise RuleSyntaxError(
                f"rule {name.text!r}: top-level connective must be an implication", start.line, start.col
            )
        return Rule(name.text, self.vars, body)

    def parse_iff(self) -> Formula:
        f = self.parse_implies()
        while self.peek().text == "<->":
            self.next()
            f = Iff(f, self.parse_implies())
        return f

    def parse_implies(self) -> Formula:
        f = self.parse_or()
        if self.peek().text == "->":
            self.next()
            return Implies(f, self.parse_implies())
        return f

    def parse_or(self) -> Formula:
        f = self.parse_and()
        while self.peek().text == "|":
            self.next()
            f = Or(f, self.parse_and())
        return f

    def parse_and(self) -> Formula:
        f = self.parse_unary()
        while self.peek().text == "&":
            self.next()
            f = And(f, self.parse_unary())
        return f

    def parse_unary(self) -> Formula:
        tok = self.peek()
        if tok.text == "!":
            self.next()
            return Not(self.parse_unary())
        if tok.text == "(":
            self.next()
            f = self.parse_iff()
            self.expect(")")
            return f
        if tok.text == "true":
            self.next()
            return TOP
        if tok.kind == "ident" and tok.text not in KEYWORDS - {GOLD}:
            return self.parse_pred()
        found = tok.text if tok.kind != "eof" else "end of input"
        raise RuleSyntaxError(f"unexpected {found!r}", tok.line, tok.col, ["'!'", "'('", "'true'", "predicate"])

    def parse_pred(self) -> Pred:
        tok = self.next()
        if tok.text != GOLD and tok.text not in self.labels:
            raise RuleSyntaxError(f"undeclared label {tok.text!r}", tok.line, tok.col, self.labels)
        self.expect("(")
        args = []
        while True:
            v = self.ident()
            if v.text not in self.vars:
                raise RuleSyntaxError(f"undeclared variable {v.text!r}", v.line, v.col, self.vars)
            args.append(v.text)
            if self.peek().text != ",":
                break
            self.next()
        self.expect(")")
        if self.pred_arity is None:
            self.pred_arity = len(args)
        elif len(args) != self.pred_arity:
            raise RuleSyntaxError(
                f"predicate {tok.text} takes {self.pred_arity} argument(s), got {len(args)}", tok.line, tok.col
            )
        return Pred(tok.text, tuple(args))


def parse_rule_file(text: str) -> RuleSet:
    """Parse rule-file text into a :class:`RuleSet`. Raises :class:`RuleSyntaxError`."""
    return _Parser(_tokenize(text)).parse_file()


def parse_formula(text: str, labels: Sequence[str], vars: Sequence[str]) -> Formula:
    """Parse a bare formula; handy for tests and interactive use."""
    p = _Parser(_tokenize(text), labels=tuple(labels), vars=tuple(vars))
    f = p.parse_iff()
    tok = p.peek()
    if tok.kind != "eof":
        raise RuleSyntaxError(f"trailing input {tok.text!r}", tok.line, tok.col)
    return f
