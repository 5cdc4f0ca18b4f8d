"""Violation rates, coverage and prediction cross-tables.

Violations use hard argmax predictions. For a dataset ``D`` and the rules that
apply to its collections,

* ``rho`` = collections where some implication fails / ``|D|``
* ``tau`` = the same count / collections where some antecedent holds

``tau`` is ``None`` when no antecedent fires anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Union

import numpy as np

from .classifier import ModelParams, argmax_labels, predict_proba
from .data import Dataset
from .logic import GOLD, Rule, RuleSet, arg_tuples, eval_boolean_batch, predicates
from .tnorm import CompiledLoss

Model = Union[ModelParams, Callable[[np.ndarray], np.ndarray]]


def model_proba(model: Model, x: np.ndarray) -> np.ndarray:
    if isinstance(model, ModelParams):
        return predict_proba(model, x)
    return np.asarray(model(x), dtype=float)


def collection_probs(model: Model, ds: Dataset) -> dict[tuple[int, ...], np.ndarray]:
    """Probabilities for every ordered member tuple the dataset carries."""
    return {pos: model_proba(model, f) for pos, f in ds.features.items()}


def _positions(rule_vars, args) -> tuple[int, ...]:
    return tuple(rule_vars.index(a) for a in args)


# ---------------------------------------------------------------------------
# violation


@dataclass
class RuleViolation:
    numerator: int
    global_denominator: int
    conditional_denominator: int
    applicable: int

    @property
    def rho(self) -> float:
        return self.numerator / self.global_denominator if self.global_denominator else 0.0

    @property
    def tau(self) -> float | None:
        return self.numerator / self.conditional_denominator if self.conditional_denominator else None


@dataclass
class ViolationReport(RuleViolation):
    per_rule: dict[str, RuleViolation] = field(default_factory=dict)
    accuracy: float | None = None

    def check(self) -> None:
        assert self.numerator <= self.global_denominator
        assert self.numerator <= self.conditional_denominator or self.conditional_denominator == 0
        if self.tau is not None:
            assert 0 <= self.rho <= self.tau <= 1
        assert self.numerator <= sum(r.numerator for r in self.per_rule.values()) or not self.per_rule

    def metrics(self) -> dict[str, float | int | None]:
        out: dict[str, float | int | None] = {
            "rho": self.rho, "tau": self.tau, "violations": self.numerator,
            "collections": self.global_denominator, "antecedent_true": self.conditional_denominator,
        }
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
        tags = family_tags(self.per_rule)
        for name, r in self.per_rule.items():
            tag = tags[name]
            out[f"rho_{tag}"] = r.rho
            out[f"tau_{tag}"] = r.tau
        return out


def family_tags(names) -> dict[str, str]:
    """``sym`` -> ``S``, ``tran`` -> ``T``; falls back to the full name on clashes."""
    names = list(names)
    initials = [n[0].upper() for n in names]
    return {n: (i if initials.count(i) == 1 else n) for n, i in zip(names, initials)}


def _gold_ok(rule: Rule, ds: Dataset) -> np.ndarray:
    """Rows carrying every gold label the rule refers to."""
    ok = np.ones(len(ds), dtype=bool)
    for p in predicates(rule.body):
        if p.label == GOLD:
            g = ds.gold.get(_positions(rule.vars, p.args))
            if g is None:
                return np.zeros(len(ds), dtype=bool)
            ok &= g >= 0
    return ok


def rule_masks(rule: Rule, ds: Dataset, predicted: Mapping[tuple[int, ...], np.ndarray],
               labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(applicable, violated, antecedent) row masks for one rule on one dataset."""
    n = len(ds)
    if rule.arity != ds.arity:
        z = np.zeros(n, dtype=bool)
        return z, z, z
    applicable = _gold_ok(rule, ds)
    by_args = {}
    gold = {}
    for args in arg_tuples(rule.body):
        pos = _positions(rule.vars, args)
        if pos not in predicted:
            raise KeyError(f"dataset has no predictions for member tuple {pos} needed by rule {rule.name!r}")
        by_args[args] = predicted[pos]
        if pos in ds.gold:
            gold[args] = ds.gold[pos]
    violated = np.zeros(n, dtype=bool)
    antecedent = np.zeros(n, dtype=bool)
    for left, right in rule.clauses():
        lhs = eval_boolean_batch(left, by_args, labels, gold) if n else np.zeros(0, bool)
        rhs = eval_boolean_batch(right, by_args, labels, gold) if n else np.zeros(0, bool)
        lhs = np.broadcast_to(lhs, (n,))
        rhs = np.broadcast_to(rhs, (n,))
        violated |= lhs & ~rhs
        antecedent |= lhs
    return applicable, violated & applicable, antecedent & applicable


def violation_from_predictions(ds: Dataset, rs: RuleSet,
                               predicted: Mapping[tuple[int, ...], np.ndarray]) -> ViolationReport:
    rules = [r for r in rs.rules if r.arity == ds.arity]
    if not rules and len(ds):
        raise ValueError(f"no rule applies to {ds.kind} collections (arity {ds.arity})")
    n = len(ds)
    any_violated = np.zeros(n, dtype=bool)
    any_antecedent = np.zeros(n, dtype=bool)
    per_rule = {}
    for r in rules:
        app, vio, ant = rule_masks(r, ds, predicted, rs.labels)
        if not app.any():
            continue
        per_rule[r.name] = RuleViolation(int(vio.sum()), n, int(ant.sum()), int(app.sum()))
        any_violated |= vio
        any_antecedent |= ant
    accuracy = None
    governed = (0, 1) if ds.kind == "pair" else ((0,) if ds.kind == "single" else None)
    if governed is not None and governed in ds.gold and len(ds) and np.all(ds.gold[governed] >= 0):
        accuracy = float(np.mean(predicted[governed] == ds.gold[governed]))
    report = ViolationReport(int(any_violated.sum()), n, int(any_antecedent.sum()), n, per_rule, accuracy)
    report.check()
    return report


def predictions(model: Model, ds: Dataset) -> dict[tuple[int, ...], np.ndarray]:
    return {pos: argmax_labels(p) for pos, p in collection_probs(model, ds).items()}


def global_violation(ds: Dataset, rs: RuleSet, model: Model) -> ViolationReport:
    """Rates over hard predictions; ``rho`` is the global violation."""
    return violation_from_predictions(ds, rs, predictions(model, ds))


def conditional_violation(ds: Dataset, rs: RuleSet, model: Model) -> ViolationReport:
    """Same report; ``tau`` is the conditional violation (``None`` if undefined)."""
    return violation_from_predictions(ds, rs, predictions(model, ds))


# ---------------------------------------------------------------------------
# coverage and soft losses


def slot_probs(compiled: CompiledLoss, ds: Dataset, probs: Mapping[tuple[int, ...], np.ndarray]):
    """Key per-position probabilities by the rule's variable tuples."""
    vars_ = compiled.rule.vars
    out, gold = {}, {}
    for args in compiled.arg_tuples:
        pos = _positions(vars_, args)
        out[args] = probs[pos]
        if pos in ds.gold:
            gold[args] = ds.gold[pos]
    return out, gold


def loss_values(compiled: CompiledLoss, ds: Dataset, model: Model,
                probs: Mapping[tuple[int, ...], np.ndarray] | None = None) -> np.ndarray:
    if compiled.rule.arity != ds.arity:
        raise ValueError(f"rule {compiled.name!r} has arity {compiled.rule.arity}, dataset has {ds.arity}")
    if len(ds) == 0:
        return np.zeros(0)
    probs = collection_probs(model, ds) if probs is None else probs
    sp, gold = slot_probs(compiled, ds, probs)
    v = compiled.loss_graph.forward(compiled.bind(sp, gold))
    return np.broadcast_to(np.asarray(v, dtype=float), (len(ds),)).copy()


@dataclass
class CoverageReport:
    rule: str
    positive: int
    total: int

    @property
    def coverage(self) -> float:
        return self.positive / self.total if self.total else 0.0


def coverage(ds: Dataset, compiled: CompiledLoss, model: Model) -> CoverageReport:
    """Fraction of collections whose compiled loss is strictly positive."""
    vals = loss_values(compiled, ds, model)
    return CoverageReport(compiled.name, int(np.sum(vals > 0)), len(ds))


# ---------------------------------------------------------------------------
# cross tables


@dataclass
class CrossTable:
    labels: tuple[str, ...]
    counts: np.ndarray  # rows: prediction on (P,H); columns: prediction on (H,P)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def symmetry_violations(self, label: str = "C") -> int:
        k = self.labels.index(label)
        row = self.counts[k].sum() - self.counts[k, k]
        col = self.counts[:, k].sum() - self.counts[k, k]
        return int(row + col)

    def to_text(self) -> str:
        w = max(6, *(len(l) + 2 for l in self.labels))
        lines = ["(P,H)\\(H,P)".ljust(w + 6) + "".join(l.rjust(w) for l in self.labels)]
        for i, l in enumerate(self.labels):
            lines.append(l.ljust(w + 6) + "".join(str(int(c)).rjust(w) for c in self.counts[i]))
        return "\n".join(lines)


def cross_table(ds: Dataset, model: Model, labels=("E", "C", "N")) -> CrossTable:
    k = len(labels)
    counts = np.zeros((k, k), dtype=np.int64)
    if len(ds):
        pred = predictions(model, ds)
        np.add.at(counts, (pred[(0, 1)], pred[(1, 0)]), 1)
    return CrossTable(tuple(labels), counts)


def triple_marginals(ds: Dataset, model: Model, labels=("E", "C", "N")) -> dict[str, np.ndarray]:
    """Label counts for the (P,H), (H,Z) and (P,Z) predictions of a triple dataset."""
    names = {(0, 1): "(P,H)", (1, 2): "(H,Z)", (0, 2): "(P,Z)"}
    pred = predictions(model, ds) if len(ds) else {}
    return {name: (np.bincount(pred[pos], minlength=len(labels)) if len(ds) else np.zeros(len(labels), int))
            for pos, name in names.items()}


# ---------------------------------------------------------------------------
# report formatting


def format_kv(metrics: Mapping[str, object]) -> str:
    lines = []
    for k, v in metrics.items():
        if v is None:
            v = "NA"
        elif isinstance(v, float):
            v = f"{v:.6f}"
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def format_table(metrics: Mapping[str, object]) -> str:
    w = max(len(k) for k in metrics) + 2
    out = []
    for k, v in metrics.items():
        if v is None:
            s = "absent"
        elif isinstance(v, float):
            s = f"{v:.4f}"
        else:
            s = str(v)
        out.append(f"{k.ljust(w)}{s}")
    return "\n".join(out) + "\n"
