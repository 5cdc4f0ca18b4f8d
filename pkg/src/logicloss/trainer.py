"""Two-stage training against annotation plus constraint losses.

Stage 1 fits the annotation loss on labeled pairs. Stage 2 continues at a lower
learning rate and adds symmetry/transitivity losses over the active auxiliary
datasets (M, U, T), each step mixing one batch from every active source.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import NumericalError
from .classifier import ModelParams, backprop, init_params, predict_proba
from .data import DatasetBundle, Dataset
from .logic import RuleSet
from .metrics import (
    _positions, collection_probs, coverage, global_violation, loss_values, slot_probs,
)
from .tnorm import CompiledLoss, TNorm, compile_rules

GROUPS = ("labeled", "M", "U", "T")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_sym: float = 1.0  # mirrored labeled pairs (M)
    lambda_tran: float = 0.01  # unlabeled triples (T)
    lambda_sym_u: float | None = 0.1  # unlabeled pairs (U); None -> lambda_sym

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")

    def for_group(self, group: str) -> float:
        if group == "labeled":
            return 1.0
        if group == "M":
            return self.lambda_sym
        if group == "U":
            return self.lambda_sym if self.lambda_sym_u is None else self.lambda_sym_u
        if group == "T":
            return self.lambda_tran
        raise KeyError(group)


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 8
    hidden: int = 16
    seed: int = 0
    stage1_epochs: int = 30
    stage1_lr: float = 1e-2
    stage2_epochs: int = 30
    stage2_lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    datasets: tuple[str, ...] = ()
    annotation: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    log_metrics: bool = True

    def __post_init__(self):
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        bad = set(self.datasets) - {"M", "U", "T"}
        if bad:
            raise ValueError(f"unknown constraint datasets {sorted(bad)}; choose from M, U, T")

    def with_constraints(self, spec: str | Sequence[str]) -> "TrainConfig":
        """``"M,U,T"`` / ``"none"`` -> config with that active set."""
        if isinstance(spec, str):
            items = [] if spec.strip().lower() in ("", "none") else [s.strip().upper() for s in spec.split(",")]
        else:
            items = list(spec)
        return replace(self, datasets=tuple(g for g in ("M", "U", "T") if g in items)
                       if set(items) <= {"M", "U", "T"} else tuple(items))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["model"] = {"dim": str(self.dim), "hidden": str(self.hidden)}
        cp["train"] = {
            "seed": str(self.seed), "stage1_epochs": str(self.stage1_epochs), "stage1_lr": repr(self.stage1_lr),
            "stage2_epochs": str(self.stage2_epochs), "stage2_lr": repr(self.stage2_lr),
            "beta1": repr(self.beta1), "beta2": repr(self.beta2), "adam_eps": repr(self.adam_eps),
            "batch_size": str(self.batch_size), "annotation": str(self.annotation).lower(),
        }
        w = self.weights
        cp["constraints"] = {
            "datasets": ",".join(self.datasets) or "none",
            "lambda_sym": repr(w.lambda_sym), "lambda_tran": repr(w.lambda_tran),
            "lambda_sym_u": "none" if w.lambda_sym_u is None else repr(w.lambda_sym_u),
        }
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in cp[section].items()]
            lines.append("")
        return "\n".join(lines)


@dataclass(frozen=True)
class EpochRecord:
    stage: int
    epoch: int
    L_ann: float
    L_sym: float
    L_tran: float
    objective: float
    dev_accuracy: float | None
    rho_S: float | None
    tau_S: float | None
    rho_T: float | None
    tau_T: float | None
    coverage_S: float | None
    coverage_T: float | None


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch index must increase")
        self.records.append(rec)

    def to_tsv(self) -> str:
        names = [f.name for f in fields(EpochRecord)]
        lines = ["\t".join(names)]
        for r in self.records:
            vals = []
            for n in names:
                v = getattr(r, n)
                vals.append("NA" if v is None else (repr(v) if isinstance(v, float) else str(v)))
            lines.append("\t".join(vals))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new arrays and leaves inputs untouched."""
    if state.m.shape != params.shape or grads.shape != params.shape:
        raise ValueError("Adam state, gradient and parameter shapes differ")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


# ---------------------------------------------------------------------------
# losses


def losses_for_group(group: str, compiled: Sequence[CompiledLoss], arity: int) -> list[CompiledLoss]:
    """Annotation rules run on labeled pairs; the other rules on matching auxiliary data."""
    if group == "labeled":
        return [c for c in compiled if c.needs_gold and c.rule.arity == arity]
    return [c for c in compiled if not c.needs_gold and c.rule.arity == arity]


def family(c: CompiledLoss) -> str:
    if c.needs_gold:
        return "ann"
    return "sym" if c.rule.arity == 2 else "tran"


@dataclass
class MixedLoss:
    value: float
    grad: np.ndarray
    parts: dict[str, float]  # unweighted sums per family


def mix_losses(params: ModelParams, batch: Mapping[str, Dataset], compiled: Sequence[CompiledLoss],
               weights: LossWeights) -> MixedLoss:
    """``L = sum L_ann + lambda_sym sum L_sym + lambda_tran sum L_tran`` with its gradient.

    ``batch`` maps a group name (labeled, M, U, T) to the collections drawn from it.
    """
    total = 0.0
    grad = np.zeros(len(params.to_vector()))
    parts = {"ann": 0.0, "sym": 0.0, "tran": 0.0}
    for group, ds in batch.items():
        if len(ds) == 0:
            continue
        w = weights.for_group(group)
        active = losses_for_group(group, compiled, ds.arity)
        if not active:
            continue
        probs = collection_probs(params, ds)
        gprobs = {pos: np.zeros_like(p) for pos, p in probs.items()}
        for c in active:
            sp, gold = slot_probs(c, ds, probs)
            inputs = c.bind(sp, gold)
            vals = np.broadcast_to(c.loss_graph.forward(inputs), (len(ds),))
            s = float(np.sum(vals))
            parts[family(c)] += s
            total += w * s
            if w == 0.0:
                continue
            g = c.loss_graph.backward()
            slot_grads = {k: w * np.broadcast_to(v, (len(ds),)) for k, v in g.inputs.items()}
            for args, gp in c.prob_gradients(slot_grads, sp, gold).items():
                gprobs[_positions(c.rule.vars, args)] += gp
        for pos, gp in gprobs.items():
            if np.any(gp):
                grad += backprop(params, ds.features[pos], gp)
    if not math.isfinite(total) or not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite mixed loss or gradient")
    return MixedLoss(total, grad, parts)


def objective(params: ModelParams, data: Mapping[str, Dataset], compiled, weights: LossWeights) -> MixedLoss:
    return mix_losses(params, data, compiled, weights)


# ---------------------------------------------------------------------------
# training loop


def _sources(cfg: TrainConfig, bundle: DatasetBundle, stage: int) -> dict[str, Dataset]:
    out = {}
    if cfg.annotation:
        out["labeled"] = bundle.train
    if stage == 2:
        for g in cfg.datasets:
            ds = getattr(bundle, g)
            if len(ds):
                out[g] = ds
    return out


def _evaluate(params, bundle, rules: RuleSet, compiled, cfg) -> dict:
    out = dict(dev_accuracy=None, rho_S=None, tau_S=None, rho_T=None, tau_T=None,
               coverage_S=None, coverage_T=None)
    if not cfg.log_metrics:
        return out
    if len(bundle.dev):
        out["dev_accuracy"] = float(np.mean(np.argmax(predict_proba(params, bundle.dev.features[(0, 1)]), 1)
                                            == bundle.dev.gold[(0, 1)]))
    by_family = {family(c): c for c in compiled}
    for tag, fam, ds in (("S", "sym", bundle.U), ("T", "tran", bundle.T)):
        c = by_family.get(fam)
        if c is None or len(ds) == 0:
            continue
        r = global_violation(ds, rules, params).per_rule.get(c.name)
        if r is not None:
            out[f"rho_{tag}"], out[f"tau_{tag}"] = r.rho, r.tau
        out[f"coverage_{tag}"] = coverage(ds, c, params).coverage
    return out


def train(cfg: TrainConfig, bundle: DatasetBundle, rules: RuleSet, tnorm: TNorm = TNorm.PRODUCT,
          init: ModelParams | None = None) -> tuple[ModelParams, TrainLog]:
    compiled = compile_rules(rules, tnorm)
    if cfg.annotation and len(bundle.train) == 0 and cfg.stage1_epochs + cfg.stage2_epochs > 0:
        raise TrainingError("annotation loss enabled but the labeled training set is empty")
    params = init if init is not None else init_params(rules.labels, cfg.dim, cfg.hidden, cfg.seed)
    if params.dim != bundle.train.dim:
        raise TrainingError(f"model dimension {params.dim} does not match data dimension {bundle.train.dim}")
    # one shuffle stream per source, so adding a source never reorders another
    rngs = {g: np.random.default_rng([cfg.seed, 1, i]) for i, g in enumerate(GROUPS)}
    log = TrainLog()
    epoch_no = 0
    for stage, epochs, lr in ((1, cfg.stage1_epochs, cfg.stage1_lr), (2, cfg.stage2_epochs, cfg.stage2_lr)):
        sources = _sources(cfg, bundle, stage)
        if not sources or epochs == 0:
            continue
        vec = params.to_vector()
        state = AdamState.zeros(len(vec))
        lead = "labeled" if "labeled" in sources else max(sources, key=lambda g: len(sources[g]))
        steps = math.ceil(len(sources[lead]) / cfg.batch_size)
        cursors = {g: (rngs[g].permutation(len(ds)), 0) for g, ds in sources.items()}
        for _ in range(epochs):
            epoch_no += 1
            sums = {"ann": 0.0, "sym": 0.0, "tran": 0.0}
            counts = {"ann": 0, "sym": 0, "tran": 0}
            for step in range(steps):
                batch = {}
                for g, ds in sources.items():
                    order, at = cursors[g]
                    if at + cfg.batch_size > len(order) and at > 0:
                        order, at = rngs[g].permutation(len(ds)), 0
                    idx = order[at:at + cfg.batch_size]
                    cursors[g] = (order, at + len(idx))
                    batch[g] = ds.take(idx)
                try:
                    mixed = mix_losses(params, batch, compiled, cfg.weights)
                except NumericalError as e:
                    raise TrainingError(f"stage {stage}, epoch {epoch_no}, batch {step}: {e}") from e
                for fam in sums:
                    sums[fam] += mixed.parts[fam]
                for g, ds in batch.items():
                    for c in losses_for_group(g, compiled, ds.arity):
                        counts[family(c)] += len(ds)
                vec, state = adam_step(vec, mixed.grad, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
                params = params.with_vector(vec)
            full = mix_losses(params, sources, compiled, cfg.weights)
            ev = _evaluate(params, bundle, rules, compiled, cfg)
            log.append(EpochRecord(
                stage, epoch_no,
                *(sums[f] / counts[f] if counts[f] else 0.0 for f in ("ann", "sym", "tran")),
                full.value, **ev,
            ))
    return params, log


# ---------------------------------------------------------------------------
# config files


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_SECTIONS = {
    "model": {"dim": int, "hidden": int},
    "train": {"seed": int, "stage1_epochs": int, "stage1_lr": float, "stage2_epochs": int, "stage2_lr": float,
              "beta1": float, "beta2": float, "adam_eps": float, "batch_size": int, "annotation": _bool},
    "constraints": {"datasets": str, "lambda_sym": float, "lambda_tran": float, "lambda_sym_u": str},
    "data": {},
}


def parse_config(text: str, base: TrainConfig | None = None) -> tuple[TrainConfig, dict[str, str]]:
    """INI ``key = value`` config -> (TrainConfig, raw [data] section)."""
    cp = configparser.ConfigParser()
    cp.read_string(text)
    cfg = base or TrainConfig()
    updates: dict = {}
    w = asdict(cfg.weights)
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        known = _SECTIONS[section]
        for key, raw in cp[section].items():
            if section == "data":
                continue
            if key not in known:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            if key == "datasets":
                cfg = cfg.with_constraints(raw)
            elif key == "lambda_sym_u":
                w[key] = None if raw.strip().lower() == "none" else float(raw)
            elif key.startswith("lambda_"):
                w[key] = known[key](raw)
            else:
                updates[key] = known[key](raw)
    cfg = replace(cfg, **updates, weights=LossWeights(**w))
    data = dict(cp["data"]) if cp.has_section("data") else {}
    return cfg, data


def load_config(path: str | Path) -> tuple[TrainConfig, dict[str, str]]:
    return parse_config(Path(path).read_text(encoding="utf-8"))
