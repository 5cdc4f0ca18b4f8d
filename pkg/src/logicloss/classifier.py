"""One-hidden-layer softmax classifier over pair features.

The batched numpy path (:func:`predict_proba`, :func:`backprop`) is what training
uses. :func:`build_tape` lowers the same network onto an autodiff tape so the two
can be checked against each other and against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tape

CHECKPOINT_VERSION = 1
_MAGIC = "logicloss-checkpoint"


@dataclass
class ModelParams:
    labels: tuple[str, ...]
    W1: np.ndarray  # (hidden, dim)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (n_labels, hidden)
    b2: np.ndarray  # (n_labels,)

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_vector(self, v: np.ndarray) -> "ModelParams":
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(v[i:i + a.size], dtype=float).reshape(a.shape))
            i += a.size
        if i != len(v):
            raise ValueError(f"expected {i} parameters, got {len(v)}")
        return ModelParams(self.labels, *out)

    def copy(self) -> "ModelParams":
        return self.with_vector(self.to_vector().copy())

    def names(self) -> list[str]:
        """Flat parameter names in vector order, e.g. ``W1[0,3]``."""
        out = []
        for tag, a in zip(("W1", "b1", "W2", "b2"), self.arrays()):
            out += [f"{tag}[{','.join(map(str, idx))}]" for idx in np.ndindex(a.shape)]
        return out


def init_params(labels: Sequence[str], dim: int = 8, hidden: int = 16, seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    rng = np.random.default_rng(seed)
    k = len(labels)
    a1, a2 = 1 / np.sqrt(dim), 1 / np.sqrt(hidden)
    return ModelParams(
        tuple(labels),
        rng.uniform(-a1, a1, (hidden, dim)),
        rng.uniform(-a1, a1, hidden),
        rng.uniform(-a2, a2, (k, hidden)),
        rng.uniform(-a2, a2, k),
    )


def zero_params(labels: Sequence[str], dim: int = 8, hidden: int = 16) -> ModelParams:
    k = len(labels)
    return ModelParams(tuple(labels), np.zeros((hidden, dim)), np.zeros(hidden), np.zeros((k, hidden)), np.zeros(k))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.dim:
        raise ValueError(f"feature dimension {x.shape[-1]} does not match model dimension {params.dim}")
    return x


def hidden_and_logits(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = _check(params, x)
    h = np.tanh(x @ params.W1.T + params.b1)
    return h, h @ params.W2.T + params.b2


def predict_proba(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Label probabilities for one feature vector ``(dim,)`` or a batch ``(n, dim)``."""
    return softmax(hidden_and_logits(params, x)[1])


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. declaration order breaks ties
    return np.argmax(probs, axis=-1)


def predict_label(params: ModelParams, x: np.ndarray) -> str | list[str]:
    idx = argmax_labels(predict_proba(params, x))
    if np.ndim(idx) == 0:
        return params.labels[int(idx)]
    return [params.labels[i] for i in idx]


def backprop(params: ModelParams, x: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Flat parameter gradient given dLoss/dprobs for a batch ``x`` of shape (n, dim)."""
    x = _check(params, np.atleast_2d(x))
    grad_probs = np.atleast_2d(grad_probs)
    h, logits = hidden_and_logits(params, x)
    p = softmax(logits)
    g_logits = p * (grad_probs - np.sum(grad_probs * p, axis=-1, keepdims=True))
    gW2 = g_logits.T @ h
    gb2 = g_logits.sum(axis=0)
    g_h = (g_logits @ params.W2) * (1 - h * h)
    gW1 = g_h.T @ x
    gb1 = g_h.sum(axis=0)
    return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])


def build_tape(params: ModelParams, tape: Tape | None = None, prefix: str = "x") -> tuple[Tape, list[int]]:
    """Lower the forward pass onto a tape; returns the probability output nodes.

    Parameters become ``param`` nodes named as in :meth:`ModelParams.names`;
    calling twice on one tape with different prefixes reuses the parameters, so a
    loss over several pairs gets one shared set of weights.
    """
    tape = tape if tape is not None else Tape()
    names = params.names()
    values = params.to_vector()
    if not tape.params:
        for name, v in zip(names, values):
            tape.param(name, v)
    P = tape.params
    xs = [tape.input(f"{prefix}[{j}]") for j in range(params.dim)]
    hid = []
    for i in range(params.hidden):
        acc = P[f"b1[{i}]"]
        for j in range(params.dim):
            acc = tape.add(acc, tape.mul(P[f"W1[{i},{j}]"], xs[j]))
        # tanh(a) = 1 - 2 / (exp(2a) + 1)
        e2 = tape.exp(tape.add(acc, acc))
        hid.append(tape.sub(tape.const(1.0), tape.div(tape.const(2.0), tape.add(e2, tape.const(1.0)))))
    exps = []
    for k in range(len(params.labels)):
        acc = P[f"b2[{k}]"]
        for i in range(params.hidden):
            acc = tape.add(acc, tape.mul(P[f"W2[{k},{i}]"], hid[i]))
        exps.append(tape.exp(acc))
    total = tape.sum(exps)
    return tape, [tape.div(e, total) for e in exps]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    lines = [
        f"{_MAGIC} v{CHECKPOINT_VERSION}",
        "labels " + " ".join(params.labels),
        f"dims {params.dim} {params.hidden} {len(params.labels)}",
    ]
    lines += [repr(float(v)) for v in params.to_vector()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> ModelParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 3 or not lines[0].startswith(_MAGIC + " v"):
        raise ValueError(f"{path}: not a checkpoint file")
    version = int(lines[0].split(" v", 1)[1])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    labels = tuple(lines[1].split()[1:])
    dim, hidden, k = (int(v) for v in lines[2].split()[1:])
    if k != len(labels):
        raise ValueError(f"{path}: {k} outputs but {len(labels)} labels")
    template = zero_params(labels, dim, hidden)
    values = np.array([float(v) for v in lines[3:]])
    return template.with_vector(values)
