"""Synthetic inference data from interval semantics, plus dataset files.

Each sentence denotes an interval on the real line. A premise entails a hypothesis
when its interval lies inside the hypothesis interval, contradicts it when the two
are disjoint, and is neutral otherwise. Under these definitions symmetry of
contradiction and the four transitivity clauses hold for every triple, so oracle
labels are always consistent.

Models only see noisy endpoints, combined into an ordered pair feature vector.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LABELS = ("E", "C", "N")
FEATURE_DIM = 8
SCHEMA_VERSION = 1
GOVERNED = {"single": [(0,)], "pair": [(0, 1)], "triple": [(0, 1), (1, 2), (0, 2)]}
MEMBERS = {"single": 1, "pair": 2, "triple": 3}


def slot_positions(kind: str) -> list[tuple[int, ...]]:
    """Ordered member tuples a collection of this kind carries features for."""
    if kind == "single":
        return [(0,)]
    return list(itertools.permutations(range(MEMBERS[kind]), 2))


@dataclass(frozen=True)
class Sentence:
    id: int
    topic: int
    lo: float
    hi: float
    obs: tuple[float, float]

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"sentence {self.id}: empty interval [{self.lo}, {self.hi}]")


def oracle_label(p: Sentence, h: Sentence) -> str:
    if h.lo <= p.lo and p.hi <= h.hi:
        return "E"
    if p.hi < h.lo or h.hi < p.lo:
        return "C"
    return "N"


def pair_features(p: Sequence[float], h: Sequence[float]) -> np.ndarray:
    """Ordered features from observed endpoints; swapping p and h changes the vector."""
    return np.concatenate([sentence_view(p), sentence_view(h)])


def sentence_view(obs: Sequence[float]) -> np.ndarray:
    """Observed endpoints plus the centre and width they imply."""
    lo, hi = obs
    return np.array([lo, hi, (lo + hi) / 2, hi - lo])


# ---------------------------------------------------------------------------
# collections


@dataclass
class Collection:
    kind: str
    ids: tuple[int, ...]
    features: dict[tuple[int, ...], np.ndarray]
    gold: dict[tuple[int, ...], int] = field(default_factory=dict)


@dataclass
class Dataset:
    """Column-oriented collections of one kind.

    ``features[pos]`` is an ``(n, dim)`` array for the ordered member tuple ``pos``;
    ``gold[pos]`` holds label indices with ``-1`` for unlabeled rows.
    """

    kind: str
    ids: np.ndarray
    features: dict[tuple[int, ...], np.ndarray]
    gold: dict[tuple[int, ...], np.ndarray]
    dim: int = FEATURE_DIM

    def __post_init__(self):
        if self.kind not in MEMBERS:
            raise ValueError(f"unknown collection kind {self.kind!r}")
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1, MEMBERS[self.kind])
        n = len(self.ids)
        for pos in slot_positions(self.kind):
            self.features.setdefault(pos, np.zeros((n, self.dim)))
        for pos in GOVERNED[self.kind]:
            self.gold.setdefault(pos, np.full(n, -1, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def arity(self) -> int:
        return MEMBERS[self.kind]

    @property
    def labeled(self) -> bool:
        return len(self) > 0 and all(np.all(g >= 0) for g in self.gold.values())

    def __getitem__(self, i: int) -> Collection:
        gold = {pos: int(g[i]) for pos, g in self.gold.items() if g[i] >= 0}
        return Collection(self.kind, tuple(int(v) for v in self.ids[i]),
                          {pos: f[i] for pos, f in self.features.items()}, gold)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.kind, self.ids[idx], {k: v[idx] for k, v in self.features.items()},
                       {k: v[idx] for k, v in self.gold.items()}, self.dim)

    def unlabeled(self) -> "Dataset":
        return Dataset(self.kind, self.ids.copy(), dict(self.features), {}, self.dim)

    @classmethod
    def empty(cls, kind: str, dim: int = FEATURE_DIM) -> "Dataset":
        return cls(kind, np.zeros((0, MEMBERS[kind]), dtype=np.int64), {}, {}, dim)

    @classmethod
    def from_collections(cls, kind: str, items: Sequence[Collection], dim: int = FEATURE_DIM) -> "Dataset":
        if not items:
            return cls.empty(kind, dim)
        ids = np.array([c.ids for c in items])
        feats = {pos: np.array([c.features[pos] for c in items], dtype=float) for pos in slot_positions(kind)}
        gold = {pos: np.array([c.gold.get(pos, -1) for c in items]) for pos in GOVERNED[kind]}
        return cls(kind, ids, feats, gold, dim)


def _views(pairs, rng: np.random.Generator | None, sigma: float) -> np.ndarray:
    """Pair features, each ordered pair seeing its own noisy copy of both sentences."""
    out = np.empty((len(pairs), FEATURE_DIM))
    for i, (a, b) in enumerate(pairs):
        pa, pb = np.asarray(a.obs), np.asarray(b.obs)
        if rng is not None and sigma > 0:
            pa = pa + rng.normal(0, sigma, 2)
            pb = pb + rng.normal(0, sigma, 2)
        out[i] = pair_features(pa, pb)
    return out


def _pair_dataset(pairs: Sequence[tuple[Sentence, Sentence]], gold: Sequence[int] | None = None,
                  rng: np.random.Generator | None = None, sigma: float = 0.0) -> Dataset:
    n = len(pairs)
    ids = np.array([(p.id, h.id) for p, h in pairs], dtype=np.int64).reshape(n, 2)
    f01 = _views(pairs, rng, sigma)
    f10 = _views([(h, p) for p, h in pairs], rng, sigma)
    g = {} if gold is None else {(0, 1): np.asarray(gold, dtype=np.int64)}
    return Dataset("pair", ids, {(0, 1): f01, (1, 0): f10}, g)


def _triple_dataset(triples: Sequence[tuple[Sentence, Sentence, Sentence]],
                    rng: np.random.Generator | None = None, sigma: float = 0.0) -> Dataset:
    n = len(triples)
    ids = np.array([[s.id for s in t] for t in triples], dtype=np.int64).reshape(n, 3)
    feats = {(i, j): _views([(t[i], t[j]) for t in triples], rng, sigma) for i, j in slot_positions("triple")}
    return Dataset("triple", ids, feats, {})


def mirror(pairs: Dataset) -> Dataset:
    """Swap premise and hypothesis of every pair; the result is unlabeled."""
    if pairs.kind != "pair":
        raise ValueError("mirror expects a pair dataset")
    return Dataset("pair", pairs.ids[:, ::-1].copy(),
                   {(0, 1): pairs.features[(1, 0)].copy(), (1, 0): pairs.features[(0, 1)].copy()},
                   {}, pairs.dim)


def triples_to_pairs(t: Collection) -> list[Collection]:
    """``(P,H,Z)`` -> ``[(P,H), (H,Z), (P,Z)]``."""
    if t.kind != "triple":
        raise ValueError("expected a triple")
    out = []
    for i, j in GOVERNED["triple"]:
        feats = {(0, 1): t.features[(i, j)], (1, 0): t.features[(j, i)]}
        gold = {(0, 1): t.gold[(i, j)]} if (i, j) in t.gold else {}
        out.append(Collection("pair", (t.ids[i], t.ids[j]), feats, gold))
    return out


def first_pairs_mirrored(triples: Dataset) -> Dataset:
    """U: the mirrored first pair ``(H,P)`` of every triple."""
    return Dataset("pair", triples.ids[:, [1, 0]].copy(),
                   {(0, 1): triples.features[(1, 0)].copy(), (1, 0): triples.features[(0, 1)].copy()},
                   {}, triples.dim)


# ---------------------------------------------------------------------------
# generation


@dataclass
class GenConfig:
    n_train: int = 5000
    n_dev: int = 1000
    n_test: int = 1000
    n_unlabeled: int = 1000
    noise: float = 0.25
    view_noise: float = 0.0
    n_topics: int = 50
    topic_spread: float = 10.0
    center_spread: float = 2.5
    width_median: float = 2.5
    width_sigma: float = 0.6
    balance: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    balance_tol: float = 0.01
    max_tries_per_pair: int = 200
    specific_premise: bool = True
    # the unlabeled pool (U, T) comes from a different region with narrower sentences
    domain_shift: float = 20.0
    unlabeled_width_scale: float = 0.5

    def __post_init__(self):
        for name in ("n_train", "n_dev", "n_test", "n_unlabeled"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if abs(sum(self.balance) - 1) > 1e-9 or min(self.balance) < 0:
            raise ValueError("balance must be a probability vector over (E, C, N)")


@dataclass
class DatasetBundle:
    train: Dataset
    dev: Dataset
    test: Dataset
    M: Dataset
    U: Dataset
    T: Dataset
    sentences: dict[int, Sentence] = field(default_factory=dict)

    SPLITS = ("train", "dev", "test", "M", "U", "T")

    def splits(self) -> dict[str, Dataset]:
        return {name: getattr(self, name) for name in self.SPLITS}


class GenerationError(RuntimeError):
    pass


class _World:
    def __init__(self, cfg: GenConfig, rng: np.random.Generator):
        self.cfg, self.rng = cfg, rng
        self.anchors = rng.uniform(-cfg.topic_spread / 2, cfg.topic_spread / 2, cfg.n_topics)
        self.sentences: dict[int, Sentence] = {}

    def sentence(self, topic: int, shifted: bool = False) -> Sentence:
        cfg, rng = self.cfg, self.rng
        center = self.anchors[topic] + rng.normal(0, cfg.center_spread)
        half = cfg.width_median * np.exp(rng.normal(0, cfg.width_sigma)) / 2
        if shifted:
            center += cfg.domain_shift
            half *= cfg.unlabeled_width_scale
        lo, hi = center - half, center + half
        obs = (lo + rng.normal(0, cfg.noise), hi + rng.normal(0, cfg.noise))
        s = Sentence(len(self.sentences), topic, float(lo), float(hi), (float(obs[0]), float(obs[1])))
        self.sentences[s.id] = s
        return s

    def pool(self, n_sentences: int, shifted: bool = False) -> dict[int, list[Sentence]]:
        by_topic: dict[int, list[Sentence]] = {t: [] for t in range(self.cfg.n_topics)}
        for _ in range(n_sentences):
            t = int(self.rng.integers(self.cfg.n_topics))
            by_topic[t].append(self.sentence(t, shifted))
        out = {t: ss for t, ss in by_topic.items() if len(ss) >= 3}
        if not out:
            raise GenerationError("no topic received three sentences; increase the split size")
        return out

    def _pool_size(self, n: int) -> int:
        # enough sentences that a typical topic can supply a triple
        return max(n, 6 * self.cfg.n_topics)

    def labeled_pairs(self, n: int) -> Dataset:
        if n == 0:
            return _pair_dataset([], [])
        cfg, rng = self.cfg, self.rng
        quota = _quotas(n, cfg.balance)
        pool = self.pool(self._pool_size(n))
        topics = sorted(pool)
        got: dict[int, list[tuple[Sentence, Sentence]]] = {k: [] for k in range(len(LABELS))}
        for _ in range(cfg.max_tries_per_pair * n):
            if all(len(got[k]) >= quota[k] for k in got):
                break
            ss = pool[topics[int(rng.integers(len(topics)))]]
            i, j = rng.choice(len(ss), 2, replace=False)
            if cfg.specific_premise and ss[i].hi - ss[i].lo > ss[j].hi - ss[j].lo:
                i, j = j, i
            k = LABELS.index(oracle_label(ss[i], ss[j]))
            if len(got[k]) < quota[k]:
                got[k].append((ss[i], ss[j]))
        if any(len(got[k]) < quota[k] for k in got):
            raise GenerationError(f"could not reach label quotas {quota} within the retry budget")
        pairs = [(p, k) for k in got for p in got[k]]
        order = rng.permutation(len(pairs))
        pairs = [pairs[i] for i in order]
        return _pair_dataset([p for p, _ in pairs], [k for _, k in pairs], rng, cfg.view_noise)

    def triples(self, n: int) -> Dataset:
        if n == 0:
            return _triple_dataset([])
        pool = self.pool(self._pool_size(n), shifted=True)
        topics = sorted(pool)
        out = []
        for _ in range(n):
            ss = pool[topics[int(self.rng.integers(len(topics)))]]
            i, j, k = self.rng.choice(len(ss), 3, replace=False)
            out.append((ss[i], ss[j], ss[k]))
        return _triple_dataset(out, self.rng, self.cfg.view_noise)


def _quotas(n: int, balance: Sequence[float]) -> list[int]:
    q = [int(np.floor(n * b)) for b in balance]
    for i in range(n - sum(q)):
        q[i % len(q)] += 1
    return q


def generate(cfg: GenConfig | None = None, seed: int = 0) -> DatasetBundle:
    """Deterministic bundle for ``seed``; splits never share sentences."""
    cfg = cfg or GenConfig()
    world = _World(cfg, np.random.default_rng(seed))
    train = world.labeled_pairs(cfg.n_train)
    dev = world.labeled_pairs(cfg.n_dev)
    test = world.labeled_pairs(cfg.n_test)
    T = world.triples(cfg.n_unlabeled)
    bundle = DatasetBundle(train, dev, test, mirror(train), first_pairs_mirrored(T), T, world.sentences)
    _verify(bundle, cfg)
    return bundle


def _verify(bundle: DatasetBundle, cfg: GenConfig) -> None:
    from .logic import eval_boolean
    from .rules import load_nli_rules

    s = bundle.sentences
    for split in (bundle.train, bundle.dev, bundle.test):
        if len(split):
            counts = np.bincount(split.gold[(0, 1)], minlength=3) / len(split)
            if np.max(np.abs(counts - np.array(cfg.balance))) > cfg.balance_tol + 1.0 / len(split):
                raise GenerationError(f"label marginals {counts} outside tolerance")
    tran = load_nli_rules().rule("tran")
    for p, h, z in bundle.T.ids:
        a = {("P", "H"): oracle_label(s[p], s[h]), ("H", "Z"): oracle_label(s[h], s[z]),
             ("P", "Z"): oracle_label(s[p], s[z])}
        if not eval_boolean(tran.body, a):
            raise GenerationError(f"oracle labels violate transitivity on {(p, h, z)}")  # pragma: no cover


# ---------------------------------------------------------------------------
# files


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(ds: Dataset, path: str | Path, labels: Sequence[str] = LABELS) -> None:
    lines = [f"#logicloss-data\tv{SCHEMA_VERSION}\tkind={ds.kind}\tdim={ds.dim}\tlabels={','.join(labels)}"]
    positions = slot_positions(ds.kind)
    governed = GOVERNED[ds.kind]
    for i in range(len(ds)):
        ids = ",".join(str(int(v)) for v in ds.ids[i])
        feats = "|".join(",".join(_fmt(v) for v in ds.features[pos][i]) for pos in positions)
        g = [int(ds.gold[pos][i]) for pos in governed]
        gold = "-" if all(v < 0 for v in g) else ",".join(labels[v] if v >= 0 else "-" for v in g)
        lines.append(f"{ds.kind}\t{ids}\t{feats}\t{gold}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class SchemaError(ValueError):
    pass


def load_dataset(path: str | Path, labels: Sequence[str] = LABELS) -> Dataset:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("#logicloss-data"):
        raise SchemaError(f"{path}: missing dataset header")
    head = text[0].split("\t")
    if head[1] != f"v{SCHEMA_VERSION}":
        raise SchemaError(f"{path}: schema {head[1]}, expected v{SCHEMA_VERSION}")
    meta = dict(kv.split("=", 1) for kv in head[2:])
    kind, dim = meta["kind"], int(meta["dim"])
    file_labels = tuple(meta.get("labels", ",".join(labels)).split(","))
    if file_labels != tuple(labels):
        raise SchemaError(f"{path}: labels {file_labels} do not match {tuple(labels)}")
    positions = slot_positions(kind)
    items = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 4 or cols[0] != kind:
            raise SchemaError(f"{path}:{lineno}: malformed row")
        ids = tuple(int(v) for v in cols[1].split(","))
        blocks = cols[2].split("|")
        if len(ids) != MEMBERS[kind] or len(blocks) != len(positions):
            raise SchemaError(f"{path}:{lineno}: wrong number of ids or feature blocks")
        feats = {}
        for pos, block in zip(positions, blocks):
            vec = np.array([float(v) for v in block.split(",")])
            if vec.shape != (dim,) or not np.all(np.isfinite(vec)):
                raise SchemaError(f"{path}:{lineno}: bad feature block for {pos}")
            feats[pos] = vec
        gold = {}
        if cols[3] != "-":
            for pos, g in zip(GOVERNED[kind], cols[3].split(",")):
                if g != "-":
                    gold[pos] = file_labels.index(g)
        items.append(Collection(kind, ids, feats, gold))
    return Dataset.from_collections(kind, items, dim) if items else Dataset.empty(kind, dim)


def save_sentences(sentences: dict[int, Sentence], path: str | Path) -> None:
    lines = ["#id\ttopic\tlo\thi\tobs_lo\tobs_hi"]
    lines += [f"{s.id}\t{s.topic}\t{_fmt(s.lo)}\t{_fmt(s.hi)}\t{_fmt(s.obs[0])}\t{_fmt(s.obs[1])}"
              for s in sentences.values()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_sentences(path: str | Path) -> dict[int, Sentence]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        i, t, lo, hi, a, b = line.split("\t")
        out[int(i)] = Sentence(int(i), int(t), float(lo), float(hi), (float(a), float(b)))
    return out


def save_bundle(bundle: DatasetBundle, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, ds in bundle.splits().items():
        p = out / f"{name}.tsv"
        save_dataset(ds, p)
        written.append(p)
    p = out / "sentences.tsv"
    save_sentences(bundle.sentences, p)
    written.append(p)
    return written


def load_bundle(data_dir: str | Path) -> DatasetBundle:
    d = Path(data_dir)
    splits = {name: load_dataset(d / f"{name}.tsv") for name in DatasetBundle.SPLITS}
    sentences = load_sentences(d / "sentences.tsv") if (d / "sentences.tsv").exists() else {}
    return DatasetBundle(**splits, sentences=sentences)


def file_digest(paths: Iterable[str | Path]) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(x) for x in paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()
