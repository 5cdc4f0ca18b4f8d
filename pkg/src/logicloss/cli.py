"""``logicloss`` command line: gen, compile, train, eval and replay.

Every command that takes ``--out`` writes ``manifest.json`` next to its outputs.
The manifest records the full argument list, the resolved configuration, the
seed and git-style content hashes of all inputs and outputs. ``replay`` reruns a
manifest into a fresh directory and reports whether the outputs match byte for
byte.

Exit codes: 0 success, 1 numerical failure, 2 usage or IO error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .autodiff import NumericalError
from .classifier import load_checkpoint, save_checkpoint
from .data import (
    DatasetBundle, GenConfig, GenerationError, SchemaError, generate, load_bundle, save_bundle,
)
from .logic import RuleSet, RuleSyntaxError, parse_rule_file
from .metrics import (
    coverage, cross_table, format_kv, format_table, global_violation, triple_marginals,
)
from .rules import rule_text
from .tnorm import TNorm, compile_rules
from .trainer import TrainConfig, TrainingError, parse_config, train

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"
log = logging.getLogger("logicloss")


class UsageError(Exception):
    pass


def git_blob_hash(data: bytes) -> str:
    """Hash as ``git hash-object`` would: sha1 over ``blob <len>\\0<data>``."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def _hash_files(paths: Sequence[Path], root: Path | None = None) -> dict[str, str]:
    out = {}
    for p in sorted(paths):
        key = str(p.relative_to(root)) if root is not None else str(p)
        out[key] = git_blob_hash(p.read_bytes())
    return out


def _data_files(d: Path) -> list[Path]:
    files = [d / f"{s}.tsv" for s in DatasetBundle.SPLITS]
    if (d / "sentences.tsv").exists():
        files.append(d / "sentences.tsv")
    missing = [str(p) for p in files if not p.exists()]
    if missing:
        raise UsageError(f"data directory is missing {', '.join(missing)}")
    return files


def _load_rules(path: str | None) -> tuple[RuleSet, str, Path | None]:
    if path is None:
        text = rule_text("nli.rules")
        return parse_rule_file(text), text, None
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"rule file not found: {path}")
    text = p.read_text(encoding="utf-8")
    return parse_rule_file(text), text, p


def _write_manifest(out: Path, argv: Sequence[str], command: str, config: dict, seed: int | None,
                    inputs: dict[str, str], outputs: Sequence[Path]) -> Path:
    manifest = {
        "tool": "logicloss",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": _hash_files(outputs, out),
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# commands


def run_gen(args, argv) -> int:
    sizes = {"n_train": args.train, "n_dev": args.dev, "n_test": args.test, "n_unlabeled": args.unlabeled}
    for k, v in sizes.items():
        if v is not None and v < 0:
            raise UsageError(f"--{k[2:]} must be >= 0, got {v}")
    overrides = {k: v for k, v in sizes.items() if v is not None}
    if args.noise is not None:
        overrides["noise"] = args.noise
    cfg = GenConfig(**overrides)
    bundle = generate(cfg, args.seed)
    out = Path(args.out)
    written = save_bundle(bundle, out)
    config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}
    _write_manifest(out, argv, "gen", config, args.seed, {}, written)
    print(f"wrote {len(written)} files to {out} "
          + " ".join(f"{name}={len(ds)}" for name, ds in bundle.splits().items()))
    return EXIT_OK


def run_compile(args, argv) -> int:
    rs, text, path = _load_rules(args.rules)
    tnorm = TNorm.parse(args.tnorm)
    parts = []
    for c in compile_rules(rs, tnorm, fuse_abs=not args.no_fuse):
        parts.append(c.render())
        if args.dump:
            parts.append(f";; rule {c.name} ({tnorm.value})")
            parts.append(c.dump())
    body = "\n".join(parts) + "\n"
    sys.stdout.write(body)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        target = out / "compiled.txt"
        target.write_text(body, encoding="utf-8")
        inputs = {str(path) if path else "<builtin>/nli.rules": git_blob_hash(text.encode("utf-8"))}
        _write_manifest(out, argv, "compile", {"tnorm": tnorm.value, "fuse_abs": not args.no_fuse},
                        None, inputs, [target])
    return EXIT_OK


def _train_config(args) -> tuple[TrainConfig, dict[str, str], dict[str, str]]:
    inputs = {}
    cfg, data_section = TrainConfig(), {}
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise UsageError(f"config file not found: {args.config}")
        raw = p.read_bytes()
        inputs[str(p)] = git_blob_hash(raw)
        try:
            cfg, data_section = parse_config(raw.decode("utf-8"))
        except ValueError as e:
            raise UsageError(f"{args.config}: {e}") from e
    if args.constraints is not None:
        try:
            cfg = cfg.with_constraints(args.constraints)
        except ValueError as e:
            raise UsageError(str(e)) from e
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg, data_section, inputs


def run_train(args, argv) -> int:
    cfg, data_section, inputs = _train_config(args)
    data_dir = args.data or data_section.get("dir")
    if not data_dir:
        raise UsageError("no data directory: pass --data or set dir in [data]")
    files = _data_files(Path(data_dir))
    inputs.update(_hash_files(files))
    rs, text, rpath = _load_rules(args.rules)
    inputs[str(rpath) if rpath else "<builtin>/nli.rules"] = git_blob_hash(text.encode("utf-8"))
    bundle = load_bundle(data_dir)
    tnorm = TNorm.parse(args.tnorm)
    params, trainlog = train(cfg, bundle, rs, tnorm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, tsv, ini = out / "model.ckpt", out / "trainlog.tsv", out / "config.ini"
    save_checkpoint(params, ckpt)
    tsv.write_text(trainlog.to_tsv(), encoding="utf-8")
    ini.write_text(cfg.to_ini(), encoding="utf-8")
    config = {"train": cfg.to_ini(), "tnorm": tnorm.value, "data": str(data_dir)}
    _write_manifest(out, argv, "train", config, cfg.seed, inputs, [ckpt, tsv, ini])
    last = trainlog.records[-1] if trainlog.records else None
    if last is not None:
        print(f"trained {last.epoch} epochs; objective={last.objective:.6f} dev_accuracy={last.dev_accuracy}")
    return EXIT_OK


def _eval_text(params, bundle: DatasetBundle, rs: RuleSet, tnorm: TNorm) -> tuple[str, str]:
    compiled = {c.name: c for c in compile_rules(rs, tnorm)}
    metrics: dict[str, object] = {}
    test = global_violation(bundle.test, rs, params)
    metrics["accuracy"] = test.accuracy
    for tag, ds in (("U", bundle.U), ("T", bundle.T)):
        if len(ds) == 0:
            continue
        rep = global_violation(ds, rs, params)
        for k, v in rep.metrics().items():
            if k.startswith(("rho_", "tau_")):
                metrics[k] = v
    cov = {}
    for c in compiled.values():
        if c.needs_gold:
            continue
        ds = bundle.T if c.rule.arity == 3 else bundle.U
        if len(ds):
            cov[c.name] = coverage(ds, c, params)
    for name, r in cov.items():
        metrics[f"coverage_{name}"] = r.coverage
    sections = ["# violation report", format_table(metrics).rstrip()]
    sections += ["", "# coverage"]
    sections += [f"{r.rule}\t{r.positive}/{r.total}\t{r.coverage:.4f}" for r in cov.values()]
    if len(bundle.U):
        sections += ["", "# cross table on U", cross_table(bundle.U, params, rs.labels).to_text()]
    if len(bundle.T):
        sections += ["", "# prediction marginals on T"]
        for pos, counts in triple_marginals(bundle.T, params, rs.labels).items():
            sections.append(f"{pos}\t" + "\t".join(f"{l}={int(n)}" for l, n in zip(rs.labels, counts)))
    return format_kv(metrics), "\n".join(sections) + "\n"


def run_eval(args, argv) -> int:
    ck = Path(args.checkpoint)
    if not ck.is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    files = _data_files(Path(args.data))
    inputs = _hash_files([ck, *files])
    rs, text, rpath = _load_rules(args.rules)
    inputs[str(rpath) if rpath else "<builtin>/nli.rules"] = git_blob_hash(text.encode("utf-8"))
    params = load_checkpoint(ck)
    bundle = load_bundle(args.data)
    tnorm = TNorm.parse(args.tnorm)
    kv, table = _eval_text(params, bundle, rs, tnorm)
    sys.stdout.write(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        a, b = out / "metrics.txt", out / "report.txt"
        a.write_text(kv, encoding="utf-8")
        b.write_text(table, encoding="utf-8")
        _write_manifest(out, argv, "eval", {"tnorm": tnorm.value}, None, inputs, [a, b])
    return EXIT_OK


def run_replay(args, argv) -> int:
    """Rerun a manifest's command into ``--out`` and compare output hashes."""
    mpath = Path(args.manifest)
    if not mpath.is_file():
        raise UsageError(f"manifest not found: {args.manifest}")
    m = json.loads(mpath.read_text(encoding="utf-8"))
    old = list(m["argv"])
    if "--out" not in old:
        raise UsageError("manifest has no --out; nothing to compare")
    for name, digest in m.get("inputs", {}).items():
        if name.startswith("<builtin>"):
            continue
        p = Path(name)
        if not p.is_file() or git_blob_hash(p.read_bytes()) != digest:
            raise UsageError(f"input {name} is missing or changed since the manifest was written")
    new = old.copy()
    new[new.index("--out") + 1] = args.out
    code = main(new)
    if code != EXIT_OK:
        return code
    fresh = json.loads((Path(args.out) / MANIFEST).read_text(encoding="utf-8"))
    diff = sorted(k for k in set(m["outputs"]) | set(fresh["outputs"])
                  if m["outputs"].get(k) != fresh["outputs"].get(k))
    if diff:
        print("replay differs: " + ", ".join(diff), file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"replay identical: {len(fresh['outputs'])} outputs")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="logicloss", description="Compile logic rules into losses, train and measure consistency.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic bundle")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train", type=int)
    g.add_argument("--dev", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--unlabeled", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--out", required=True)

    c = sub.add_parser("compile", help="print loss renderings (and tape dumps) for a rule file")
    c.add_argument("--rules")
    c.add_argument("--tnorm", default="product", help="product, goedel or lukasiewicz")
    c.add_argument("--dump", action="store_true")
    c.add_argument("--no-fuse", action="store_true", help="keep the symmetric ReLU pair instead of |.|")
    c.add_argument("--out")

    t = sub.add_parser("train", help="train a classifier")
    t.add_argument("--config")
    t.add_argument("--constraints", help="none or a subset of M,U,T")
    t.add_argument("--data")
    t.add_argument("--rules")
    t.add_argument("--tnorm", default="product", help="product, goedel or lukasiewicz")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="violation, coverage and cross-table reports")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--rules")
    e.add_argument("--tnorm", default="product", help="product, goedel or lukasiewicz")
    e.add_argument("--out")

    r = sub.add_parser("replay", help="rerun a manifest and compare outputs")
    r.add_argument("manifest")
    r.add_argument("--out", required=True)
    return p


COMMANDS = {"gen": run_gen, "compile": run_compile, "train": run_train, "eval": run_eval, "replay": run_replay}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("LOGICLOSS_VERBOSE", "").strip()
    logging.basicConfig(level=logging.DEBUG if level not in ("", "0") else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, argv)
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except (TrainingError, NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RuleSyntaxError as e:
        print(f"rule syntax error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, SchemaError, GenerationError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
