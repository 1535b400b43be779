"""Command-line entry point: gen-corpus, train, evaluate, augment, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import gradcheck
from .augment import AugmentConfig, pair_rng, perturb_with_scores
from .corpus import CorpusFormatError, GeneratorConfig
from .evaluate import evaluate, noisy_context_eval
from .importance import format_dump, score_pairs
from .model import ModelConfig
from .objective import LossConfig
from .trainer import CheckpointError, TrainConfig, Trainer, TrainingDiverged, config_dict, load_model

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_SEED = 0

log = logging.getLogger("iada")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config file --------------------------------------------------------------

def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys may be dotted (``model.d_model``)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def _coerce(value: str, default, key: str):
    if isinstance(default, bool):
        low = value.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise UsageError(f"config field {key!r}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise UsageError(f"config field {key!r}: cannot parse {value!r} as {type(default).__name__}") from None
    return value


def apply_overrides(cfg, overrides: dict[str, str | object], prefix: str = ""):
    """Return ``cfg`` with dotted-key overrides applied to nested dataclasses."""
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    direct, nested = {}, {}
    for key, value in overrides.items():
        head, _, rest = key.partition(".")
        if head not in fields:
            raise UsageError(f"unknown config field {prefix + head!r}")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            current = getattr(cfg, head)
            if dataclasses.is_dataclass(current):
                raise UsageError(f"config field {prefix + head!r} is a section; use {prefix + head}.<field>")
            direct[head] = _coerce(value, current, prefix + head) if isinstance(value, str) else value
    for head, sub in nested.items():
        current = getattr(cfg, head)
        if not dataclasses.is_dataclass(current):
            raise UsageError(f"config field {prefix + head!r} has no sub-fields")
        direct[head] = apply_overrides(current, sub, prefix + head + ".")
    try:
        return dataclasses.replace(cfg, **direct)
    except ValueError as e:
        raise UsageError(str(e)) from None


# -- manifest -----------------------------------------------------------------

def manifest(command: str, config: dict, seed: int, config_path=None, corpus_path=None, checkpoint=None,
             extra: dict | None = None) -> dict:
    out = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "config": config,
        "seed": seed,
        "corpus_checksum": corpus_mod.checksum(corpus_path) if corpus_path else None,
        "checkpoint": str(checkpoint) if checkpoint else None,
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        out.update(extra)
    return out


def emit_manifest(m: dict, path) -> None:
    text = json.dumps(m, sort_keys=True, default=str)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text, file=sys.stderr)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {p}")
    return p


def _read_corpus(path):
    return corpus_mod.read(_require_file(path, "corpus"))


def _load_model(path):
    return load_model(_require_file(path, "checkpoint"))


# -- gen-corpus ---------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    over = {f.name: getattr(args, f.name) for f in dataclasses.fields(GeneratorConfig)
            if getattr(args, f.name, None) is not None}
    cfg = apply_overrides(GeneratorConfig(), over)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = corpus_mod.generate(cfg)
    for name, c in splits.items():
        corpus_mod.write(c, out / f"{name}.txt")
    m = manifest("gen-corpus", dataclasses.asdict(cfg), cfg.seed, corpus_path=out / "train.txt",
                 extra={"files": {k: str(out / f"{k}.txt") for k in splits}})
    emit_manifest(m, args.manifest or out / "manifest.json")
    print("\t".join(f"{k}={len(v)}" for k, v in splits.items()))
    return EXIT_OK


# -- train --------------------------------------------------------------------

_AUG_FLAGS = ("strategy", "direction", "p_ctx", "p_cur", "alpha", "p")
_LOSS_FLAGS = ("no_perturb_loss", "no_agreement_loss", "perturb_targets")


def build_train_config(args) -> TrainConfig:
    over: dict = {}
    if args.config:
        over.update(parse_config_text(_require_file(args.config, "config file").read_text(), args.config))
    cfg = apply_overrides(TrainConfig(), over)

    measure = args.measure or cfg.measure
    given = {k for k in _AUG_FLAGS + _LOSS_FLAGS + ("no_normalize", "score_refresh")
             if getattr(args, k) not in (None, False)}
    if measure == "none":
        bad = given - {"score_refresh"}
        if bad:
            raise UsageError(f"--{sorted(bad)[0].replace('_', '-')} needs an augmenting --measure")
    if measure == "uniform":
        for k in ("direction", "p_ctx", "p_cur", "alpha", "no_normalize", "score_refresh"):
            if k in given:
                raise UsageError(f"--{k.replace('_', '-')} conflicts with --measure uniform")
    elif "p" in given:
        raise UsageError("--p applies to --measure uniform only")
    if measure == "random" and "no_normalize" in given:
        raise UsageError("--no-normalize conflicts with --measure random (raw draws are already psi)")
    if args.no_perturb_loss and args.perturb_targets == "perturbed":
        raise UsageError("--perturb-targets perturbed conflicts with --no-perturb-loss")

    flat: dict = {"measure": measure}
    if measure != "none":
        flat["augment.measure"] = measure
    for k in _AUG_FLAGS:
        if getattr(args, k) is not None:
            flat[f"augment.{k}"] = getattr(args, k)
    if args.no_normalize:
        flat["augment.normalize"] = False
    if args.no_original_loss:
        flat["loss.original"] = False
    if args.no_perturb_loss:
        flat["loss.perturb"] = False
    if args.no_agreement_loss:
        flat["loss.agreement"] = False
    for src, dst in (("perturb_targets", "loss.perturb_targets"), ("loss_reduction", "loss.reduction"),
                     ("score_refresh", "score_refresh"), ("seed", "seed"), ("max_steps", "max_steps"),
                     ("max_epochs", "max_epochs"), ("batch_tokens", "batch_tokens"), ("lr", "lr"),
                     ("warmup", "warmup"), ("patience", "patience")):
        if getattr(args, src) is not None:
            flat[dst] = getattr(args, src)
    if args.seed is not None and "model.seed" not in over:
        flat["model.seed"] = args.seed
    if measure == "none" and args.no_original_loss:
        raise UsageError("--no-original-loss leaves plain Doc2Doc training with no loss term")
    return apply_overrides(cfg, flat)


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    train_c = _read_corpus(args.corpus)
    if args.valid == "train":
        valid_pairs = train_c.pairs
    elif args.valid:
        valid_pairs = _read_corpus(args.valid).pairs
    else:
        valid_pairs = []
    vocab = max(max(p.src_tokens + p.tgt_tokens) for p in train_c.pairs) + 1
    if vocab > cfg.model.vocab_size:
        raise DataError(f"corpus uses id {vocab - 1} but model.vocab_size is {cfg.model.vocab_size}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = Trainer.resume(_require_file(args.resume, "resume state"), cfg, train_c.pairs, valid_pairs)
    else:
        trainer = Trainer(cfg, train_c.pairs, valid_pairs)
    m = manifest("train", config_dict(cfg), cfg.seed, args.config, args.corpus, out)
    try:
        result = trainer.run(str(out))
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        emit_manifest({**m, "status": "diverged"}, args.manifest or f"{out}.manifest.json")
        return EXIT_NUMERIC
    if not out.exists():
        from .trainer import save_model

        save_model(out, result.model)
    Path(f"{out}.log").write_text("step\tnll_original\tnll_perturbed\tagreement\ttotal\n"
                                  + "".join(line + "\n" for line in result.log_lines), encoding="utf-8")
    emit_manifest({**m, "status": result.stopped, "steps": result.steps, "epochs": result.epochs,
                   "best_val": result.best_val}, args.manifest or f"{out}.manifest.json")
    last = result.log_lines[-1] if result.log_lines else "no steps"
    print(f"{result.stopped}\tsteps={result.steps}\tepochs={result.epochs}\tlast={last}")
    return EXIT_OK


# -- evaluate -----------------------------------------------------------------

def cmd_evaluate(args) -> int:
    model = _load_model(args.checkpoint)
    c = _read_corpus(args.corpus)
    seed = DEFAULT_SEED if args.seed is None else args.seed
    if args.noisy_context:
        report = noisy_context_eval(model, c, np.random.default_rng(seed), args.mask_source, args.context)
    else:
        report = evaluate(model, c, args.mask_source, args.context)
    for line in report.lines():
        print(line)
    if args.json:
        Path(args.json).write_text(report.json() + "\n", encoding="utf-8")
    emit_manifest(manifest("evaluate", {"noisy_context": args.noisy_context, "mask_source": args.mask_source,
                                       "context": args.context},
                           seed, corpus_path=args.corpus, checkpoint=args.checkpoint), args.manifest)
    return EXIT_OK


# -- augment ------------------------------------------------------------------

def cmd_augment(args) -> int:
    measure = args.measure or "gnorm"
    kw = {k: getattr(args, k) for k in _AUG_FLAGS if getattr(args, k) is not None}
    try:
        aug = AugmentConfig(measure=measure, normalize=not args.no_normalize, **kw)
    except ValueError as e:
        raise UsageError(str(e)) from None
    seed = DEFAULT_SEED if args.seed is None else args.seed
    c = _read_corpus(args.corpus)
    if args.checkpoint:
        model = _load_model(args.checkpoint)
    elif measure in ("tnorm", "gnorm"):
        raise UsageError(f"--measure {measure} needs --checkpoint")
    else:
        model = None
    vocab = model.cfg.vocab_size if model else args.vocab_size
    records, dump = [], []
    for r in c.records:
        pair = r.pair
        rng = pair_rng(seed, 0, pair)
        if measure in ("tnorm", "gnorm"):
            scores = score_pairs(model, [pair], measure)[0]
        elif measure == "random":
            scores = score_pairs(model, [pair], "random", np.random.default_rng([seed, pair.doc_id, pair.sent_id, 11]),
                                 aug.alpha)[0]
        else:
            scores = None
        view = perturb_with_scores(pair, scores, aug, rng, vocab)
        records.append(corpus_mod.record_from_pair(view.pair, r.corr_positions))
        if view.traces is not None:
            dump.extend(format_dump(pair, view.traces))
    corpus_mod.write(corpus_mod.Corpus(records), args.out)
    if args.dump:
        Path(args.dump).write_text("doc_id\tside\tposition\ttoken\tphi\tpsi\tp\n"
                                   + "".join(line + "\n" for line in dump), encoding="utf-8")
    emit_manifest(manifest("augment", dataclasses.asdict(aug), seed, corpus_path=args.corpus,
                           checkpoint=args.checkpoint), args.manifest)
    return EXIT_OK


# -- gradcheck ----------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    seed = DEFAULT_SEED if args.seed is None else args.seed
    probes = gradcheck.run(seed=seed, probes=args.probes, step=args.step)
    worst = max(probes, key=lambda p: p.rel_error)
    ok = gradcheck.passed(probes, args.tol)
    print(f"probes\t{len(probes)}")
    print(f"max_rel_error\t{worst.rel_error:.3g}\t{worst.where}{list(worst.index)}")
    print("status\t" + ("pass" if ok else "FAIL"))
    emit_manifest(manifest("gradcheck", {"probes": args.probes, "step": args.step, "tol": args.tol}, seed),
                  args.manifest)
    return EXIT_OK if ok else EXIT_NUMERIC


# -- parser -------------------------------------------------------------------

def _add_aug_flags(p):
    p.add_argument("--measure", choices=("tnorm", "gnorm", "random", "uniform", "none"))
    p.add_argument("--strategy", choices=("drop", "replace"))
    p.add_argument("--direction", choices=("ctx-down-cur-up", "ctx-up-cur-down", "both-down", "both-up"))
    p.add_argument("--p-ctx", type=float)
    p.add_argument("--p-cur", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--p", type=float, help="replacement probability of the uniform baseline")
    p.add_argument("--no-normalize", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iada", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="write synthetic train/valid/test splits")
    g.add_argument("--out", required=True, help="output directory")
    for f in dataclasses.fields(GeneratorConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "corr_rule":
            g.add_argument(flag, choices=("copy", "affine"))
        else:
            g.add_argument(flag, type=type(f.default))
    g.add_argument("--manifest")
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--corpus", required=True, help="training split file")
    t.add_argument("--valid", help="validation split file, or 'train' to validate on the training split")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config")
    t.add_argument("--resume", help="resume from a .last state file")
    _add_aug_flags(t)
    t.add_argument("--no-perturb-loss", action="store_true")
    t.add_argument("--no-agreement-loss", action="store_true")
    t.add_argument("--no-original-loss", action="store_true")
    t.add_argument("--perturb-targets", choices=("original", "perturbed"))
    t.add_argument("--score-refresh", choices=("step", "epoch"))
    t.add_argument("--loss-reduction", choices=("mean", "sum"))
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--batch-tokens", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--manifest")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="BLEU, memorization and planted recovery")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--noisy-context", action="store_true")
    e.add_argument("--mask-source", type=int, default=0, help="mask this many leading current-source tokens")
    e.add_argument("--context", choices=("gold", "previous"), default="previous",
                   help="target context: references, or the model's own earlier translations")
    e.add_argument("--seed", type=int)
    e.add_argument("--json")
    e.add_argument("--manifest")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("augment", help="write one perturbed view per record")
    a.add_argument("--corpus", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--checkpoint")
    a.add_argument("--dump", help="per-token phi/psi/p trace")
    a.add_argument("--vocab-size", type=int, default=ModelConfig().vocab_size)
    a.add_argument("--seed", type=int)
    a.add_argument("--manifest")
    _add_aug_flags(a)
    a.set_defaults(func=cmd_augment)

    c = sub.add_parser("gradcheck", help="finite-difference check of the autodiff")
    c.add_argument("--seed", type=int)
    c.add_argument("--probes", type=int, default=100)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--manifest")
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"iada {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorpusFormatError, CheckpointError) as e:
        print(f"iada {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"iada {args.command}: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
