"""Command-line entry point: ``mmnmt <subcommand> ...``.

Every subcommand returns exit status 0 on success and 1 when an input is
rejected (the reason goes to stderr).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields

from .autodiff import make_rng
from .bleu import corpus_bleu4
from .data import (FeaturePack, ParallelCorpus, SyntheticSpec, dump_attention, gen_synthetic,
                   load_corpus, make_batch, write_corpus)
from .decoder import greedy_decode
from .diagnostics import gradcheck_model
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train, translate_corpus

log = logging.getLogger("mmnmt")


class Rejected(Exception):
    """Raised for invalid user input; reported without a traceback."""


# ------------------------------------------------------------ config files

def parse_config_file(path) -> dict:
    """``key=value`` per line; blank lines and lines starting with # are skipped."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise Rejected(f"{path}:{n}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


def _coerce(value: str, default):
    if isinstance(default, bool):
        low = value.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise Rejected(f"not a boolean: {value!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if value.lower() == "none":
        return None
    try:
        return int(value)
    except ValueError:
        return value


def _typed(cls, raw: dict) -> dict:
    """Pick the keys of dataclass ``cls`` out of ``raw`` and convert them."""
    out = {}
    for f in fields(cls):
        if f.name in raw and raw[f.name] is not None:
            default = f.default if f.default is not None else ""
            out[f.name] = _coerce(str(raw[f.name]), default) if isinstance(raw[f.name], str) else raw[f.name]
    return out


# --------------------------------------------------------------- commands

def cmd_gen_data(args) -> None:
    spec = SyntheticSpec(grid=args.grid, img_dim=args.img_dim, n_classes=args.classes, n_words=args.words,
                         length=args.length, obj_slot=args.obj_slot, noise_std=args.noise,
                         seed=args.seed, n_train=args.n_train, n_dev=args.n_dev, n_test=args.n_test)
    os.makedirs(args.out, exist_ok=True)
    for name, corpus in gen_synthetic(spec).items():
        write_corpus(corpus, os.path.join(args.out, name))
    print(f"wrote train/dev/test to {args.out}")


def _load_split(prefix, src_vocab=None, tgt_vocab=None, expect_locations=None, expect_dim=None):
    feats = f"{prefix}.feats"
    return load_corpus(f"{prefix}.src", f"{prefix}.tgt", feats if os.path.exists(feats) else None,
                       src_vocab=src_vocab, tgt_vocab=tgt_vocab, expect_locations=expect_locations,
                       expect_dim=expect_dim, meta_path=f"{prefix}.meta.tsv")


TRAIN_KEYS = ("train", "dev", "checkpoint", "log")


def cmd_train(args) -> None:
    raw = parse_config_file(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise Rejected(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    for key in TRAIN_KEYS:
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    unknown = set(raw) - set(TRAIN_KEYS) - {f.name for f in fields(ModelConfig)} - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise Rejected(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key in ("train", "dev", "checkpoint"):
        if key not in raw:
            raise Rejected(f"missing required setting {key!r}")
    train_set = _load_split(raw["train"])
    src_vocab, tgt_vocab = train_set.src_vocab, train_set.tgt_vocab
    dev_set = _load_split(raw["dev"], src_vocab, tgt_vocab)
    model_raw = {k: v for k, v in raw.items() if k not in ("src_vocab", "tgt_vocab")}
    model_kw = _typed(ModelConfig, model_raw)
    if train_set.features is not None:
        model_kw.setdefault("img_dim", train_set.features.shape[-1])
    else:
        model_kw["img_attention"] = "none"
    mcfg = ModelConfig(src_vocab=len(src_vocab), tgt_vocab=len(tgt_vocab), **model_kw)
    tcfg = TrainConfig(**_typed(TrainConfig, raw))
    model = Model(mcfg, make_rng(tcfg.seed))
    result = train(model, train_set, dev_set, tcfg, src_vocab, tgt_vocab, log_path=raw.get("log"))
    save_checkpoint(raw["checkpoint"], model, src_vocab, tgt_vocab,
                    {"best_epoch": result.best_epoch, "best_bleu": result.best_bleu})
    print(f"best dev BLEU {result.best_bleu:.2f} at epoch {result.best_epoch}; saved {raw['checkpoint']}")


def _read_features(path, model: Model):
    if path is None:
        if model.config.multimodal:
            raise Rejected("this model attends to images; --features is required")
        return None
    return FeaturePack.read(path, expect_dim=model.config.img_dim).features


def cmd_translate(args) -> None:
    model, src_vocab, tgt_vocab, _ = load_checkpoint(args.checkpoint)
    with open(args.src, encoding="utf-8") as f:
        src = [line.split() for line in f.read().splitlines()]
    feats = _read_features(args.features, model)
    if feats is not None and len(feats) != len(src):
        raise Rejected(f"{args.features} holds {len(feats)} grids for {len(src)} sentences")
    corpus = ParallelCorpus(src, [[] for _ in src], feats, None, {})
    hyps = translate_corpus(model, corpus, src_vocab, tgt_vocab, args.max_len)
    text = "".join(" ".join(h) + "\n" for h in hyps)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def cmd_evaluate(args) -> None:
    with open(args.hyp, encoding="utf-8") as f:
        hyps = f.read().splitlines()
    with open(args.ref, encoding="utf-8") as f:
        refs = f.read().splitlines()
    report = corpus_bleu4(hyps, refs)
    tsv = report.to_tsv()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(tsv)
    sys.stdout.write(tsv)


def cmd_attn_dump(args) -> None:
    model, src_vocab, tgt_vocab, _ = load_checkpoint(args.checkpoint)
    if not model.config.multimodal:
        raise Rejected("attn-dump needs a model with image attention")
    feats = _read_features(args.features, model)
    if not 0 <= args.index < len(feats):
        raise Rejected(f"--index {args.index} out of range for {len(feats)} grids")
    corpus = ParallelCorpus([args.sentence.split()], [[]], feats[args.index: args.index + 1], None, {})
    batch = make_batch(corpus, [0], src_vocab, tgt_vocab)
    out, traces = greedy_decode(model, batch.src, batch.feats, args.max_len, batch.src_mask)
    tokens = tgt_vocab.decode(traces[0].tokens, strip_eos=False)
    paths = dump_attention(traces[0], args.grid, args.out, tokens)
    print(" ".join(tgt_vocab.decode(out[0])))
    print(f"wrote {len(paths)} files to {args.out}")


def cmd_gradcheck(args) -> int:
    modes = args.mode or ["soft", "local", "soft+gating", "soft+grounding", "soft+doubling"]
    failed = 0
    for mode in modes:
        res = gradcheck_model(mode, seed=args.seed, tol=args.tol, hidden=args.hidden, embed=args.embed,
                              src_len=args.src_len, tgt_len=args.tgt_len, n_locations=args.locations,
                              img_dim=args.img_dim, vocab=args.vocab)
        print(f"{mode}\t{res.max_rel_error:.3e}\t{'PASS' if res.ok else 'FAIL'}")
        failed += not res.ok
    return 1 if failed else 0


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmnmt", description="Multimodal attentive NMT workbench")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the planted-signal synthetic task")
    g.add_argument("--out", required=True)
    g.add_argument("--grid", type=int, default=4)
    g.add_argument("--img-dim", type=int, default=8)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--words", type=int, default=20)
    g.add_argument("--length", type=int, default=6)
    g.add_argument("--obj-slot", type=int, default=2)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=1234)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-dev", type=int, default=200)
    g.add_argument("--n-test", type=int, default=200)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model; key=value config file, flags override")
    t.add_argument("--config")
    t.add_argument("--train", help="training data prefix (<prefix>.src/.tgt/.feats)")
    t.add_argument("--dev", help="development data prefix")
    t.add_argument("--checkpoint", help="output checkpoint path")
    t.add_argument("--log", help="per-epoch log path")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="greedy-decode a source file")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--src", required=True)
    tr.add_argument("--features")
    tr.add_argument("--out")
    tr.add_argument("--max-len", type=int, default=50)
    tr.set_defaults(func=cmd_translate)

    e = sub.add_parser("evaluate", help="corpus BLEU-4 of a hypothesis file against a reference file")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--out", help="write the TSV report here as well")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("attn-dump", help="decode one sentence and write its image attention maps")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--sentence", required=True)
    a.add_argument("--features", required=True)
    a.add_argument("--index", type=int, default=0, help="which grid of the feature pack")
    a.add_argument("--grid", type=int)
    a.add_argument("--out", required=True)
    a.add_argument("--max-len", type=int, default=50)
    a.set_defaults(func=cmd_attn_dump)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full-model gradient")
    c.add_argument("--mode", action="append",
                   help="soft, local, hard, none, soft+gating, soft+grounding, soft+doubling (repeatable)")
    c.add_argument("--hidden", type=int, default=8)
    c.add_argument("--embed", type=int, default=6)
    c.add_argument("--src-len", type=int, default=4)
    c.add_argument("--tgt-len", type=int, default=4)
    c.add_argument("--locations", type=int, default=4)
    c.add_argument("--img-dim", type=int, default=8)
    c.add_argument("--vocab", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        status = args.func(args)
    except (Rejected, ValueError, IndexError, OSError) as exc:
        print(f"mmnmt {args.command}: {exc}", file=sys.stderr)
        return 1
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
