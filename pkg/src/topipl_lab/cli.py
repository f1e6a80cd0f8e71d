"""Command line entry point: ``topipl-lab <verb> ...``.

Exit status is 0 on success, 1 on runtime failure and 2 on usage errors.
Values from ``--config`` are overridden by explicit flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from topipl_lab import checkpoints as ckpt
from topipl_lab import manifest as mf
from topipl_lab.metrics import EMPTY_REPORT, char_errors, word_errors
from topipl_lab.model import ShapeError, Tokenizer
from topipl_lab.synthdata import SynthSpec, gen_corpus
from topipl_lab.trainer import TrainConfig, decode_examples, prepare, run_strategy

log = logging.getLogger("topipl_lab")


class UsageError(Exception):
    pass


def _load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if not isinstance(d, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return d


def _dump(obj, path=None, to_stderr=False) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        (sys.stderr if to_stderr else sys.stdout).write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- verbs


def cmd_gen_data(args) -> None:
    cfg = {}
    for src in (args.config, args.spec):
        if src:
            cfg.update(_load_json(src))
    overrides = {
        "alphabet_size": args.alphabet_size,
        "feat_dim": args.feat_dim,
        "noise_sigma": args.noise_sigma,
        "fps": args.fps,
        "seed": args.seed,
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    sizes = dict(cfg.get("split_sizes", SynthSpec().split_sizes))
    for split in ("labeled", "unlabeled", "dev", "test"):
        v = getattr(args, f"n_{split}")
        if v is not None:
            sizes[split] = v
    cfg["split_sizes"] = sizes
    spec = SynthSpec.from_json(cfg)
    corpus = gen_corpus(spec, args.out)
    for split in ("labeled", "unlabeled", "dev", "test"):
        print(f"{split}\t{len(getattr(corpus, split))}")


def cmd_filter(args) -> None:
    m = mf.read_manifest(args.inp)
    stage = args.stage
    if stage in ("cr", "wer") and not (args.hyps and Path(args.hyps).exists()):
        raise UsageError(f"--stage {stage} needs an existing --hyps file")
    if stage == "duration":
        if args.max_dur is None:
            raise UsageError("--stage duration needs --max-dur")
        out, report = mf.filter_duration(m, args.max_dur)
    elif stage == "lang":
        if args.lang is None:
            raise UsageError("--stage lang needs --lang")
        out, report = mf.filter_language(m, args.lang)
    elif stage == "cr":
        if args.cr_low is None or args.cr_high is None:
            raise UsageError("--stage cr needs --cr-low and --cr-high")
        out, report = mf.filter_char_rate(
            m, mf.read_hyps(args.hyps), args.cr_low, args.cr_high, not args.no_whitespace
        )
    else:
        if args.wer_threshold is None:
            raise UsageError("--stage wer needs --wer-threshold")
        out, report = mf.filter_wer(m, mf.read_hyps(args.hyps), args.wer_threshold)
    mf.write_manifest(out, args.out)
    _dump(report.to_json(), args.report, to_stderr=True)


def cmd_segment(args) -> None:
    m = mf.read_manifest(args.inp)
    out = mf.segment_manifest(
        m, min_s=args.min_dur, max_s=args.max_dur, boundary_chars=frozenset(args.boundary_chars), fps=args.fps
    )
    mf.write_manifest(out, args.out)
    _dump({"stage": "segment", "parents": len(m), "segments": len(out)}, args.report, to_stderr=True)


TRAIN_FLAGS = {
    "strategy": "strategy",
    "n_epochs": "n_epochs",
    "m_epochs": "m_epochs",
    "batch_size": "batch_size",
    "base_max_lr": "base_max_lr",
    "min_lr": "min_lr",
    "dropout": "dropout_p",
    "p_cache": "p_cache",
    "top_n": "top_n",
    "ema_alpha": "ema_alpha",
    "hidden": "hidden",
    "context": "context",
    "seed": "seed",
}


def resolve_train_config(args) -> TrainConfig:
    cfg = _load_json(args.config) if args.config else {}
    for flag, key in TRAIN_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            cfg[key] = v
    if args.base_max_lr is not None:
        # an explicit base rate re-derives the per-stage schedule
        cfg.pop("max_lr", None)
    try:
        return TrainConfig.from_json(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc


def cmd_train(args) -> None:
    cfg = resolve_train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(cfg.to_json(), out / "config.json")
    labeled = mf.read_manifest(args.labeled)
    unlabeled = mf.read_manifest(args.unlabeled)
    dev = mf.read_manifest(args.dev)
    res = run_strategy(cfg, labeled, unlabeled, dev, out_dir=out, base_dir=Path(args.labeled).parent)
    summary = {"strategy": cfg.strategy, "student_dev_wer": res.student.val_wer, "epochs": res.log.last_epoch}
    if res.teacher is not None:
        summary["teacher_dev_wer"] = res.teacher.val_wer
    _dump(summary)


def _tokenizer_for(rec: ckpt.CheckpointRecord) -> Tokenizer:
    symbols = rec.meta.get("symbols")
    if symbols is None:
        raise ValueError("checkpoint carries no tokenizer symbols")
    return Tokenizer.from_string(symbols)


def cmd_decode(args) -> None:
    rec = ckpt.load(args.ckpt)
    tok = _tokenizer_for(rec)
    m = mf.read_manifest(args.inp)
    examples = prepare(m, None, False, Path(args.inp).parent)
    for e in examples:
        if e.features.shape[1] != rec.params.feat_dim:
            raise ShapeError(
                f"{e.id}: features have {e.features.shape[1]} channels, checkpoint expects {rec.params.feat_dim}"
            )
    mf.write_hyps(decode_examples(rec.params, examples, tok), args.out)


def _error_report(refs: dict, hyps: dict) -> dict:
    missing = [k for k in refs if k not in hyps]
    if missing:
        raise LookupError(f"missing hypotheses for ids: {', '.join(missing)}")
    w = c = EMPTY_REPORT
    for uid, ref in refs.items():
        w = w + word_errors(ref, hyps[uid])
        c = c + char_errors(ref, hyps[uid])
    return {
        "utterances": len(refs),
        "wer": w.rate,
        "cer": c.rate,
        "word": w.as_dict(),
        "char": c.as_dict(),
    }


def cmd_eval(args) -> None:
    refs = {u.id: u.text or "" for u in mf.read_manifest(args.refs)}
    _dump(_error_report(refs, mf.read_hyps(args.hyps)))


def cmd_avg_ckpt(args) -> None:
    recs = [ckpt.load(p) for p in args.inp]
    # the average has no measured WER of its own; carry the best member's
    out = ckpt.CheckpointRecord(
        ckpt.average(recs),
        max(r.epoch for r in recs),
        min(r.val_wer for r in recs),
        recs[0].stage,
        meta=dict(recs[0].meta),
    )
    ckpt.save(out, args.out)


def cmd_pl_stats(args) -> None:
    if not Path(args.sidecar).exists():
        raise UsageError(f"sidecar not found: {args.sidecar}")
    refs = mf.read_hyps(args.sidecar)
    hyps = mf.read_hyps(args.hyps)
    report = _error_report(refs, hyps)
    report["empty_hypotheses"] = sum(1 for k in refs if not hyps[k].strip())
    _dump(report)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--config", default=None, help="JSON config file; flags override its values")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="topipl-lab", description="Semi-supervised CTC pseudo-labelling lab")
    sub = p.add_subparsers(dest="verb", required=True, metavar="VERB")

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--spec", default=None, help="JSON synthetic corpus spec")
    g.add_argument("--alphabet-size", type=int)
    g.add_argument("--feat-dim", type=int)
    g.add_argument("--noise-sigma", type=float)
    g.add_argument("--fps", type=float)
    for split in ("labeled", "unlabeled", "dev", "test"):
        g.add_argument(f"--n-{split}", type=int, dest=f"n_{split}")
    g.set_defaults(func=cmd_gen_data)

    f = sub.add_parser("filter", parents=[common], help="apply one manifest filter stage")
    f.add_argument("--in", dest="inp", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--stage", required=True, choices=["duration", "lang", "cr", "wer"])
    f.add_argument("--max-dur", type=float)
    f.add_argument("--lang")
    f.add_argument("--cr-low", type=float)
    f.add_argument("--cr-high", type=float)
    f.add_argument("--no-whitespace", action="store_true", help="exclude whitespace from character counts")
    f.add_argument("--wer-threshold", type=float)
    f.add_argument("--hyps")
    f.add_argument("--report")
    f.set_defaults(func=cmd_filter)

    s = sub.add_parser("segment", parents=[common], help="cut utterances into sentence segments")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min-dur", type=float, default=1.0)
    s.add_argument("--max-dur", type=float, default=20.0)
    s.add_argument("--boundary-chars", default=".!?…")
    s.add_argument("--fps", type=float)
    s.add_argument("--report")
    s.set_defaults(func=cmd_segment)

    t = sub.add_parser("train", parents=[common], help="run a training strategy")
    t.add_argument("--strategy", choices=["baseline", "pl_once", "fs", "ema", "topipl"])
    t.add_argument("--labeled", required=True)
    t.add_argument("--unlabeled", required=True)
    t.add_argument("--dev", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--n-epochs", type=int)
    t.add_argument("--m-epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--base-max-lr", type=float)
    t.add_argument("--min-lr", type=float)
    t.add_argument("--dropout", type=float)
    t.add_argument("--p-cache", type=float)
    t.add_argument("--top-n", type=int)
    t.add_argument("--ema-alpha", type=float)
    t.add_argument("--hidden", type=int)
    t.add_argument("--context", type=int)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", parents=[common], help="greedy-decode a manifest")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", parents=[common], help="pooled WER/CER of hypotheses")
    e.add_argument("--refs", required=True)
    e.add_argument("--hyps", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("avg-ckpt", parents=[common], help="average checkpoints")
    a.add_argument("--in", dest="inp", nargs="+", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_avg_ckpt)

    q = sub.add_parser("pl-stats", parents=[common], help="pseudo-label quality against hidden refs")
    q.add_argument("--hyps", required=True)
    q.add_argument("--sidecar", required=True)
    q.set_defaults(func=cmd_pl_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"topipl-lab {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"topipl-lab {args.verb}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
