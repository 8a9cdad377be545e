# src/usr_cli.py
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional, Sequence

from backend import (
    ALL_MODALITIES,
    ConfigError,
    Modality,
    USRError,
    apply_overrides,
    evaluate,
    decode_utterance,
    generate_corpus,
    load_checkpoint,
    load_data_manifest,
    load_manifest,
    manifest_from_dict,
    read_corpus,
    read_split,
    resolve_config,
    run_experiment,
    run_pretrain,
    save_manifest,
    train_semi,
    train_supervised,
    write_corpus,
    write_curve_report,
)
from backend.synth_data import LabelledSample

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with code 1 (argparse's default is 2, which is ours for config errors)."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _configure_logging() -> None:
    level = os.getenv("USR_LOG", "info").strip().lower()
    logging.basicConfig(
        level=_LOG_LEVELS.get(level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="", help="JSON manifest.")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                   help="Override a manifest field (value parsed as JSON). Repeatable.")


def _add_training_args(p: argparse.ArgumentParser) -> None:
    _add_config_args(p)
    p.add_argument("--seed", type=int, required=True, help="Run seed (required for training).")
    p.add_argument("--out", required=True, help="Output directory (manifest, metrics, checkpoints, reports).")
    p.add_argument("--data", default="", help="Corpus directory from make-data; fills corpus.* paths.")


def _parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    p = _ArgumentParser(description="Unified visual / auditory / audiovisual speech recognition on a toy corpus.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    s = sub.add_parser("make-data", help="Render the synthetic corpus.")
    _add_config_args(s)
    s.add_argument("--seed", type=int, default=None, help="Corpus seed (overrides corpus.seed).")
    s.add_argument("--out", required=True, help="Output directory for labelled/unlabelled/eval splits.")
    s.set_defaults(func=_cmd_make_data)

    for name, stage, helptext in (
        ("pretrain", "pretrain", "Self-supervised masked-prediction pre-training."),
        ("train", "supervised", "Supervised training on the labelled split."),
        ("train-semi", "semi", "Semi-supervised training with an EMA teacher."),
    ):
        s = sub.add_parser(name, help=helptext)
        _add_training_args(s)
        if stage == "semi":
            s.add_argument("--init", default="", help="Pre-training checkpoint to initialise from.")
        s.set_defaults(func=_cmd_train, stage=stage)

    for name, func, helptext in (
        ("evaluate", _cmd_evaluate, "WER of a checkpoint per modality."),
        ("decode", _cmd_decode, "Print hypotheses for eval utterances."),
    ):
        s = sub.add_parser(name, help=helptext)
        _add_config_args(s)
        s.add_argument("--ckpt", required=True, help="Checkpoint path.")
        s.add_argument("--modality", default="all", choices=["v", "a", "av", "all"])
        s.add_argument("--eval", default="", help="Eval split (defaults to the one the run was trained with).")
        s.add_argument("--snr-db", type=float, default=None, help="Corrupt audio with white noise at this SNR.")
        s.add_argument("--out", default="", help="Report directory (defaults to the checkpoint's directory).")
        s.add_argument("--workers", type=int, default=1, help="Utterances decoded in parallel.")
        s.add_argument("--limit", type=int, default=0, help="decode: only the first N utterances.")
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="CSV of per-epoch kept-fraction / accuracy / CTC-loss curves.")
    s.add_argument("--runs", nargs="+", required=True, help="Run directories containing metrics.jsonl.")
    s.add_argument("--out", default="curves.csv", help="CSV path.")
    s.set_defaults(func=_cmd_report)

    s = sub.add_parser("experiment", help="Multi-seed ablation (sharing, lambda_v, tau, stages, targets, noise).")
    s.add_argument("name", choices=["sharing", "lambda_v", "tau", "stages", "targets", "noise"])
    _add_config_args(s)
    s.add_argument("--data", default="", help="Corpus directory from make-data.")
    s.add_argument("--out", required=True, help="Output root.")
    s.add_argument("--seeds", type=int, nargs="+", default=[42, 43, 44])
    s.set_defaults(func=_cmd_experiment)

    return p.parse_args(argv)


def _corpus_overrides(data_dir: str) -> List[str]:
    if not data_dir:
        return []
    return [f"corpus.{split}={os.path.join(data_dir, split + '.bin')}" for split in ("labelled", "unlabelled", "eval")]


def _cmd_make_data(args: argparse.Namespace) -> int:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"corpus.seed={args.seed}")
    dm = load_data_manifest(args.config, overrides)
    corpus = generate_corpus(dm.corpus, dm.n_utterances, dm.labelled_fraction, dm.n_eval, dm.workers)
    paths = write_corpus(args.out, corpus)
    save_manifest(dm, args.out, "data_manifest.json")
    for split, path in paths.items():
        print(f"{split}: {path}", flush=True)
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    overrides = _corpus_overrides(args.data) + list(args.set)
    manifest = load_manifest(args.config, overrides)
    manifest = replace(manifest, stage=args.stage, out_dir=args.out,
                       optim=replace(manifest.optim, seed=args.seed))
    if args.stage == "pretrain":
        result = run_pretrain(manifest)
    elif args.stage == "semi":
        result = train_semi(manifest, init=args.init or None)
    else:
        result = train_supervised(manifest)

    for name, path in result.checkpoints.items():
        print(f"checkpoint[{name}]: {path}", flush=True)
    for modality, value in result.final_wer.items():
        print(f"WER[{modality}] = {value:.4f}", flush=True)
    print(f"metrics: {result.metrics_path}", flush=True)
    return EXIT_OK


def _load_for_eval(args: argparse.Namespace):
    model, corpus_cfg, payload = load_checkpoint(args.ckpt)
    if args.config:
        manifest = load_manifest(args.config, args.set)
    else:
        manifest = manifest_from_dict(apply_overrides(dict(payload["manifest"]), args.set))
    device = resolve_config(manifest.optim.device, manifest.optim.precision)
    model.to(device=device.device, dtype=device.dtype)

    eval_path = args.eval or manifest.corpus.eval
    if not eval_path:
        raise ConfigError("No eval split: pass --eval or train with corpus.eval set")
    samples = [s for s in read_split(eval_path)[0] if isinstance(s, LabelledSample)]
    modalities = ALL_MODALITIES if args.modality == "all" else (Modality(args.modality),)
    return model, corpus_cfg.tokenizer, manifest, device, samples, modalities


def _cmd_evaluate(args: argparse.Namespace) -> int:
    model, tok, manifest, device, samples, modalities = _load_for_eval(args)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.ckpt))
    suffix = "" if args.snr_db is None else f"_snr{args.snr_db:g}"
    for m in modalities:
        report = evaluate(model, samples, m, manifest.decode, tok, snr_db=args.snr_db,
                          seed=manifest.optim.seed, workers=args.workers,
                          device=device.device, dtype=device.dtype)
        path = report.write_jsonl(os.path.join(out_dir, f"eval_{m.value}{suffix}.jsonl"))
        print(f"WER[{m.value}] = {report.wer:.4f} ({report.edits}/{report.ref_tokens}) -> {path}", flush=True)
    return EXIT_OK


def _cmd_decode(args: argparse.Namespace) -> int:
    model, tok, manifest, device, samples, modalities = _load_for_eval(args)
    if args.limit > 0:
        samples = samples[: args.limit]
    for s in samples:
        for m in modalities:
            hyp, unfinished = decode_utterance(model, s, m, manifest.decode, tok, device.device, device.dtype)
            flag = " (unfinished)" if unfinished else ""
            print(f"{s.uid:06d} [{m.value}] ref={tok.detokenize(s.labels)} hyp={tok.detokenize(hyp)}{flag}", flush=True)
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    path = write_curve_report(args.runs, args.out)
    print(f"report: {path}", flush=True)
    return EXIT_OK


def _cmd_experiment(args: argparse.Namespace) -> int:
    base = load_manifest(args.config, _corpus_overrides(args.data) + list(args.set))
    paths = base.corpus
    if not paths.labelled:
        raise ConfigError("corpus.labelled must be set (or pass --data)")
    corpus = read_corpus(paths.labelled, paths.unlabelled, paths.eval)
    report = run_experiment(args.name, base, corpus, args.out, args.seeds)
    for variant, values in report.medians().items():
        summary = ", ".join(f"{k}={v:.4f}" for k, v in sorted(values.items()))
        print(f"{variant}: {summary}", flush=True)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    try:
        args = _parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        return args.func(args)
    except ConfigError as e:
        print(f"Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (USRError, RuntimeError, FileNotFoundError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
