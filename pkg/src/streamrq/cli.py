"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError
from .chunking import ChunkPolicy
from .config import load_config, section
from .corpus import make_corpus, read_manifest
from .ctc import CTCInfeasibleError
from .evaluation import (DecodeOptions, evaluate, load_features, sweep, sweep_annotations,
                         write_sweep_csv)
from .estimators import BestRQPretrainer, CTCRecognizer
from .frontend import AudioFormatError, TooShortError, load_wav
from .model import NotFinetunedError, SpeechModel
from .ngram import ArpaParseError, export_arpa, import_arpa, train_ngram
from .streaming import StreamConfig, open_session
from .tensor import ConfigError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("streamrq")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _left(value: str):
    return None if str(value).lower() in ("full", "none") else int(value)


def _items(value) -> list:
    """Comma-separated flag text, or a sequence already parsed from a config file."""
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [v.strip() for v in str(value).split(",") if v.strip()]


def _int_list(value) -> list:
    return [int(v) for v in _items(value)]


def _left_list(value) -> list:
    return [_left(v) for v in _items(value)]


def _policy(args) -> ChunkPolicy:
    if getattr(args, "context", None) == "full" or args.chunk_size is None:
        if args.chunk_size is not None and getattr(args, "context", None) == "full":
            raise UsageError("--context full conflicts with --chunk-size")
        return ChunkPolicy.full()
    return ChunkPolicy.chunked(args.chunk_size, _left(args.left_chunks))


def _add_policy_flags(p):
    p.add_argument("--context", choices=["full"], help="decode with full context")
    p.add_argument("--chunk-size", type=int, help="chunk size in encoder frames (40 ms each)")
    p.add_argument("--left-chunks", default="full", help="left chunks visible, or 'full'")


def _add_decode_flags(p):
    p.add_argument("--lm", help="ARPA language model for shallow fusion")
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--beam", type=int, default=32)
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config; flags override its values")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="streamrq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-corpus", parents=[common], help="write a synthetic pseudo-ATC corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--max-words", type=int)
    p.add_argument("--snr-db", type=float, default=20.0)

    p = sub.add_parser("lm-train", parents=[common], help="train a word n-gram LM to ARPA")
    p.add_argument("--text", nargs="+", required=True)
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="BEST-RQ pre-training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--preset", choices=["tiny", "base", "large"], default="tiny")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--codebook-size", type=int, default=8192)
    p.add_argument("--p-full", type=float, default=0.40)
    p.add_argument("--span-segments", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="CSV loss log (default: <out>.loss.csv)")

    p = sub.add_parser("finetune", parents=[common], help="CTC fine-tuning")
    p.add_argument("--manifest", required=True)
    p.add_argument("--dev")
    p.add_argument("--init", help="pre-trained checkpoint (random init if omitted)")
    p.add_argument("--preset", choices=["tiny", "base", "large"], default="tiny")
    p.add_argument("--policy-phase", choices=["finetune", "pretrain", "full"], default="finetune")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--encoder-lr", type=float, default=1e-4)
    p.add_argument("--probe-lr", type=float, default=8e-4)
    p.add_argument("--probe-hidden", type=int, default=1024)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--target-wer", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="CSV loss log (default: <out>.loss.csv)")

    p = sub.add_parser("decode", parents=[common], help="decode a manifest to JSONL hypotheses")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="JSONL output (default: stdout)")
    _add_policy_flags(p)
    _add_decode_flags(p)

    p = sub.add_parser("stream", parents=[common], help="simulate live streaming from a WAV file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--chunk-size", type=int, required=True)
    p.add_argument("--left-chunks", default="full")
    p.add_argument("--pushes-ms", type=float, default=100.0)

    p = sub.add_parser("evaluate", parents=[common], help="WER overall and per speaker role")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", help="write the plain-text report here as well")
    p.add_argument("--hyps", help="JSONL hypotheses output")
    p.add_argument("--streaming", action="store_true", help="decode through the streaming runtime")
    _add_policy_flags(p)
    _add_decode_flags(p)

    p = sub.add_parser("sweep", parents=[common], help="WER over a chunk-size x left-context grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--chunk-sizes", default="8,16,32")
    p.add_argument("--left-contexts", default="1,2,4,8,16,full")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--workers", type=int, default=1)
    return parser


def _write_loss_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "loss", "policy_mode", "chunk_size", "left"])
        w.writeheader()
        w.writerows(rows)


def _manifest_features(path):
    entries = read_manifest(path)
    if not entries:
        raise ValueError(f"{path}: empty manifest")
    return entries, [load_features(e.audio) for e in entries]


def _load_lm(args):
    if not getattr(args, "lm", None):
        return None
    return import_arpa(args.lm)


def cmd_synth_corpus(args):
    path = make_corpus(args.out, args.n, seed=args.seed, max_words=args.max_words, snr_db=args.snr_db)
    print(path)


def cmd_lm_train(args):
    lines = []
    for name in args.text:
        lines += Path(name).read_text(encoding="utf-8").splitlines()
    lm = train_ngram(lines, order=args.order)
    export_arpa(lm, args.out)
    print(f"wrote {args.out}: " + ", ".join(f"{n + 1}-grams={len(p)}" for n, p in enumerate(lm.probs)))


def cmd_pretrain(args):
    _, feats = _manifest_features(args.manifest)
    est = BestRQPretrainer(preset=args.preset, steps=args.steps, batch_size=args.batch_size,
                           lr=args.lr, codebook_size=args.codebook_size, p_full=args.p_full,
                           span_segments=args.span_segments, seed=args.seed)
    est.fit(feats)
    est.model_.save(args.out)
    _write_loss_log(est.loss_log_, args.log or f"{args.out}.loss.csv")
    last = est.loss_log_[-1]["loss"] if est.loss_log_ else float("nan")
    print(f"pretrained {len(est.loss_log_)} steps, final loss {last:.4f} -> {args.out}")


def cmd_finetune(args):
    entries, feats = _manifest_features(args.manifest)
    est = CTCRecognizer(init=args.init, preset=args.preset, steps=args.steps,
                        batch_size=args.batch_size, encoder_lr=args.encoder_lr,
                        probe_lr=args.probe_lr, probe_hidden=args.probe_hidden,
                        policy_phase=args.policy_phase, seed=args.seed,
                        eval_every=args.eval_every, target_wer=args.target_wer)
    est.fit(feats, [e.text for e in entries])
    est.model_.save(args.out)
    _write_loss_log(est.loss_log_, args.log or f"{args.out}.loss.csv")
    print(f"finetuned {est.n_steps_} steps -> {args.out}")
    if args.dev:
        rep = evaluate(est.model_, read_manifest(args.dev))
        print(rep.to_text("dev (full context, greedy)"))


def cmd_decode(args):
    model = SpeechModel.load(args.ckpt)
    opts = DecodeOptions(_policy(args), args.beam if args.lm else 1, args.alpha, args.beta, _load_lm(args))
    rep = evaluate(model, read_manifest(args.manifest), opts, args.workers)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for hyp in rep.hypotheses:
            out.write(json.dumps(hyp) + "\n")
    finally:
        if args.out:
            out.close()
    for err in rep.errors:
        print(f"skipped {err['utt_id']}: {err['error']}", file=sys.stderr)


def cmd_stream(args):
    model = SpeechModel.load(args.ckpt)
    cfg = StreamConfig(args.chunk_size, _left(args.left_chunks))
    audio = load_wav(args.wav)
    session = open_session(model, cfg)
    step = max(1, int(round(args.pushes_ms * 16)))
    for i in range(0, audio.samples.size, step):
        tokens = session.push_audio(audio.samples[i : i + step])
        if tokens:
            t_ms = min(i + step, audio.samples.size) / 16.0
            print(f"[{t_ms:8.1f} ms] +{''.join(tokens)!r} -> {session.transcript!r}")
    text, report = session.finalize()
    print(f"final: {text!r}")
    print("latency: " + json.dumps(report.to_dict()))


def cmd_evaluate(args):
    model = SpeechModel.load(args.ckpt)
    policy = _policy(args)
    if args.streaming and policy.is_full:
        raise UsageError("--streaming needs --chunk-size")
    opts = DecodeOptions(policy, args.beam if args.lm else 1, args.alpha, args.beta,
                         _load_lm(args), streaming=args.streaming)
    rep = evaluate(model, read_manifest(args.manifest), opts, args.workers)
    text = rep.to_text(f"policy {policy.describe()}" + (" +lm" if args.lm else ""))
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    if args.hyps:
        with open(args.hyps, "w", encoding="utf-8") as fh:
            for hyp in rep.hypotheses:
                fh.write(json.dumps(hyp) + "\n")


def cmd_sweep(args):
    model = SpeechModel.load(args.ckpt)
    rows = sweep(model, read_manifest(args.manifest), _int_list(args.chunk_sizes),
                 _left_list(args.left_contexts), args.workers)
    write_sweep_csv(rows, args.out)
    for r in rows:
        print(f"chunk={r['chunk_size']!s:>5} left={r['left_chunks']!s:>5} "
              f"latency_ms={r['latency_ms']!s:>6} wer={r['wer']:.4f}")
    for note in sweep_annotations(rows):
        print("note: " + note)


COMMANDS = {
    "synth-corpus": cmd_synth_corpus,
    "lm-train": cmd_lm_train,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "decode": cmd_decode,
    "stream": cmd_stream,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    # global flags may precede the subcommand; the subparsers own them
    cmd_at = next((i for i, a in enumerate(argv) if a in COMMANDS), None)
    if cmd_at and "--version" not in argv[:cmd_at]:
        argv = [argv[cmd_at]] + argv[:cmd_at] + argv[cmd_at + 1:]
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        flat = load_config(known.config)
        defaults = section(flat, "global")
        command = next((a for a in argv if a in COMMANDS), None)
        if command:
            defaults.update(section(flat, command))
            sub = parser._subparsers._group_actions[0].choices[command]
            sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    torch.manual_seed(args.seed)
    np.random.seed(args.seed)
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, AudioFormatError, TooShortError, CheckpointError, ArpaParseError,
            NotFinetunedError, CTCInfeasibleError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
