"""Command-line pipeline: prepare, features, train, transfer, evaluate, decode.

Exit codes: 0 success, 1 usage error, 2 data error (bad or incompatible
inputs), 3 unexpected runtime error. Every nonzero exit prints a diagnostic
to stderr. With --json, stdout carries a single JSON document and nothing
else; human-readable chatter goes to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .ctc import beam_search_decode, greedy_decode
from .frontend import (
    MAX_UTTERANCE_SECONDS,
    FeatureConfig,
    FeatureMatrix,
    ManifestRow,
    WavFormatError,
    feature_cache_header,
    feature_normalize,
    frame_count,
    load_wav,
    mfcc,
    read_manifest,
    resample,
    write_feature_cache,
    write_manifest,
)
from .network import ModelConfig, forward, log_softmax
from .synthetic import SynthConfig, write_corpus
from .text_labels import Alphabet, builtin_alphabet, decode, load_alphabet, normalize_transcript
from .trainer import (
    TrainConfig,
    evaluate,
    load_dataset,
    run_experiment_matrix,
    split_dataset,
    train,
)
from .transfer import (
    CheckpointError,
    TransferError,
    load_checkpoint,
    params_from_checkpoint,
    read_checkpoint,
    save_checkpoint,
    transfer_weights,
    verify_transfer,
)

logger = logging.getLogger("ctcx")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

EXPERIMENT_COLUMNS = (
    "RNN type",
    "Training cost",
    "Training LER",
    "Validation cost",
    "Validation LER",
    "Epochs",
)


class DataError(Exception):
    """Bad or incompatible input data; maps to exit code 2."""


class UsageError(Exception):
    """Structurally valid flags with impossible values; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; this toolkit reserves 2 for data
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _split_arg(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated fractions, got {text!r}")
    return (parts[0], parts[1], parts[2])


def _alphabet_arg(spec: str) -> Alphabet:
    if spec in ("ru", "kk"):
        return builtin_alphabet(spec)
    path = Path(spec)
    if not path.exists():
        raise DataError(f"alphabet {spec!r} is neither built in (ru, kk) nor a readable file")
    return load_alphabet(path)


def _emit(args, payload: dict, human: str) -> None:
    if args.json:
        print(json.dumps(payload, ensure_ascii=False, indent=2))
    elif human:
        print(human)


def _workers() -> int:
    env = os.environ.get("CTCX_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise DataError(f"CTCX_THREADS={env!r} is not an integer") from None
    return min(8, os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def _frame_count_for_row(row: ManifestRow, cfg: FeatureConfig) -> tuple[int, float]:
    """(frames, duration seconds) for a manifest row, reading the audio header."""
    path = Path(row.audio)
    if path.suffix == ".mfcc":
        t, _ = feature_cache_header(path)
        duration = row.duration_s if row.duration_s is not None else t * cfg.hop_ms / 1000.0
        return t, duration
    clip = load_wav(path)
    if clip.sample_rate_hz != cfg.sample_rate_hz:
        n = round(len(clip.samples) * cfg.sample_rate_hz / clip.sample_rate_hz)
    else:
        n = len(clip.samples)
    return frame_count(n, cfg), clip.duration_s


def cmd_prepare(args) -> int:
    alphabet = _alphabet_arg(args.alphabet)
    cfg = FeatureConfig()

    if args.synthetic is not None:
        feature_dir = Path(args.feature_dir) if args.feature_dir else Path(args.out).parent / "features"
        synth_cfg = SynthConfig(noise_scale=args.noise_scale, proto_seed=args.proto_seed)
        rows = write_corpus(feature_dir, alphabet, args.synthetic, args.seed, synth_cfg)
    else:
        if args.manifest is None:
            raise DataError("either --manifest or --synthetic is required")
        rows = read_manifest(args.manifest)

    kept = []
    dropped: dict[str, int] = {}

    def drop(reason: str) -> None:
        dropped[reason] = dropped.get(reason, 0) + 1

    for row in rows:
        text = normalize_transcript(row.text, alphabet)
        if not text:
            drop("empty transcript")
            continue
        try:
            frames, duration = _frame_count_for_row(row, cfg)
        except (OSError, ValueError) as e:
            logger.warning("dropping %s: %s", row.audio, e)
            drop("unreadable audio")
            continue
        if duration > MAX_UTTERANCE_SECONDS:
            drop("duration")
            continue
        if 2 * len(text) + 1 > frames:
            drop("transcript too long for frame count")
            continue
        kept.append(ManifestRow(row.audio, text, round(duration, 6)))

    if not kept:
        raise DataError(f"no usable rows ({sum(dropped.values())} dropped: {dropped})")
    write_manifest(kept, args.out)

    human = [f"kept {len(kept)} rows -> {args.out}"]
    for reason, count in sorted(dropped.items()):
        human.append(f"dropped {count} (reason: {reason})")
    _emit(args, {"kept": len(kept), "dropped": dropped, "out": str(args.out)}, "\n".join(human))
    return EXIT_OK


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def _feature_config_from_file(path) -> FeatureConfig:
    try:
        overrides = json.loads(Path(path).read_text(encoding="utf-8"))
        return replace(FeatureConfig(), **overrides)
    except (TypeError, ValueError) as e:
        raise DataError(f"bad feature config {path}: {e}") from None


def cmd_features(args) -> int:
    cfg = _feature_config_from_file(args.config) if args.config else FeatureConfig()
    rows = read_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    out_rows = []
    skipped = 0
    for row in rows:
        src = Path(row.audio)
        if src.suffix == ".mfcc":
            out_rows.append(row)
            skipped += 1
            continue
        cache = out_dir / (src.stem + ".mfcc")
        out_rows.append(ManifestRow(str(cache), row.text, row.duration_s))
        if cache.exists() and src.exists() and cache.stat().st_mtime >= src.stat().st_mtime:
            skipped += 1
            continue
        jobs.append((src, cache))

    def extract(job):
        src, cache = job
        clip = load_wav(src)
        if clip.sample_rate_hz != cfg.sample_rate_hz:
            clip = resample(clip, cfg.sample_rate_hz)
        write_feature_cache(mfcc(clip, cfg).values, cache)

    failures = []
    if jobs:
        with ThreadPoolExecutor(max_workers=_workers()) as pool:
            for job, outcome in zip(jobs, pool.map(lambda j: _try(extract, j), jobs)):
                if outcome is not None:
                    failures.append({"audio": str(job[0]), "error": outcome})

    out_manifest = args.out_manifest or str(out_dir / "manifest.jsonl")
    write_manifest(out_rows, out_manifest)

    payload = {
        "written": len(jobs) - len(failures),
        "skipped": skipped,
        "failed": failures,
        "manifest": out_manifest,
    }
    human = [f"wrote {payload['written']} feature files, skipped {skipped} cached"]
    _emit(args, payload, "\n".join(human))
    if failures:
        for f in failures:
            print(f"ctcx: failed {f['audio']}: {f['error']}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _try(fn, arg) -> str | None:
    try:
        fn(arg)
        return None
    except Exception as e:  # collected per file, reported in bulk
        return f"{type(e).__name__}: {e}"


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_config_from_args(args) -> TrainConfig:
    try:
        return TrainConfig(
            learning_rate=args.learning_rate,
            momentum=args.momentum,
            batch_size=args.batch_size,
            epochs=args.epochs,
            dropout_keep=args.dropout_keep,
            split=args.split,
            grad_clip_norm=None if args.strict_paper else args.grad_clip_norm,
            seed=args.seed,
            eval_decoder=args.eval_decoder,
            beam_width=args.beam_width,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None


def _load_utterances(manifest_path, alphabet: Alphabet):
    rows = read_manifest(manifest_path)
    if not rows:
        raise DataError(f"{manifest_path}: empty manifest")
    utterances, dropped = load_dataset(rows, alphabet)
    if not utterances:
        raise DataError(f"{manifest_path}: no loadable utterances ({len(dropped)} dropped)")
    return utterances


def cmd_train(args) -> int:
    alphabet = _alphabet_arg(args.alphabet)
    cfg = _train_config_from_args(args)
    utterances = _load_utterances(args.manifest, alphabet)

    feature_dim = utterances[0].features.shape[1]
    model_cfg = ModelConfig(
        feature_dim=feature_dim,
        num_classes=alphabet.num_classes,
        hidden=args.hidden,
        num_layers=2,
        bidirectional=(args.arch == "bilstm"),
    )

    params = None
    if args.init == "transfer":
        source = read_checkpoint(args.source_checkpoint)
        try:
            params, report = transfer_weights(source, model_cfg, alphabet, cfg.seed)
        except TransferError as e:
            raise DataError(f"source checkpoint incompatible: {e}") from None
        logger.info(
            "transfer: copied %d tensors, reinitialized %s",
            len(report.copied), ", ".join(report.reinitialized),
        )

    if args.no_split:
        train_set, val_set = utterances, []
    else:
        train_set, val_set, _ = split_dataset(utterances, cfg.split, cfg.seed)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    params, rows = train(train_set, val_set, alphabet, model_cfg, cfg, params, metrics_path)

    checkpoint_path = out_dir / "model.ckpt"
    save_checkpoint(params, replace(model_cfg, dropout_keep=cfg.dropout_keep, seed=cfg.seed),
                    alphabet, checkpoint_path)

    final = rows[-1]
    payload = {
        "checkpoint": str(checkpoint_path),
        "metrics": str(metrics_path),
        "train_utterances": len(train_set),
        "val_utterances": len(val_set),
        "final": final.to_dict(),
    }
    human = (
        f"trained {args.arch} ({args.init} init) for {cfg.epochs} epochs\n"
        f"final train_cost={final.train_cost:.6f} train_ler={final.train_ler:.6f} "
        f"val_cost={final.val_cost:.6f} val_ler={final.val_ler:.6f}\n"
        f"checkpoint: {checkpoint_path}\nmetrics: {metrics_path}"
    )
    _emit(args, payload, human)
    return EXIT_OK


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------


def cmd_transfer(args) -> int:
    source = read_checkpoint(args.source)
    target_alphabet = _alphabet_arg(args.target_alphabet)
    src_cfg = source.model_config
    target_cfg = replace(src_cfg, num_classes=target_alphabet.num_classes)

    params, report = transfer_weights(source, target_cfg, target_alphabet, args.seed)

    rng = np.random.default_rng(args.seed)
    probes = [rng.standard_normal((20, src_cfg.feature_dim)) for _ in range(args.verify_probes)]
    verify = verify_transfer(params_from_checkpoint(source), params, target_cfg, probes)

    save_checkpoint(params, target_cfg, target_alphabet, args.out)
    report_path = args.report or str(Path(args.out).with_suffix(".report.json"))
    report_doc = {
        "source": str(args.source),
        "target_alphabet": target_alphabet.name,
        "out": str(args.out),
        "report": report.to_dict(),
        "verify": verify.to_dict(),
    }
    Path(report_path).write_text(
        json.dumps(report_doc, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )

    human = (
        f"copied {len(report.copied)} recurrent tensors, "
        f"reinitialized {len(report.reinitialized)} (dense head)\n"
        f"verify max abs deviation: {verify.max_abs_deviation:g}\n"
        f"target checkpoint: {args.out}\nreport: {report_path}"
    )
    _emit(args, report_doc, human)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate / decode
# ---------------------------------------------------------------------------


def _alphabet_from_checkpoint(ckpt) -> Alphabet:
    if not ckpt.alphabet_symbols:
        raise DataError("checkpoint does not embed its alphabet; cannot decode")
    return ckpt.alphabet


def cmd_evaluate(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    alphabet = _alphabet_from_checkpoint(ckpt)
    params = params_from_checkpoint(ckpt)
    utterances = _load_utterances(args.manifest, alphabet)
    if any(u.features.shape[1] != ckpt.model_config.feature_dim for u in utterances):
        raise DataError(
            f"feature dim mismatch: checkpoint expects {ckpt.model_config.feature_dim}"
        )
    cost, ler = evaluate(params, ckpt.model_config, utterances, args.decoder, args.beam_width)
    payload = {
        "utterances": len(utterances),
        "avg_cost": cost,
        "ler": ler,
        "decoder": args.decoder,
    }
    _emit(args, payload, f"utterances: {len(utterances)}\navg cost: {cost:.6f}\nLER: {ler:.6f}")
    return EXIT_OK


def cmd_decode(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    alphabet = _alphabet_from_checkpoint(ckpt)
    params = params_from_checkpoint(ckpt)
    cfg = FeatureConfig()

    clip = load_wav(args.wav)
    resampled = False
    if clip.sample_rate_hz != cfg.sample_rate_hz:
        logger.info("resampling %d Hz -> %d Hz", clip.sample_rate_hz, cfg.sample_rate_hz)
        clip = resample(clip, cfg.sample_rate_hz)
        resampled = True

    values = feature_normalize(FeatureMatrix(mfcc(clip, cfg).values, cfg)).values
    if values.shape[1] != ckpt.model_config.feature_dim:
        raise DataError(
            f"feature dim {values.shape[1]} does not match checkpoint "
            f"({ckpt.model_config.feature_dim})"
        )
    logits, _ = forward(params, ckpt.model_config, values, train_mode=False)
    log_probs = log_softmax(logits)
    if args.decoder == "beam":
        ids = beam_search_decode(log_probs, args.beam_width)
    else:
        ids = greedy_decode(log_probs)
    transcript = decode(ids, alphabet)

    _emit(args, {"transcript": transcript, "resampled": resampled, "frames": int(values.shape[0])},
          transcript)
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


def cmd_experiment(args) -> int:
    alphabet = _alphabet_arg(args.alphabet)
    cfg = _train_config_from_args(args)
    utterances = _load_utterances(args.manifest, alphabet)

    sources = {}
    for path in args.source_checkpoint or []:
        ckpt = read_checkpoint(path)
        arch = "bilstm" if ckpt.model_config.bidirectional else "lstm"
        if arch in sources:
            raise DataError(f"two source checkpoints for {arch}: {path}")
        sources[arch] = ckpt

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    feature_dim = utterances[0].features.shape[1]
    result = run_experiment_matrix(
        utterances, alphabet, cfg,
        hidden=args.hidden, feature_dim=feature_dim,
        source_checkpoints=sources, metrics_dir=out_dir,
    )

    summary_path = out_dir / "summary.json"
    summary_path.write_text(
        json.dumps(result.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )

    lines = [" | ".join(EXPERIMENT_COLUMNS)]
    for s in result.scenarios:
        f = s.final
        lines.append(" | ".join([
            s.name, repr(f.train_cost), repr(f.train_ler),
            repr(f.val_cost), repr(f.val_ler), str(f.epoch),
        ]))
    for arch, imp in result.improvements_percent.items():
        lines.append(
            f"{arch} transfer improvement: training cost {imp['train_cost']:.1f}%, "
            f"training LER {imp['train_ler']:.1f}%, validation cost {imp['val_cost']:.1f}%, "
            f"validation LER {imp['val_ler']:.1f}%"
        )
    for w in result.warnings:
        lines.append(f"warning: {w}")

    payload = result.to_dict()
    payload["columns"] = list(EXPERIMENT_COLUMNS)
    payload["summary"] = str(summary_path)
    _emit(args, payload, "\n".join(lines))
    if not args.json:
        print(f"summary: {summary_path}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def _add_train_flags(p: _Parser) -> None:
    p.add_argument("--learning-rate", type=float, default=0.0005)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=_positive_int, default=4)
    p.add_argument("--epochs", type=_positive_int, default=500)
    p.add_argument("--dropout-keep", type=float, default=0.5)
    p.add_argument("--split", type=_split_arg, default=(0.8, 0.1, 0.1),
                   help="train,val,test fractions (default 0.8,0.1,0.1)")
    p.add_argument("--grad-clip-norm", type=float, default=5.0)
    p.add_argument("--strict-paper", action="store_true",
                   help="disable gradient clipping; train with the bare defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-decoder", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--beam-width", type=_positive_int, default=8)
    p.add_argument("--hidden", type=_positive_int, default=128)


def build_parser() -> _Parser:
    parser = _Parser(prog="ctcx", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str) -> _Parser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--json", action="store_true", help="machine-readable output on stdout")
        return p

    p = add("prepare", cmd_prepare, "normalize transcripts and filter a manifest")
    p.add_argument("--manifest", help="input manifest (JSON lines)")
    p.add_argument("--alphabet", required=True, help="ru, kk, or an alphabet file")
    p.add_argument("--out", required=True, help="cleaned manifest path")
    p.add_argument("--synthetic", type=_positive_int, default=None,
                   help="generate N synthetic utterances instead of reading --manifest")
    p.add_argument("--feature-dir", help="where synthetic feature files go")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-scale", type=float, default=0.3)
    p.add_argument("--proto-seed", type=int, default=0)

    p = add("features", cmd_features, "extract MFCC cache files for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="JSON file overriding feature extraction fields")
    p.add_argument("--out-manifest", help="rewritten manifest path (default: out-dir/manifest.jsonl)")

    p = add("train", cmd_train, "train a recognizer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--alphabet", required=True)
    p.add_argument("--arch", choices=("lstm", "bilstm"), default="bilstm")
    p.add_argument("--init", choices=("random", "transfer"), default="random")
    p.add_argument("--source-checkpoint", help="required with --init transfer")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-split", action="store_true",
                   help="train on every utterance; no validation split")
    _add_train_flags(p)

    p = add("transfer", cmd_transfer, "copy recurrent weights to a new alphabet")
    p.add_argument("--source", required=True, help="source checkpoint")
    p.add_argument("--target-alphabet", required=True)
    p.add_argument("--out", required=True, help="target checkpoint path")
    p.add_argument("--report", help="report JSON path (default: out with .report.json)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verify-probes", type=_positive_int, default=3)

    p = add("evaluate", cmd_evaluate, "cost and label error rate on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--decoder", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--beam-width", type=_positive_int, default=8)

    p = add("decode", cmd_decode, "transcribe one WAV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--decoder", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--beam-width", type=_positive_int, default=8)

    p = add("experiment", cmd_experiment, "run the 4-scenario training matrix")
    p.add_argument("--manifest", required=True)
    p.add_argument("--alphabet", required=True)
    p.add_argument("--source-checkpoint", action="append",
                   help="source checkpoint; repeat for the second architecture")
    p.add_argument("--out", required=True, help="directory for metrics CSVs and summary JSON")
    _add_train_flags(p)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )

    if getattr(args, "init", None) == "transfer" and not args.source_checkpoint:
        parser.error("--init transfer requires --source-checkpoint")

    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))  # exits with EXIT_USAGE
        raise AssertionError("unreachable")
    except (DataError, WavFormatError, CheckpointError, TransferError,
            FileNotFoundError, IsADirectoryError, PermissionError, ValueError) as e:
        print(f"ctcx: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # anything unexpected
        print(f"ctcx: runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
