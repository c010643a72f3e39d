"""``pdforge`` command-line entry point.

Exit codes: 0 success, 1 validation/usage error, 2 I/O or corruption error.
Data goes to stdout (one JSON document per command) or to files; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .distill_losses import LossKind
from .errors import ConfigError, PDForgeError, StorageError, TrainingDivergenceError, ValidationError
from .logits_codec import AdaH, AdaSD, StaticTemperature, estimate_storage, temperature_policy_to_dict
from .logits_store import ShardReader, shard_stats
from .pd_trainer.config import MODES, CorpusSpec, OnlineOverride, RunConfig
from .pd_trainer.corpus import gen_corpus, load_corpus
from .pd_trainer.report import RunReport, compare, comparison_csv
from .schedulers import lr_schedule_from_dict, lr_schedule_to_dict
from .tiny_lm import load_checkpoint

log = logging.getLogger("pdforge")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2
CONFIG_SECTIONS = ("corpus", "run")

DENSE_REFERENCE_NOTE = (
    "reference point: dense fp32 logits for a ~150k vocabulary over 1e11 tokens are usually quoted "
    "at around 58.6 PB; sparse top-p-k storage with ~18.75 entries/token needs about 15 TB (~4000x less)"
)


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2; usage errors are validation errors here
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---- config assembly -----------------------------------------------------------


def _load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return doc


_CORPUS_FLAGS = ("vocab_size", "transition_seed", "sequence_count", "chunk_len", "skew", "rank")
_RUN_FLAGS = (
    "batch_size", "total_steps", "eval_every", "checkpoint_every", "mode", "seed",
    "teacher_steps", "window_steps", "label_source", "dtype",
)


def corpus_spec_from(args: argparse.Namespace, file_cfg: dict) -> CorpusSpec:
    d = dict(file_cfg.get("corpus", {}))
    for name in _CORPUS_FLAGS:
        if getattr(args, name, None) is not None:
            d[name] = getattr(args, name)
    if getattr(args, "train_ratio", None) is not None:
        d["train_ratio"] = args.train_ratio
        d["heldout_ratio"] = 1.0 - args.train_ratio
    return CorpusSpec.from_dict(d)


def run_config_from(args: argparse.Namespace, file_cfg: dict) -> RunConfig:
    d = dict(file_cfg.get("run", {}))
    for name in _RUN_FLAGS:
        if getattr(args, name, None) is not None:
            d[name] = getattr(args, name)
    if getattr(args, "loss", None) is not None:
        d["loss"] = args.loss
    trunc = dict(d.get("truncation", {}))
    if getattr(args, "p", None) is not None:
        trunc["p"] = args.p
    if getattr(args, "k", None) is not None:
        trunc["k"] = args.k
    if trunc:
        d["truncation"] = trunc
    temp = _temperature_override(args)
    if temp is not None:
        d["temperature"] = temp
    if getattr(args, "alpha", None) is not None:
        d["alpha"] = {"kind": "static", "alpha": args.alpha}
    if getattr(args, "alpha_schedule", None) is not None:
        d["alpha"] = _json_arg(args.alpha_schedule, "--alpha-schedule")
    lr = _lr_override(args, d.get("lr"))
    if lr is not None:
        d["lr"] = lr
    if getattr(args, "lr_schedule", None) is not None:
        d["lr"] = _json_arg(args.lr_schedule, "--lr-schedule")
    run = RunConfig.from_dict(d)
    if getattr(args, "online_override", False):
        run = OnlineOverride().apply(run)
    return run


def _json_arg(text: str, flag: str) -> dict:
    try:
        value = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{flag} expects a JSON object: {exc}") from exc
    if not isinstance(value, dict):
        raise ConfigError(f"{flag} expects a JSON object")
    return value


def _temperature_override(args: argparse.Namespace) -> Optional[dict]:
    chosen = [x for x in ("tau", "ada_sd", "ada_h") if getattr(args, x, None) not in (None, False)]
    if len(chosen) > 1:
        raise ConfigError("--tau, --ada-sd and --ada-h are mutually exclusive")
    if getattr(args, "tau", None) is not None:
        return temperature_policy_to_dict(StaticTemperature(args.tau))
    if getattr(args, "ada_sd", False):
        return temperature_policy_to_dict(AdaSD())
    if getattr(args, "ada_h", False):
        return temperature_policy_to_dict(AdaH())
    return None


def _lr_override(args: argparse.Namespace, base: Optional[dict]) -> Optional[dict]:
    given = {k: getattr(args, k) for k in ("lr_max", "lr_min", "warmup_ratio") if getattr(args, k, None) is not None}
    if not given:
        return None
    current = dict(base) if base else lr_schedule_to_dict(RunConfig().lr)
    current.update(given)
    lr_schedule_from_dict(current)  # validate early
    return current


# ---- path checks ---------------------------------------------------------------


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise StorageError(f"{what} not found: {p}")
    return p


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise StorageError(f"{what} not found: {p}")
    return p


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---- subcommands ---------------------------------------------------------------


def cmd_gen_corpus(args: argparse.Namespace) -> int:
    spec = corpus_spec_from(args, _load_config_file(args.config))
    corpus = gen_corpus(spec, args.out)
    _emit({
        "command": "gen-corpus",
        "config": {"corpus": spec.to_dict(), "out": args.out},
        "entropy_rate": corpus.entropy_rate,
        "train_sequences": int(corpus.train.shape[0]),
        "heldout_sequences": int(corpus.heldout.shape[0]),
    })
    return EXIT_OK


def cmd_train_teacher(args: argparse.Namespace) -> int:
    from .pd_trainer.trainer import train_teacher

    cdir = _require_dir(args.corpus, "corpus directory")
    if args.resume:
        _require_file(args.resume, "checkpoint")
    run = run_config_from(args, _load_config_file(args.config))
    corpus = load_corpus(cdir)
    _, report = train_teacher(run, corpus, args.out, resume_from=args.resume)
    _emit({"command": "train-teacher", "config": report.config, "config_hash": report.config_hash, "summary": report.summary})
    return EXIT_OK


def cmd_dump_logits(args: argparse.Namespace) -> int:
    from .pd_trainer.trainer import dump_offline_logits

    ckpt = _require_file(args.teacher, "teacher checkpoint")
    cdir = _require_dir(args.corpus, "corpus directory")
    run = run_config_from(args, _load_config_file(args.config))
    corpus = load_corpus(cdir)
    teacher = load_checkpoint(ckpt)
    seqs = corpus.train if args.split == "train" else corpus.heldout
    stats = dump_offline_logits(teacher, seqs, run.truncation, run.temperature, args.out, run.batch_size)
    _emit({
        "command": "dump-logits",
        "config": {
            "teacher": str(ckpt), "corpus": str(cdir), "split": args.split, "out": args.out,
            "truncation": vars(run.truncation), "temperature": temperature_policy_to_dict(run.temperature),
            "batch_size": run.batch_size,
        },
        "stats": vars(stats),
    })
    return EXIT_OK


def cmd_train_student(args: argparse.Namespace) -> int:
    from .pd_trainer.trainer import LiveTeacher, ShardTeacher, train_student

    cdir = _require_dir(args.corpus, "corpus directory")
    if args.shard:
        _require_file(args.shard, "logits shard")
    if args.teacher:
        _require_file(args.teacher, "teacher checkpoint")
    if args.resume:
        _require_file(args.resume, "checkpoint")
    if args.shard and args.teacher:
        raise UsageError("give either --shard or --teacher, not both")
    run = run_config_from(args, _load_config_file(args.config))
    corpus = load_corpus(cdir)
    reader = None
    source = None
    try:
        if args.shard:
            reader = ShardReader(args.shard)
            if len(reader) != corpus.train.shape[0]:
                raise ValidationError(
                    f"shard holds {len(reader)} sequences but the training split has {corpus.train.shape[0]}"
                )
            source = ShardTeacher(reader, run.temperature)
        elif args.teacher:
            source = LiveTeacher(load_checkpoint(args.teacher), run.truncation, run.temperature)
        _, report = train_student(run, corpus, source, args.out, resume_from=args.resume)
    finally:
        if reader is not None:
            reader.close()
    _emit({"command": "train-student", "config": report.config, "config_hash": report.config_hash, "summary": report.summary})
    return EXIT_OK


def cmd_run_online(args: argparse.Namespace) -> int:
    from .pd_trainer.trainer import run_online_pipeline

    cdir = _require_dir(args.corpus, "corpus directory")
    run = run_config_from(args, _load_config_file(args.config))
    corpus = load_corpus(cdir)
    report = run_online_pipeline(run, corpus, args.out)
    _emit({"command": "run-online", "config": report.config, "config_hash": report.config_hash, "summary": report.summary})
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from .pd_trainer.trainer import evaluate

    ckpt = _require_file(args.checkpoint, "checkpoint")
    cdir = _require_dir(args.corpus, "corpus directory")
    corpus = load_corpus(cdir)
    model = load_checkpoint(ckpt)
    seqs = corpus.heldout if args.split == "heldout" else corpus.train
    res = evaluate(model, seqs)
    _emit({
        "command": "eval",
        "config": {"checkpoint": str(ckpt), "corpus": str(cdir), "split": args.split, "model": model.config.to_dict()},
        "cross_entropy": res.cross_entropy,
        "perplexity": res.perplexity,
        "entropy_rate": corpus.entropy_rate,
    })
    return EXIT_OK


def cmd_estimate_storage(args: argparse.Namespace) -> int:
    est = estimate_storage(args.vocab, args.tokens, args.avg_kept, args.bytes_per_entry, dense_bytes=args.dense_bytes)
    _emit({
        "command": "estimate-storage",
        "config": {
            "vocab": args.vocab, "tokens": args.tokens, "avg_kept": args.avg_kept,
            "bytes_per_entry": args.bytes_per_entry, "dense_bytes": args.dense_bytes,
        },
        "dense_bytes": est.dense_bytes,
        "sparse_bytes": est.sparse_bytes,
        "reduction_factor": est.reduction_factor,
        "note": DENSE_REFERENCE_NOTE,
    })
    print(f"dense logits: {est.dense_bytes:.3e} bytes", file=sys.stderr)
    return EXIT_OK


def cmd_verify_shard(args: argparse.Namespace) -> int:
    shard = _require_file(args.shard, "logits shard")
    with ShardReader(shard) as reader:
        reader.verify()
        stats = shard_stats(reader)
        header = vars(reader.header)
    _emit({"command": "verify-shard", "config": {"shard": str(shard)}, "ok": True, "header": header, "stats": vars(stats)})
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    reports = {}
    for d in args.runs:
        name = Path(d).name or d
        if name in reports:
            raise UsageError(f"duplicate run name {name!r}")
        reports[name] = RunReport.load(d)
    baseline = args.baseline or next(iter(reports))
    if baseline not in reports:
        raise UsageError(f"baseline {baseline!r} is not one of {sorted(reports)}")
    rows = compare(reports, baseline)
    if args.format == "csv":
        text = comparison_csv(rows)
    else:
        text = json.dumps({"config": {"runs": args.runs, "baseline": baseline}, "rows": rows}, indent=2, sort_keys=True) + "\n"
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as exc:
            raise StorageError(f"cannot write {args.out}: {exc}") from exc
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---- parser ------------------------------------------------------------------


def _add_corpus_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("corpus")
    g.add_argument("--vocab-size", type=int)
    g.add_argument("--transition-seed", type=int)
    g.add_argument("--sequence-count", type=int)
    g.add_argument("--chunk-len", type=int)
    g.add_argument("--train-ratio", type=float)
    g.add_argument("--skew", type=float)
    g.add_argument("--rank", type=int)


def _add_processing_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("teacher logits processing")
    g.add_argument("--p", type=float, help="top-p mass threshold")
    g.add_argument("--k", type=int, help="top-k cap")
    g.add_argument("--tau", type=float, help="static temperature")
    g.add_argument("--ada-sd", action="store_true", help="adaptive temperature from log-prob spread")
    g.add_argument("--ada-h", action="store_true", help="adaptive temperature from entropy")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    _add_processing_flags(p)
    g = p.add_argument_group("run")
    g.add_argument("--loss", choices=[k.value for k in LossKind])
    g.add_argument("--alpha", type=float, help="static mixing weight")
    g.add_argument("--alpha-schedule", help='JSON, e.g. {"kind": "wsd_alpha", "peak": 1.0}')
    g.add_argument("--lr-max", type=float)
    g.add_argument("--lr-min", type=float)
    g.add_argument("--warmup-ratio", type=float)
    g.add_argument("--lr-schedule", help='JSON, e.g. {"kind": "wsd_lr"}')
    g.add_argument("--batch-size", type=int)
    g.add_argument("--total-steps", type=int)
    g.add_argument("--eval-every", type=int)
    g.add_argument("--checkpoint-every", type=int)
    g.add_argument("--mode", choices=MODES)
    g.add_argument("--seed", type=int)
    g.add_argument("--teacher-steps", type=int)
    g.add_argument("--window-steps", type=int)
    g.add_argument("--label-source", choices=("corpus", "teacher_argmax"))
    g.add_argument("--dtype", choices=("float64", "float32"))
    g.add_argument("--online-override", action="store_true", help="apply the alpha=0.1, top-0.95-50 preset")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pdforge", description="Pre-training distillation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="generate the synthetic Markov corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    _add_corpus_flags(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train-teacher", help="LM pre-training of the teacher")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("dump-logits", help="write an offline logits shard from a teacher checkpoint")
    p.add_argument("--config")
    p.add_argument("--teacher", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "heldout"), default="train")
    _add_run_flags(p)
    p.set_defaults(func=cmd_dump_logits)

    p = sub.add_parser("train-student", help="distil a student from a shard or a live teacher")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shard")
    p.add_argument("--teacher")
    p.add_argument("--resume")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("run-online", help="teacher training with online capture, then student distillation")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_run_online)

    p = sub.add_parser("eval", help="held-out cross-entropy and perplexity of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("heldout", "train"), default="heldout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("estimate-storage", help="dense vs sparse logits storage arithmetic")
    p.add_argument("--vocab", type=int, required=True)
    p.add_argument("--tokens", type=float, required=True)
    p.add_argument("--avg-kept", type=float, default=0.0)
    p.add_argument("--bytes-per-entry", type=int, default=8)
    p.add_argument("--dense-bytes", type=int, default=4, help="bytes per dense logit")
    p.set_defaults(func=cmd_estimate_storage)

    p = sub.add_parser("verify-shard", help="check every record checksum of a shard")
    p.add_argument("shard")
    p.set_defaults(func=cmd_verify_shard)

    p = sub.add_parser("report", help="compare final held-out CE across run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--baseline", help="run directory name used as the baseline (default: first)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def _thread_limit() -> Optional[int]:
    raw = os.environ.get("PDFORGE_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PDFORGE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("PDFORGE_THREADS must be >= 1")
    return n


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_VALIDATION
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        limit = _thread_limit()
        if limit is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=limit):
            return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StorageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PDForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
