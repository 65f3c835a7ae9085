"""Command-line entry point: ``xlst <command> [--config PATH] [--run-dir DIR] [--set k=v] ...``."""
from __future__ import annotations

import argparse
import contextlib
import fcntl
import json
import logging
import sys
from pathlib import Path

from . import model as M
from .config import ConfigError, parse_config
from .corpus import (DataError, SyntheticSpec, build_entity_corpus, doc_record,
                     extract_entity_surface_forms, generate_synthetic_task, load_labeled,
                     load_translation_table, load_unlabeled, write_jsonl)
from .metrics import report
from .selftrain import Pipeline, PipelineError, TaskData, predict_records
from .thresholding import threshold_curve

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

COMMANDS = ("synth", "make-corpus", "btf", "finetune", "selftrain", "eval", "threshold-curve")

log = logging.getLogger("xlst")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value configuration file")
    common.add_argument("--run-dir", metavar="PATH", help="directory receiving every output")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        dest="overrides", help="override one configuration key (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=INT")
    common.add_argument("--dry-run", action="store_true",
                        help="validate configuration and input files, then stop")
    parser = _Parser(prog="xlst", description="Cross-lingual transfer by bilingual task "
                     "fitting and self-training on a bag-of-embeddings model.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "synth": "write a synthetic bilingual classification task",
        "make-corpus": "collect target documents mentioning translated source entities",
        "btf": "masked-LM training on the balanced bilingual corpus (base checkpoint)",
        "finetune": "train voters on labeled source data (teacher checkpoint)",
        "selftrain": "full schedule: base, source fine-tuning, soft/hard rounds",
        "eval": "per-phase metric report for a finished run",
        "threshold-curve": "recalled accuracy against confidence threshold, as CSV",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "threshold-curve":
            p.add_argument("--checkpoint", metavar="PATH",
                           help="model to score (default: last checkpoint of the run)")
            p.add_argument("--data", metavar="PATH",
                           help="labeled JSONL to score (default: source_labeled)")
    return parser


# --------------------------------------------------------------------------
# run directory handling

@contextlib.contextmanager
def locked_run_dir(path):
    """Exclusive advisory lock on ``path/.lock`` for the duration of a command."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    fh = open(path / ".lock", "w")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise UsageError(f"run directory {path} is locked by another process") from None
        yield path
    finally:
        fh.close()


def _need_run_dir(args):
    if not args.run_dir:
        raise UsageError(f"{args.command} needs --run-dir")
    return Path(args.run_dir)


def _check_exists(*paths):
    for p in paths:
        if p and not Path(p).is_file():
            raise FileNotFoundError(f"no such file: {p}")


def _last_checkpoint(run_dir):
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    stored = [p["checkpoint"] for p in manifest.get("phases", []) if p.get("checkpoint")]
    if not stored:
        raise FileNotFoundError(f"run {run_dir} has no checkpoints")
    return run_dir / stored[-1]


# --------------------------------------------------------------------------
# commands

def cmd_synth(cfg, args, run_dir):
    spec = SyntheticSpec(vocab_per_language=cfg.synth_vocab, num_classes=cfg.num_classes,
                         n_source_labeled=cfg.synth_n_source,
                         n_target_unlabeled=cfg.synth_n_unlabeled,
                         n_target_test=cfg.synth_n_test, signal=cfg.synth_signal,
                         n_btf_per_language=cfg.synth_n_btf)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"synthetic task: {exc}") from None
    if args.dry_run:
        return "synthetic task settings are valid"
    task = generate_synthetic_task(spec, cfg.seed)
    out = task.write(run_dir / "data")
    (run_dir / "config.txt").write_text(cfg.dump(), encoding="utf-8")
    return f"wrote synthetic task to {out}"


def cmd_make_corpus(cfg, args, run_dir):
    for key in ("bio_source", "translation_table", "target_corpus"):
        if not getattr(cfg, key):
            raise ConfigError(f"{key}: required by make-corpus")
    _check_exists(cfg.bio_source, cfg.translation_table, cfg.target_corpus)
    entities = extract_entity_surface_forms(load_labeled(cfg.bio_source, task="bio"))
    table = load_translation_table(cfg.translation_table)
    target = load_unlabeled(cfg.target_corpus)
    if args.dry_run:
        return f"{len(entities)} entities, {len(table)} translations, {len(target)} target documents"
    docs = build_entity_corpus(entities, table, target, cfg.entity_cap)
    write_jsonl(run_dir / "entity_corpus.jsonl", (doc_record(d) for d in docs))
    (run_dir / "config.txt").write_text(cfg.dump(), encoding="utf-8")
    return f"kept {len(docs)} target documents in {run_dir / 'entity_corpus.jsonl'}"


def _pipeline(cfg, args, run_dir):
    _check_exists(cfg.source_labeled, cfg.target_unlabeled, cfg.target_test, cfg.btf_corpus,
                  cfg.base_checkpoint)
    data = TaskData.from_config(cfg)
    if args.dry_run:
        return None, data
    return Pipeline(cfg, data, run_dir), data


def _dry_summary(data):
    return (f"{len(data.source)} source, {len(data.target_unlabeled)} unlabeled target, "
            f"{len(data.target_test)} test documents")


def cmd_btf(cfg, args, run_dir):
    pipe, data = _pipeline(cfg, args, run_dir)
    if pipe is None:
        return _dry_summary(data)
    if cfg.base_checkpoint:
        raise ConfigError("base_checkpoint: btf builds the base model, leave it unset")
    pipe.base_model()
    return f"base model written to {run_dir / 'checkpoints' / 'base.ckpt.json'}"


def cmd_finetune(cfg, args, run_dir):
    pipe, data = _pipeline(cfg, args, run_dir)
    if pipe is None:
        return _dry_summary(data)
    teacher = pipe.finetune(pipe.base_model())
    pipe.manifest["final_fingerprint"] = teacher.fingerprint()
    pipe._write_manifest()
    return _metric_line(pipe.manifest)


def cmd_selftrain(cfg, args, run_dir):
    pipe, data = _pipeline(cfg, args, run_dir)
    if pipe is None:
        return _dry_summary(data)
    pipe.run()
    return _metric_line(pipe.manifest)


def _metric_line(manifest):
    parts = [f"{m['phase']}={100 * m['values']['accuracy']:.2f}"
             for m in manifest["metrics"] if "accuracy" in m["values"]]
    return "target accuracy: " + (" ".join(parts) if parts else "(no test set)")


def cmd_eval(cfg, args, run_dir):
    if not (run_dir / "manifest.json").is_file():
        raise FileNotFoundError(f"no manifest.json in {run_dir}")
    if args.dry_run:
        return "manifest present"
    _, text = report(run_dir)
    return text.rstrip("\n")


def cmd_threshold_curve(cfg, args, run_dir):
    ckpt = Path(args.checkpoint) if args.checkpoint else _last_checkpoint(run_dir)
    data_path = args.data or cfg.source_labeled
    if not data_path:
        raise ConfigError("source_labeled: threshold-curve needs labeled data (or --data)")
    _check_exists(ckpt, data_path)
    examples = load_labeled(data_path, num_classes=cfg.num_classes)
    if args.dry_run:
        return f"{len(examples)} labeled documents"
    params = M.load_checkpoint(ckpt)
    from .corpus import Vocab, encode_batch
    ids = encode_batch([e.doc for e in examples], Vocab(list(params.vocab)))
    records = predict_records(params, ids, [e.label for e in examples])
    csv_text = threshold_curve(records, cfg.grid).to_csv()
    (run_dir / "threshold_curve.csv").write_text(csv_text, encoding="utf-8")
    return csv_text.rstrip("\n")


HANDLERS = {
    "synth": cmd_synth,
    "make-corpus": cmd_make_corpus,
    "btf": cmd_btf,
    "finetune": cmd_finetune,
    "selftrain": cmd_selftrain,
    "eval": cmd_eval,
    "threshold-curve": cmd_threshold_curve,
}


def dispatch(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = parse_config(args.config, overrides)
    run_dir = _need_run_dir(args)
    handler = HANDLERS[args.command]
    if args.dry_run:
        return handler(cfg, args, run_dir)
    with locked_run_dir(run_dir):
        return handler(cfg, args, run_dir)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        message = dispatch(args)
    except UsageError as exc:
        print(f"xlst: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"xlst: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (M.NumericError, FloatingPointError) as exc:
        print(f"xlst: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, M.CheckpointError, PipelineError, OSError, ValueError) as exc:
        print(f"xlst: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if message:
        print(message)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
