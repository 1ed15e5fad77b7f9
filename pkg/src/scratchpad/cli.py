"""Command-line entry point: train, evaluate, analyze, compare, gen-data, average-checkpoints.

Exit codes: 0 success, 1 bad input or config, 2 runtime failure,
3 ``compare`` found that run B does not have lower mean attention entropy.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C
from .checkpoint import CheckpointError, load_checkpoint, load_metadata, save_checkpoint
from .data import CorpusError, Vocabulary, load_tsv, make_task, write_tsv
from .evaluation import decode_corpus, score, write_analysis, write_outputs_tsv
from .memory import MemoryRangeError
from .tensor import NonFiniteError
from .training import average_checkpoints, train

log = logging.getLogger("scratchpad")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME, EXIT_NOT_BETTER = 0, 1, 2, 3


class InputError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _load_config(path: str, overrides: list[str]) -> C.RunConfig:
    if not Path(path).exists():
        raise InputError(f"config file not found: {path}")
    return C.load(path, overrides)


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.set)
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = run_dir / "config.resolved.yaml"
    if args.resume and snapshot.exists():
        previous = C.load(snapshot)
        if C.dump(previous) != C.dump(cfg):
            raise InputError("resume: config differs from the one the run was started with")
    C.save(cfg, snapshot)
    result = train(cfg, run_dir=run_dir, resume=args.resume)
    last = result.history[-1] if result.history else {}
    log.info("trained %s epochs, final val loss %s", last.get("epoch"), last.get("val_loss"))
    print(run_dir / "checkpoints" / "final.ckpt")
    return EXIT_OK


def _run_dir_of(checkpoint: Path) -> Path:
    return checkpoint.resolve().parent.parent


def _test_corpus(args, checkpoint: Path):
    if args.test:
        return load_tsv(args.test, "test"), None
    cfg_path = Path(args.config) if args.config else _run_dir_of(checkpoint) / "config.resolved.yaml"
    if not cfg_path.exists():
        raise InputError("no test set: pass --test or --config, or keep the run's config.resolved.yaml")
    cfg = C.load(cfg_path)
    return make_task(cfg.task, cfg.seed)["test"], cfg


def _decode_for(args):
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise InputError(f"checkpoint not found: {checkpoint}")
    params = load_checkpoint(checkpoint)
    meta = load_metadata(checkpoint)
    if "vocab" not in meta:
        raise InputError("checkpoint carries no vocabulary")
    vocab = Vocabulary.from_list(meta["vocab"])
    corpus, cfg = _test_corpus(args, checkpoint)
    dcfg = cfg.decode if cfg is not None else C.DecodeConfig()
    beam = args.beam or dcfg.beam
    max_len = args.max_len or dcfg.max_len
    outputs = decode_corpus(params, vocab, corpus, beam=beam, max_len=max_len, greedy=args.greedy)
    mode = {"greedy": bool(args.greedy), "beam": 1 if args.greedy else beam, "max_len": max_len}
    return checkpoint, vocab, outputs, mode


def cmd_evaluate(args) -> int:
    checkpoint, vocab, outputs, mode = _decode_for(args)
    out = Path(args.out) if args.out else _run_dir_of(checkpoint) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    metrics = score(outputs, vocab)
    metrics["decode"] = mode
    metrics["checkpoint"] = checkpoint.name
    _write_json(out / "metrics.json", metrics)
    write_outputs_tsv(outputs, out / "outputs.tsv")
    print(json.dumps({k: metrics[k] for k in ("bleu", "rouge_l", "mean_entropy", "repetition_rate")}, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    checkpoint, vocab, outputs, mode = _decode_for(args)
    out = Path(args.out) if args.out else _run_dir_of(checkpoint) / "analysis"
    summary = write_analysis(outputs, vocab, out)
    summary["decode"] = mode
    _write_json(out / "summary.json", summary)
    print(json.dumps({"mean_entropy": summary["mean_entropy"]}))
    return EXIT_OK


def _eval_metrics(run: str) -> dict:
    p = Path(run)
    path = p if p.is_file() else p / "eval" / "metrics.json"
    if not path.exists():
        raise InputError(f"no evaluation metrics at {path}; run `evaluate` first")
    return json.loads(path.read_text(encoding="utf-8"))


def cmd_compare(args) -> int:
    a, b = _eval_metrics(args.run_a), _eval_metrics(args.run_b)
    if a.get("test_digest") != b.get("test_digest"):
        raise InputError("runs were evaluated on different test sets")
    keys = ("bleu", "rouge_l", "mean_entropy", "repetition_rate")
    report = {
        "a": {k: a[k] for k in keys},
        "b": {k: b[k] for k in keys},
        "delta": {k: b[k] - a[k] for k in keys},
        "test_digest": a["test_digest"],
        "b_lower_entropy": b["mean_entropy"] < a["mean_entropy"],
    }
    if args.out:
        _write_json(Path(args.out), report)
    print(f"{'metric':<16}{'A':>12}{'B':>12}{'B-A':>12}")
    for k in keys:
        print(f"{k:<16}{a[k]:>12.4f}{b[k]:>12.4f}{b[k] - a[k]:>12.4f}")
    return EXIT_OK if report["b_lower_entropy"] else EXIT_NOT_BETTER


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config, args.set)
    if cfg.task.kind == "tsv":
        raise InputError("gen-data needs a synthetic task kind (copy, reverse, dedup)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, corpus in make_task(cfg.task, cfg.seed).items():
        write_tsv(corpus, out / f"{split}.tsv")
    print(out)
    return EXIT_OK


def cmd_average(args) -> int:
    paths = [Path(p) for p in args.inputs]
    for p in paths:
        if not p.exists():
            raise InputError(f"checkpoint not found: {p}")
    avg = average_checkpoints(paths)
    meta = dict(load_metadata(paths[0]))
    meta["averaged"] = [p.name for p in paths]
    save_checkpoint(avg, args.output, meta)
    print(args.output)
    return EXIT_OK


def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("checkpoint")
    p.add_argument("--test", help="TSV test set (default: regenerate from the run config)")
    p.add_argument("--config", help="run config used to regenerate the test split")
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--beam", type=int, default=0)
    p.add_argument("--max-len", type=int, default=0)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scratchpad", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a YAML config")
    p.add_argument("config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="decode a test set and score it")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="attention entropy CDF and heatmaps")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare", help="compare two evaluated runs (A baseline, B candidate)")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gen-data", help="write synthetic train/valid/test TSV files")
    p.add_argument("config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("average-checkpoints", help="elementwise mean of checkpoints")
    p.add_argument("output")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_average)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (InputError, C.ConfigError, CorpusError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NonFiniteError, MemoryRangeError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
