"""Command-line entry point: gen, train, eval, ablate-suite, gradcheck.

Exit codes: 0 success, 1 gradient check failed, 2 I/O error, 3 config
error, 4 numeric abort, 5 checkpoint or file-format mismatch.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import config as cfgmod
from .base_model import expected_shapes
from .checkpoint import CheckpointError, load_checkpoint
from .corpus import FormatError, SpecError, generate_corpus, load_split, write_corpus
from .evaluator import EvalReport, evaluate, evaluate_proposals, localize
from .graph import debug_dump
from .numerics import ContractError
from .trainer import ABLATIONS, NumericAbort, apply_ablation, grad_check, train

log = logging.getLogger("ddgnet")

EXIT_OK, EXIT_GRADCHECK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5

CHECKPOINT_NAME = "checkpoint.ddgc"
LOG_NAME = "train_log.csv"
REPORT_NAME = "report.csv"
EFFECTIVE_CONFIG_NAME = "effective.cfg"
SUITE_NAME = "ablation_suite.csv"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _train_config(run: cfgmod.RunConfig, ablation: str | None):
    cfg = run.train_config
    return apply_ablation(cfg, ablation) if ablation else cfg


def _run_dir(run: cfgmod.RunConfig, override=None) -> Path:
    path = Path(override or run.paths.run_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_effective(run: cfgmod.RunConfig, out: Path) -> None:
    (out / EFFECTIVE_CONFIG_NAME).write_text(cfgmod.dumps(run))


# ---------------------------------------------------------------- commands


def cmd_gen(run: cfgmod.RunConfig, args) -> int:
    train_set, test_set = generate_corpus(run.corpus)
    root = Path(args.out or run.paths.data_dir)
    write_corpus(root, train_set, test_set)
    print(f"wrote {len(train_set) + len(test_set)} videos to {root}: "
          f"{len(train_set)} train / {len(test_set)} test")
    return EXIT_OK


def _train_one(run, cfg, out: Path, threads: int):
    data = Path(run.paths.data_dir)
    train_set = load_split(data, "train", run.corpus.num_categories)
    eval_fn = None
    if run.eval_every:
        test_set = load_split(data, "test", run.corpus.num_categories)

        def eval_fn(params):
            shape = cfg.model_shape(run.corpus.feature_dim, run.corpus.num_categories)
            return evaluate(test_set, params, cfg, shape, run.eval, threads).average

    log_path = out / LOG_NAME
    if log_path.exists():
        log_path.unlink()
    return train(train_set, cfg, checkpoint_path=out / CHECKPOINT_NAME, log_path=log_path,
                 eval_fn=eval_fn, eval_every=run.eval_every)


def cmd_train(run: cfgmod.RunConfig, args) -> int:
    cfg = _train_config(run, args.ablate)
    out = _run_dir(run, args.run_dir)
    _write_effective(run, out)
    result = _train_one(run, cfg, out, args.threads)
    last = result.history[-1]
    print(f"trained {cfg.epochs} epochs: base {last['base_loss']:.6f} lfc {last['lfc']:.6f} "
          f"total {last['total']:.6f}; checkpoint {out / CHECKPOINT_NAME}")
    return EXIT_OK


def _evaluate_run(run, cfg, checkpoint: Path, out: Path, threads: int, dump: bool) -> EvalReport:
    shape = cfg.model_shape(run.corpus.feature_dim, run.corpus.num_categories)
    params = load_checkpoint(checkpoint, expected_shapes(shape))
    test_set = load_split(Path(run.paths.data_dir), "test", run.corpus.num_categories)

    def run_video(video):
        return localize(params, video, cfg, shape, run.eval)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run_video, test_set))
    else:
        results = [run_video(v) for v in test_set]
    proposals = [p for props, _ in results for p in props]
    report = evaluate_proposals(proposals, {v.video_id: v.segments for v in test_set},
                                run.eval.iou_thresholds)
    report.write_csv(out / REPORT_NAME)
    att_dir = out / "attention"
    att_dir.mkdir(exist_ok=True)
    if dump:
        (out / "debug").mkdir(exist_ok=True)
    for video, (_, fwd) in zip(test_set, results):
        write_attention_csv(att_dir / f"{video.video_id}.csv", fwd)
        if dump and fwd.subgraphs:
            text = "".join(f"[{m}]\n{debug_dump(sub)}" for m, sub in fwd.subgraphs.items())
            (out / "debug" / f"{video.video_id}.txt").write_text(text)
    return report


def write_attention_csv(path, fwd) -> None:
    """Per snippet: raw pre-classification attention, final fused attention, partition tag."""
    tags = fwd.context.partition.tags()
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "att_rgb", "att_flow", "att_fused", "partition_tag"])
        for t, tag in enumerate(tags):
            w.writerow([t + 1, repr(float(fwd.context.pre_rgb[0, t])),
                        repr(float(fwd.context.pre_flow[0, t])),
                        repr(float(fwd.att.value[0, t])), tag])


def _map_row(report: EvalReport) -> str:
    cells = [f"{t:g}:{m * 100:.2f}" for t, m in zip(report.iou_thresholds, report.map_per_iou)]
    return "mAP " + " ".join(cells) + f" Avg:{report.average * 100:.2f}"


def cmd_eval(run: cfgmod.RunConfig, args) -> int:
    cfg = _train_config(run, args.ablate)
    out = _run_dir(run, args.run_dir)
    checkpoint = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_NAME
    report = _evaluate_run(run, cfg, checkpoint, out, args.threads, args.debug_dump)
    print(_map_row(report))
    return EXIT_OK


def cmd_ablate_suite(run: cfgmod.RunConfig, args) -> int:
    names = args.variants.split(",") if args.variants else list(ABLATIONS)
    for n in names:
        if n not in ABLATIONS:
            raise CliError(f"unknown ablation {n!r}; choose from {sorted(ABLATIONS)}", EXIT_CONFIG)
    out = _run_dir(run, args.run_dir)
    _write_effective(run, out)
    rows = []
    for name in names:
        sub = out / name
        sub.mkdir(exist_ok=True)
        cfg = _train_config(run, name)
        _train_one(run, cfg, sub, args.threads)
        report = _evaluate_run(run, cfg, sub / CHECKPOINT_NAME, sub, args.threads, False)
        rows.append((name, report))
        print(f"{name:14s} {_map_row(report)}", flush=True)
    ious = run.eval.iou_thresholds
    with open(out / SUITE_NAME, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["variant"] + [f"{t:g}" for t in ious] + ["Avg"])
        for name, report in rows:
            w.writerow([name] + [f"{m:.6f}" for m in report.map_per_iou] + [f"{report.average:.6f}"])
    return EXIT_OK


def cmd_gradcheck(run: cfgmod.RunConfig, args) -> int:
    g = run.gradcheck
    cfg = _train_config(run, args.ablate)
    report = grad_check(cfg, T=g.snippets, D=g.feature_dim, C=g.num_categories, seed=g.seed,
                        eps=g.eps, tolerance=g.tolerance, force_bug=args.force_bug)
    for name, err in report.configs.items():
        print(f"{name}: max relative error {err:.3e}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"max relative error {report.max_rel_error:.3e} (tolerance {report.tolerance:g}): {verdict}")
    return EXIT_OK if report.passed else EXIT_GRADCHECK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate-suite": cmd_ablate_suite,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddgnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file (defaults when omitted)")
        return p

    p = add("gen", "generate the synthetic corpus")
    p.add_argument("--out", help="output directory (default paths.data_dir)")
    for name, text in (("train", "train a model"), ("eval", "evaluate a checkpoint on the test split")):
        p = add(name, text)
        p.add_argument("--ablate", choices=sorted(ABLATIONS))
        p.add_argument("--run-dir")
        p.add_argument("--threads", type=int, default=1)
        if name == "eval":
            p.add_argument("--checkpoint")
            p.add_argument("--debug-dump", action="store_true", help="write per-video graph dumps")
    p = add("ablate-suite", "train and evaluate every ablation variant")
    p.add_argument("--variants", help=f"comma list from {','.join(ABLATIONS)}")
    p.add_argument("--run-dir")
    p.add_argument("--threads", type=int, default=1)
    p = add("gradcheck", "compare analytic and finite-difference gradients")
    p.add_argument("--ablate", choices=sorted(ABLATIONS))
    p.add_argument("--force-bug", action="store_true", help="corrupt one gradient (negative control)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "threads", 1) < 1:
            raise CliError("--threads must be >= 1", EXIT_CONFIG)
        run = cfgmod.load(args.config)
        return COMMANDS[args.command](run, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (cfgmod.ConfigError, SpecError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, FormatError) as exc:
        print(f"checkpoint/format mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
