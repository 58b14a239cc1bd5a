"""Command-line entry point.

Every subcommand works inside one work directory (``--out``). Data stages are resumable, so
``fdcae-lab matrix`` on a fresh directory runs the whole pipeline, and the individual subcommands
can be used to run or inspect one stage at a time.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..config import load_config
from ..fdcae import adapt, load_model, save_model, train
from . import pipeline as P
from .matrix import (ADAPT_ARMS, Cell, RunReport, checkpoint_path, collect_pitch_stats, decode_set, model_config,
                     model_name, read_hypotheses, run_matrix, score_set, train_config, write_hypotheses)
from .report import emit_report, read_report, write_results

log = logging.getLogger("fdcae_lab")

STAGES = {
    "synth-corpus": lambda ws: P.synth_corpus(ws),
    "augment": lambda ws: (P.augment(ws), P.shift_testsets(ws)),
    "features": lambda ws: P.extract_features(ws),
    "pvectors": lambda ws: P.fit_pvectors(ws),
    "spkembed": lambda ws: P.train_spkembed(ws),
    "train-gmm": lambda ws: P.train_gmm(ws),
    "align": lambda ws: P.align_sets(ws),
    "graphs": lambda ws: P.build_graphs(ws),
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file overriding the defaults")
    common.add_argument("--seed", type=int, help="model seed (matrix: run only this seed)")
    common.add_argument("--out", type=Path, default=Path("work"), help="work directory (default: ./work)")
    common.add_argument("--jobs", type=int, help="parallel worker processes for the matrix")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="fdcae-lab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} data stage (and nothing else)")

    def model_args(p, arm=False):
        p.add_argument("--condition", choices=("baseline", "fdcae"), default="fdcae")
        p.add_argument("--aux", choices=("none", "i", "p", "i+p"), default="i+p")
        if arm:
            p.add_argument("--arm", choices=("",) + tuple(ADAPT_ARMS), default="",
                           help="use an adapted checkpoint")

    model_args(sub.add_parser("train-am", parents=[common], help="train one acoustic model"))
    p = sub.add_parser("adapt", parents=[common], help="adapt a trained model")
    model_args(p)
    p.add_argument("--arm", choices=tuple(ADAPT_ARMS), default="adapt-child")
    p = sub.add_parser("decode", parents=[common], help="decode test sets with one model")
    model_args(p, arm=True)
    p.add_argument("--test-set", action="append", help="default: every test set")
    p = sub.add_parser("score", parents=[common], help="score decoded hypotheses")
    model_args(p, arm=True)
    p.add_argument("--test-set", action="append")
    sub.add_parser("matrix", parents=[common], help="run the whole experiment matrix and write the report")
    sub.add_parser("report", parents=[common], help="re-render the report from its CSV files")
    return ap


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg.matrix.seeds[0]


def _model_name(args, seed) -> str:
    return model_name(args.condition, args.aux, seed, getattr(args, "arm", ""))


def _hyp_path(ws, args, seed, test_set) -> Path:
    return ws.root / "decode" / _model_name(args, seed) / f"{test_set}.hyp"


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    cfg = load_config(args.config)
    if args.jobs is not None:
        cfg.matrix.jobs = args.jobs
    ws = P.Workspace(args.out, cfg)
    cmd = args.command

    if cmd in STAGES:
        STAGES[cmd](ws)
        return 0

    if cmd == "matrix":
        if args.seed is not None:
            cfg.matrix.seeds = (args.seed,)
        report = run_matrix(cfg, args.out, cfg.matrix.jobs)
        emit_report(report, ws.root / "report")
        for c in report.failures():
            print(f"FAILED {c.condition}({c.aux}) {c.test_set} seed {c.seed}: {c.reason}", file=sys.stderr)
        print(f"{len(report.cells)} cells, {len(report.failures())} failed, {report.runtime_s:.0f} s; "
              f"report in {ws.root / 'report'}")
        return 0 if not report.failures() else 1

    if cmd == "report":
        report = read_report(ws.root / "report")
        if not report.pitch_stats:
            report.pitch_stats = collect_pitch_stats(ws)
        emit_report(report, ws.root / "report")
        return 0 if not report.failures() else 1

    seed = _seed(args, cfg)
    if cmd == "train-am":
        P.prepare_all(ws)
        utts = ws.train_utterances(ws.train_sets(), args.aux)
        out = checkpoint_path(ws, args.condition, args.aux, seed)
        model, train_log = train(utts, ws.topology, ws.phone_lm(), model_config(cfg, args.aux),
                                 train_config(cfg, args.condition, seed), out_dir=out.with_suffix(""))
        save_model(out, model, {"seed": seed})
        print(out)
        return 0

    if cmd == "adapt":
        seed_model = load_model(checkpoint_path(ws, args.condition, args.aux, seed))
        train_set = ws.training_name(ADAPT_ARMS[args.arm][0])
        model, _ = adapt(seed_model, ws.train_utterances([train_set], args.aux), ws.topology, ws.phone_lm(),
                         train_config(cfg, args.condition, seed), epochs=cfg.train.adapt_epochs)
        out = checkpoint_path(ws, args.condition, args.aux, seed, args.arm)
        save_model(out, model, {"seed": seed, "adapted_on": train_set})
        print(out)
        return 0

    tests = args.test_set or ws.test_sets()
    if cmd == "decode":
        # the decoder network is never needed for recognition
        model = load_model(checkpoint_path(ws, args.condition, args.aux, seed, args.arm), with_decoder=False)
        for t in tests:
            write_hypotheses(_hyp_path(ws, args, seed, t), decode_set(ws, model, t))
        return 0

    if cmd == "score":
        cells = []
        cond = args.condition + (f"+{args.arm}" if args.arm else "")
        for t in tests:
            path = _hyp_path(ws, args, seed, t)
            if path.exists():
                cells.append(Cell(cond, args.aux, t, seed, score_set(ws, t, read_hypotheses(path))))
            else:
                cells.append(Cell(cond, args.aux, t, seed, status="skipped", reason="not decoded"))
        out = ws.root / "decode" / _model_name(args, seed) / "scores.csv"
        write_results(out, cells)
        for c in cells:
            print(f"{c.test_set}\t{'-' if c.per is None else f'{c.per:.2f}'}")
        return 0 if not RunReport(cells).failures() else 1
    raise AssertionError(cmd)


if __name__ == "__main__":
    sys.exit(main())
