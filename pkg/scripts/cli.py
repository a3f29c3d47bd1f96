"""
Command-line surface: argparse subcommands, exit codes and error JSON.

Exit codes: 0 success, 2 usage error, 3 data/validation error (including
missing files), 4 numeric/degenerate-input error.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace

import pandas as pd

from .config import DEFAULT_OUT_DIR, SynthConfig, load_experiment_config, load_synth_config
from .errors import AttnScopeError, DataError
from .heatmap import GridSpec, NORM_MODES
from .io import FLOAT_FORMAT
from .pipeline import (
    run_agree,
    run_eval,
    run_heatmap,
    run_ingest,
    run_metrics,
    run_report,
    run_simulate,
    run_train,
)

SUBCOMMANDS = ("ingest", "heatmap", "metrics", "agree", "train", "eval", "simulate", "report")


def _mag_bin(text):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"magnification bin must look like LO,HI, got {text!r}")
    return (lo, hi)


def _grid(text):
    try:
        return GridSpec.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def build_parser():
    """
    Parse command-line arguments
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", "-q", action="store_true", help="Only log warnings and errors")
    common.add_argument("--seed", type=int, default=None, help="Override the config seed")
    common.add_argument("--timestamp", action="store_true", help="Record creation time in JSON manifests")

    parser = argparse.ArgumentParser(
        prog="attnscope",
        description="Pathologist attention heatmaps, agreement analysis and attention/expertise models",
    )
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True

    p = sub.add_parser("ingest", parents=[common], help="Validate session logs and summarize the cohort")
    p.add_argument("--sessions", "-s", required=True, help="Directory of *.jsonl session logs")
    p.add_argument("--out", "-o", required=True, help="Output directory")

    p = sub.add_parser("heatmap", parents=[common], help="Build one session heatmap as an ATNT file")
    p.add_argument("--session", "-s", required=True, help="Session log (.jsonl)")
    p.add_argument("--grid", "-g", type=_grid, default=GridSpec(50, 50, "10x"), help="Grid as ROWSxCOLS (default 50x50)")
    p.add_argument("--out", "-o", required=True, help="Output .atnt file")
    p.add_argument("--fraction", type=float, default=None, help="Keep the first fraction of viewing time")
    p.add_argument("--mag-bin", type=_mag_bin, default=None, help="Keep magnifications in (LO,HI]")
    p.add_argument("--norm", choices=NORM_MODES, default="raw", help="Normalization (default raw)")
    p.add_argument("--blur", type=float, default=None, help="Gaussian blur sigma in cells")
    p.add_argument("--svg", default=None, help="Also render the map as SVG")

    p = sub.add_parser("metrics", parents=[common], help="CC, NSS and KLD of a predicted map vs a ground truth")
    p.add_argument("--pred", "-p", required=True, help="Predicted heatmap (.atnt)")
    p.add_argument("--gt", "-g", required=True, help="Ground-truth heatmap (.atnt)")
    p.add_argument("--fixations", "-f", default=None, help="CSV of fixation cells (row,col)")
    p.add_argument("--zero-policy", choices=("floor", "discard"), default="floor", help="KLD zero handling")
    p.add_argument("--direction", choices=("gt_pred", "pred_gt"), default="gt_pred", help="KLD direction")

    p = sub.add_parser("agree", parents=[common], help="Attention agreement vs grade concordance per expertise")
    p.add_argument("--sessions", "-s", required=True, help="Directory of *.jsonl session logs")
    p.add_argument("--out", "-o", default=DEFAULT_OUT_DIR, help=f"Output directory (default {DEFAULT_OUT_DIR})")
    p.add_argument("--grid", "-g", type=_grid, default=GridSpec(50, 50, "10x"), help="Agreement grid (default 50x50)")

    for name, text in (("train", "k-fold training tables and checkpoints"), ("eval", "Cohort model comparison and checkpoint scoring")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--config", "-c", required=True, help="Experiment config (JSON)")
        p.add_argument("--out", "-o", default=None, help="Override the configured output directory")
        if name == "train":
            p.add_argument("--models", nargs="+", choices=("attention", "expertise"), default=["attention", "expertise"])

    p = sub.add_parser("simulate", parents=[common], help="Generate a synthetic cohort")
    p.add_argument("--config", "-c", default=None, help="Simulation config (JSON, optionally under a 'simulate' key)")
    p.add_argument("--out", "-o", required=True, help="Output directory")

    p = sub.add_parser("report", parents=[common], help="Render SVG and markdown from a run directory")
    p.add_argument("--run", "-r", required=True, help="Run directory holding agree/train/eval outputs")

    return parser


def _experiment(args):
    cfg = load_experiment_config(args.config, args.seed)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def dispatch(args):
    cmd = args.command
    if cmd == "ingest":
        run_ingest(args.sessions, args.out)
    elif cmd == "heatmap":
        run_heatmap(args.session, args.grid, args.out, args.fraction, args.mag_bin, args.norm, args.blur, args.svg)
    elif cmd == "metrics":
        scores = run_metrics(args.pred, args.gt, args.fixations, args.zero_policy, args.direction)
        pd.DataFrame([scores], columns=["cc", "nss", "kld"]).to_csv(sys.stdout, index=False, float_format=FLOAT_FORMAT)
    elif cmd == "agree":
        run_agree(args.sessions, args.out, args.grid)
    elif cmd == "train":
        run_train(_experiment(args), tuple(args.models), args.timestamp)
    elif cmd == "eval":
        run_eval(_experiment(args))
    elif cmd == "simulate":
        synth = load_synth_config(args.config, args.seed) if args.config else SynthConfig(seed=args.seed or 0)
        run_simulate(synth, args.out, args.timestamp)
    elif cmd == "report":
        run_report(args.run)


def _error(e):
    print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)


def run(argv=None):
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 2

    if args.quiet:
        logging.getLogger().setLevel(logging.WARNING)

    try:
        dispatch(args)
    except AttnScopeError as e:
        _error(e)
        return e.exit_code
    except (FileNotFoundError, ValueError) as e:
        _error(e)
        return DataError.exit_code
    return 0
