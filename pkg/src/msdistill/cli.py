"""Command-line interface: one subcommand per pipeline stage plus ``pipeline``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import fmat
from . import pipeline as pl
from . import similarity as sim
from . import weighting as wt
from .config import ConfigError, PipelineConfig, load_config
from .seeds import derive_seed

EXIT_STAGE_FAILURE = 1
EXIT_USAGE = 2


def _common(p):
    p.add_argument("--config", type=Path, help="JSON config file (defaults are used when omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--metric", choices=sim.METRICS)
    p.add_argument("--repr", dest="representation", choices=sim.REPRESENTATIONS)
    p.add_argument("--scheme", help="weighting scheme NAME[:param], e.g. weighted:p=12")
    p.add_argument("--schemes", help="comma-separated list of schemes to compare")
    p.add_argument("--p", type=float, help="exponent of the power scheme")
    p.add_argument("--temp", type=float, help="softmax temperature")
    p.add_argument("--lambda", dest="lam", type=float, help="weight of the labeled loss")
    p.add_argument("--labeled-fraction", type=float)
    p.add_argument("--top-k", type=int)
    p.add_argument("--out", type=Path, help="run directory (or output directory for standalone score/weigh)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="msdistill", description="Similarity-weighted multi-source distillation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("gen", "generate the synthetic universe, tasks and data splits"),
        ("train-sources", "train one source model per source task"),
        ("score", "score sources against each target's probe set"),
        ("weigh", "turn scores into source weights"),
        ("distill", "train target models for every scheme"),
        ("eval", "write the report tables"),
        ("pipeline", "run every stage in order"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _common(p)
        if name == "score":
            p.add_argument("--features", type=Path, nargs="+", help="FMAT matrices, one per source")
            p.add_argument("--labels", type=Path, help="probe label CSV (index,label)")
        if name == "weigh":
            p.add_argument("--scores", type=Path, help="scores CSV from a standalone score run")
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    changes = {}
    for key in ("seed", "metric", "representation", "p", "lam", "top_k"):
        value = getattr(args, key)
        if value is not None:
            changes[key] = value
    if args.temp is not None:
        changes["temperature"] = args.temp
    if args.scheme and args.schemes:
        raise ConfigError("give either --scheme or --schemes, not both")
    if args.scheme:
        changes["schemes"] = [args.scheme]
    if args.schemes:
        changes["schemes"] = [s for s in args.schemes.split(",") if s.strip()]
    if args.labeled_fraction is not None:
        changes["data"] = dataclasses.replace(cfg.data, labeled_fraction=args.labeled_fraction)
    if args.out is not None:
        changes["output_dir"] = str(args.out)
    try:
        return dataclasses.replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _score_standalone(args, cfg):
    if not args.labels:
        raise ConfigError("--features needs --labels")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    scores = pl.score_external(args.features, args.labels, cfg.metric, cfg.representation)
    (out / "scores.csv").write_text(sim.scores_to_csv(scores))
    inputs = {str(p): fmat.file_digest(p) for p in [*args.features, args.labels]}
    pl.write_manifest(out, "score", cfg, inputs)


def _weigh_standalone(args, cfg):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    scores = sim.scores_from_csv(Path(args.scores).read_text())
    if len(cfg.schemes) != 1:
        raise ConfigError("standalone weigh takes exactly one --scheme")
    name, param = pl.resolve_scheme(cfg.schemes[0], cfg)
    w = pl.weigh_scores(scores, name, param, derive_seed(cfg.seed, "weights", name), cfg.top_k)
    (out / "weights.csv").write_text(wt.weights_to_csv(w))
    pl.write_manifest(out, "weigh", cfg, {str(args.scores): fmat.file_digest(args.scores)})


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    stage = args.command
    try:
        cfg = resolve_config(args)
        if stage == "score" and args.features:
            _score_standalone(args, cfg)
        elif stage == "weigh" and args.scores:
            _weigh_standalone(args, cfg)
        elif stage == "pipeline":
            pl.run_pipeline(cfg, cfg.output_dir)
        else:
            pl.run_stage(stage, cfg, cfg.output_dir)
    except ConfigError as exc:
        print(f"msdistill: [{stage}] config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pl.StageError as exc:
        print(f"msdistill: [{exc.stage}] error: {exc}", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    except (OSError, ValueError) as exc:
        print(f"msdistill: [{stage}] error: {exc}", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    return 0


def main():
    sys.exit(run())
