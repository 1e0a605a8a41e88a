"""Command-line entry point.

Usage:
    cotscope ingest --config run.yaml
    cotscope chunk --config run.yaml
    cotscope annotate --config run.yaml --offline
    cotscope extract-graph --config run.yaml --offline
    cotscope metrics --config run.yaml
    cotscope correlate --config run.yaml [--stratify] [--spearman]
    cotscope glmm --config run.yaml
    cotscope select --config run.yaml --seed 0
    cotscope edit --config run.yaml --offline
    cotscope entropy --config run.yaml --offline
    cotscope report --config run.yaml

Exit codes: 0 success, 1 validation error, 2 missing upstream artifact,
3 provider failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__, pipeline
from .annotator import AnnotationError
from .config import ConfigError, RunConfig, load_config
from .corpus import CorpusError, GradingError
from .interventions import InterventionError
from .llm_client import ProviderError
from .pipeline import MissingArtifactError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_UPSTREAM = 2
EXIT_PROVIDER = 3

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cotscope",
        description="Trace metrics, reasoning-graph scoring, statistics, and causal probes "
        "for chain-of-thought corpora.",
    )
    parser.add_argument("--version", action="version", version=f"cotscope {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--out", help="output directory (overrides config out_dir)")
        p.add_argument("--cache", help="response cache directory")
        p.add_argument("--offline", action="store_true", default=None,
                       help="replay mode: serve every model call from the cache")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--jobs", type=int, help="max concurrent model calls")
        return p

    p = common(sub.add_parser("ingest", help="load and grade questions/traces JSONL"))
    p.add_argument("--questions", help="questions.jsonl path")
    p.add_argument("--traces", help="traces.jsonl path")

    p = common(sub.add_parser("chunk", help="segment CoTs at keyword boundaries"))
    p.add_argument("--keywords", help="keyword table file, one keyword per line")

    common(sub.add_parser("annotate", help="judge-label chunks progress/review + motivation"))
    common(sub.add_parser("extract-graph", help="extract reasoning graphs, quotes, branches"))
    common(sub.add_parser("metrics", help="assemble the per-trace metric table"))

    p = common(sub.add_parser("correlate", help="question-fixed-effect correlations"))
    p.add_argument("--stratify", action="store_true", help="also correlate per difficulty stratum")
    p.add_argument("--spearman", action="store_true", help="rank-transform before residualizing")
    p.add_argument("--min-rows", type=int, dest="min_rows",
                   help="smallest usable stratum (default 100)")

    common(sub.add_parser("glmm", help="random-intercept logistic fits"))
    common(sub.add_parser("select", help="bootstrap test-time selection"))

    p = common(sub.add_parser("edit", help="failed-branch editing + continuation accuracy"))
    p.add_argument("--limit", type=int, help="edit at most this many traces (0 = all)")

    p = common(sub.add_parser("entropy", help="truncation answer-entropy profiles"))
    p.add_argument("--limit", type=int, help="profile at most this many traces (0 = all)")

    common(sub.add_parser("report", help="render heatmaps and the concordance table"))
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {
        "out_dir": args.out,
        "cache_dir": args.cache,
        "offline": args.offline,
        "seed": args.seed,
        "concurrency": args.jobs,
        "questions": getattr(args, "questions", None),
        "traces": getattr(args, "traces", None),
        "keywords": getattr(args, "keywords", None),
        "min_rows": getattr(args, "min_rows", None),
    }
    cfg = load_config(args.config, overrides)
    limit = getattr(args, "limit", None)
    if limit is not None:
        if args.command == "edit":
            cfg.edit.limit = limit
        elif args.command == "entropy":
            cfg.entropy.limit = limit
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "ingest":
            info = pipeline.cmd_ingest(cfg)
        elif args.command == "chunk":
            info = pipeline.cmd_chunk(cfg)
        elif args.command == "annotate":
            info = pipeline.cmd_annotate(cfg)
        elif args.command == "extract-graph":
            info = pipeline.cmd_extract_graph(cfg)
        elif args.command == "metrics":
            info = pipeline.cmd_metrics(cfg)
        elif args.command == "correlate":
            info = pipeline.cmd_correlate(cfg, spearman=args.spearman, stratify=args.stratify)
        elif args.command == "glmm":
            info = pipeline.cmd_glmm(cfg)
        elif args.command == "select":
            info = pipeline.cmd_select(cfg)
        elif args.command == "edit":
            info = pipeline.cmd_edit(cfg)
        elif args.command == "entropy":
            info = pipeline.cmd_entropy(cfg)
        elif args.command == "report":
            info = pipeline.cmd_report(cfg)
        else:  # pragma: no cover - argparse enforces the choices
            parser.error(f"unknown command {args.command!r}")
            return EXIT_VALIDATION
    except MissingArtifactError as exc:
        logger.error("%s", exc)
        return EXIT_UPSTREAM
    except (AnnotationError, ProviderError) as exc:
        logger.error("%s", exc)
        return EXIT_PROVIDER
    except (ConfigError, CorpusError, GradingError, InterventionError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    logger.info("%s: %s", args.command, info)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
