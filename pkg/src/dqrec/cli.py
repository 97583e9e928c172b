"""Command-line entry point.

Every subcommand accepts ``--config FILE`` plus one ``--<field>`` flag per
:class:`~dqrec.config.RunConfig` field (underscores become dashes). Flags
override the file, which overrides the defaults. With ``dataset =
synthetic`` the synthetic preset is the starting point unless
``--preset none`` is given.

Artifacts live under ``<root>/<run>``; the root comes from ``--artifacts``,
then ``$DQREC_ARTIFACT_ROOT``, then ``./artifacts``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import STAGES, RunConfig, parse_config_text, parse_value, synthetic_config
from .pipeline import (ARTIFACT_ENV, StageError, artifact_root, inspect_ids, read_metrics, run_pipeline, run_stage,
                       sweep)

LOG_FORMAT = "%(asctime)s %(levelname)s [%(stage)s] %(message)s"


class _StageTag(logging.Filter):
    def filter(self, record):
        record.stage = record.name.rsplit(".", 1)[-1]
        return True


def setup_logging(verbose: int = 0) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, "%H:%M:%S"))
    handler.addFilter(_StageTag())
    root = logging.getLogger("dqrec")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING)
    root.propagate = False


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", help="key = value config file")
    g.add_argument("--preset", choices=("auto", "none"), default="auto",
                   help="start from the synthetic preset when dataset is synthetic (default auto)")
    g.add_argument("--artifacts", help=f"artifact root (default ${ARTIFACT_ENV} or ./artifacts)")
    g.add_argument("--run", default="default", help="run name under the artifact root")
    g.add_argument("-v", "--verbose", action="count", default=1)
    g.add_argument("-q", "--quiet", action="store_const", const=0, dest="verbose")
    for f in fields(RunConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", metavar="VALUE")


def build_config(args) -> RunConfig:
    values = {}
    if args.config:
        values |= parse_config_text(Path(args.config).read_text(encoding="utf-8"), args.config)
    for f in fields(RunConfig):
        raw = getattr(args, f"cfg_{f.name}")
        if raw is not None:
            values[f.name] = parse_value(f.name, raw)
    synthetic = values.get("dataset", RunConfig.dataset) == "synthetic"
    if synthetic and args.preset == "auto":
        return synthetic_config(**values)
    return RunConfig(**values)


def _write_rows(rows, out) -> None:
    fh = open(out, "w", newline="", encoding="utf-8") if out else sys.stdout
    try:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    finally:
        if out:
            fh.close()


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dqrec", description="Semantic-id quantization and augmented recommender")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage (upstream stages must be done)")
        _add_config_flags(p)
    p = sub.add_parser("pipeline", help="run all stages, skipping those already done")
    _add_config_flags(p)
    p.add_argument("--force", action="store_true", help="rerun every stage")
    p.add_argument("--stop-after", choices=STAGES, default="eval")
    p = sub.add_parser("inspect", help="semantic ids, history categories and pairwise overlap")
    _add_config_flags(p)
    p.add_argument("--kind", choices=("user", "item"), required=True)
    p.add_argument("--out", help="CSV output path (default stdout)")
    p.add_argument("ids", nargs="+", help="external entity ids")
    p = sub.add_parser("sweep", help="rerun downstream stages over values of K, J or L")
    _add_config_flags(p)
    p.add_argument("--axis", choices=("K", "J", "L"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        config = build_config(args)
        run_dir = artifact_root(args.artifacts) / args.run
        if args.command in STAGES:
            run_stage(config, run_dir, args.command)
            if args.command == "eval":
                _write_rows(list(read_metrics(run_dir).values()), None)
        elif args.command == "pipeline":
            rows = run_pipeline(config, run_dir, args.stop_after, args.force)
            _write_rows(list(rows.values()), None)
        elif args.command == "inspect":
            _write_rows(inspect_ids(config, run_dir, args.kind, args.ids), args.out)
        elif args.command == "sweep":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            _write_rows(sweep(config, args.axis, values, run_dir / "sweeps"), None)
    except (StageError, ValueError, KeyError, OSError) as exc:
        logging.getLogger("dqrec.cli").error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
