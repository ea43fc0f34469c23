"""Command-line experiment runner.

Subcommands: ``train``, ``eval``, ``sweep``, ``ablate``, ``selftest``.
Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
Log verbosity comes from ``COLLABFUSE_LOG`` (e.g. ``DEBUG``, ``INFO``).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from typing import Sequence

from . import checkpoint
from .experiments import (
    ABLATION_VARIANTS, Cell, ConfigError, ExperimentConfig, ResultsRow, ablation_summary, datasets,
    emit_results, ensure_output_dir, grid, run_grid, scenario_at, train_cell,
)
from .model import VARIANTS
from .training import TrainingDiverged, evaluate

log = logging.getLogger("collabfuse")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
LOG_ENV = "COLLABFUSE_LOG"
DEFAULT_SWEEP_P = (0.3, 0.5, 0.7)
DEFAULT_SWEEP_VARIANTS = ("full", "blind_fusion")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if any(not 0.0 <= v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError(f"corruption probabilities must lie in [0, 1], got {text!r}")
    return vals


def _variant_list(text: str) -> list[str]:
    tags = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in tags if t not in VARIANTS]
    if bad or not tags:
        raise argparse.ArgumentTypeError(f"unknown variant(s) {bad or text!r}; choose from {sorted(VARIANTS)}")
    return tags


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config (defaults if omitted)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
    common.add_argument("--epochs", type=int, metavar="N", help="override train.epochs")
    common.add_argument("--emit", choices=("csv", "json"), help="results format (overrides config)")

    parser = _Parser(prog="collabfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train one variant and write a checkpoint")
    p.add_argument("--seed", type=int, default=0, metavar="N")
    p.add_argument("--variant", type=_variant_list, metavar="TAG")
    p.add_argument("--p", type=_float_list, metavar="LIST", help="corruption probability (one value)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test episodes")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--p", type=_float_list, metavar="LIST", help="test corruption probabilities")
    p.add_argument("--seed", type=int, metavar="N", help="seed recorded in the row (default: from checkpoint)")

    for name, helptext in (("sweep", "variants x seeds x corruption grid"),
                           ("ablate", "selection / Bayesian fusion ablations")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--seeds", type=_int_list, metavar="A,B,...")
        p.add_argument("--p", type=_float_list, metavar="LIST")
        if name == "sweep":
            p.add_argument("--variant", type=_variant_list, metavar="TAG[,TAG]")
        p.add_argument("--jobs", type=int, default=1, metavar="N", help="parallel grid cells")

    sub.add_parser("selftest", help="run the built-in invariant suite")
    return parser


def _configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.epochs is not None:
        if args.epochs < 1:
            raise ConfigError("--epochs must be >= 1")
        cfg.train = dataclasses.replace(cfg.train, epochs=args.epochs)
    if args.out:
        cfg.output_dir = args.out
    if args.emit:
        cfg.emit = args.emit
    return cfg


def _results_path(cfg: ExperimentConfig, stem: str) -> str:
    return os.path.join(cfg.output_dir, f"{stem}.{cfg.emit}")


def _emit(rows: Sequence[ResultsRow], cfg: ExperimentConfig, stem: str) -> str:
    path = _results_path(cfg, stem)
    text = emit_results(rows, path, cfg.emit)
    sys.stdout.write(text)
    log.info("wrote %s", path)
    return path


def checkpoint_path(cfg: ExperimentConfig, cell: Cell) -> str:
    return os.path.join(cfg.output_dir, f"{cell.variant}_s{cell.seed}_p{cell.p:g}.ckpt")


def run_train(cfg: ExperimentConfig, seed: int, variant: str | None = None, p: float | None = None
              ) -> tuple[ResultsRow, str]:
    variant = variant or cfg.train.variant
    p = cfg.scenario.corruption_prob if p is None else p
    cell = Cell(variant, seed, float(p))
    row, model = train_cell(cfg, cell)
    path = checkpoint_path(cfg, cell)
    checkpoint.save(model, path, meta={"seed": seed, "epochs": row.epochs})
    return row, path


def run_eval(cfg: ExperimentConfig, ckpt: str, ps: Sequence[float] | None = None,
             seed: int | None = None) -> list[ResultsRow]:
    model = checkpoint.load(ckpt)
    meta = getattr(model, "meta", {})
    seed = meta.get("seed", 0) if seed is None else seed
    ps = ps or [model.scenario.corruption_prob]
    rows = []
    for p in ps:
        scenario = scenario_at(model.scenario, p)
        _, test = datasets(scenario, cfg.train)
        m = evaluate(model, test)
        rows.append(ResultsRow(model.variant, seed, float(p), m.adr, m.eir, m.ps_kb,
                               int(meta.get("epochs", 0)), 0.0))
    return rows


def _grid_command(cfg: ExperimentConfig, cells: list[Cell], jobs: int, stem: str) -> tuple[list[ResultsRow], int]:
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    rows, failures = run_grid(cfg, cells, jobs=jobs)
    if rows:
        _emit(rows, cfg, stem)
    for f in failures:
        print(f"FAILED cell variant={f.cell.variant} seed={f.cell.seed} p={f.cell.p:g}: {f.error}",
              file=sys.stderr)
    return rows, EXIT_RUNTIME if failures else EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return int(exc.code or 0)

    if args.command == "selftest":
        from .selftest import run_selftest
        return EXIT_OK if run_selftest(sys.stdout) else EXIT_RUNTIME

    try:
        cfg = load_config(args)
    except (ConfigError, OSError) as exc:
        print(f"collabfuse: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        ensure_output_dir(cfg.output_dir)
    except OSError as exc:
        print(f"collabfuse: cannot use output directory {cfg.output_dir}: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "train":
            if args.variant and len(args.variant) > 1:
                raise UsageError("train takes a single --variant")
            if args.p and len(args.p) > 1:
                raise UsageError("train takes a single --p value")
            row, path = run_train(cfg, args.seed, args.variant[0] if args.variant else None,
                                  args.p[0] if args.p else None)
            log.info("checkpoint %s", path)
            _emit([row], cfg, "train")
            return EXIT_OK
        if args.command == "eval":
            if not os.path.exists(args.checkpoint):
                raise UsageError(f"checkpoint not found: {args.checkpoint}")
            _emit(run_eval(cfg, args.checkpoint, args.p, args.seed), cfg, "eval")
            return EXIT_OK
        seeds = args.seeds or list(cfg.train.seeds)
        if args.command == "sweep":
            cells = grid(args.variant or DEFAULT_SWEEP_VARIANTS, seeds, args.p or DEFAULT_SWEEP_P)
            return _grid_command(cfg, cells, args.jobs, "sweep")[1]
        ps = args.p or [cfg.scenario.corruption_prob]
        rows, code = _grid_command(cfg, grid(ABLATION_VARIANTS, seeds, ps), args.jobs, "ablate")
        blocks = []
        for p in ps:
            sel = [r for r in rows if r.p == p]
            if sel:
                blocks.append(f"# ablation summary p={p:g}\n{ablation_summary(sel)[0]}\n")
        if blocks:
            with open(os.path.join(cfg.output_dir, "ablate_summary.txt"), "w") as fh:
                fh.writelines(blocks)
            sys.stderr.writelines(blocks)
        return code
    except UsageError as exc:
        print(f"collabfuse: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except checkpoint.CheckpointError as exc:
        print(f"collabfuse: bad checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"collabfuse: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"collabfuse: I/O failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
