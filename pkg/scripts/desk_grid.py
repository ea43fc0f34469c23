"""Run a desk-scale experiment grid cell by cell, rewriting the CSV after each cell.

Unlike ``collabfuse sweep`` this keeps partial results on disk while a long
grid is still running, which makes it the convenient way to watch progress.

    python scripts/desk_grid.py --variants full,blind_fusion --p 0.3,0.5,0.7 \
        --seeds 0,1,2,3 --out results/desk.csv
"""

import argparse
import logging

from collabfuse.experiments import ExperimentConfig, emit_results, grid, train_cell


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", default="full,single_agent,blind_fusion,agent_level,no_select,no_bayes,neither")
    ap.add_argument("--p", default="0.3")
    ap.add_argument("--seeds", default="0,1,2,3")
    ap.add_argument("--config", help="JSON experiment config")
    ap.add_argument("--out", default="results/desk.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cells = grid(args.variants.split(","), [int(s) for s in args.seeds.split(",")],
                 [float(p) for p in args.p.split(",")])
    rows = []
    for cell in cells:
        row, _ = train_cell(cfg, cell)
        rows.append(row)
        emit_results(rows, args.out)


if __name__ == "__main__":
    main()
