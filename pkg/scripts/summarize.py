"""Print mean ± std of ADR, EIR and ps_kb per (variant, p) from one or more results CSVs.

    python scripts/summarize.py results/desk.csv [more.csv ...]
"""

import sys
from collections import defaultdict

from collabfuse.experiments import read_results
from collabfuse.training import summarize


def main(paths):
    groups = defaultdict(list)
    for path in paths:
        for row in read_results(path):
            groups[(row.p, row.variant)].append(row)
    print(f"{'p':>4} {'variant':<13} {'n':>2} {'adr':>16} {'eir':>16} {'ps_kb':>16}")
    for (p, variant), rows in sorted(groups.items()):
        cols = []
        for key in ("adr", "eir", "ps_kb"):
            s = summarize([getattr(r, key) for r in rows])
            cols.append(f"{s.mean:.4f} ± {s.std:.4f}")
        print(f"{p:>4g} {variant:<13} {len(rows):>2} " + " ".join(f"{c:>16}" for c in cols))


if __name__ == "__main__":
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    main(sys.argv[1:])
