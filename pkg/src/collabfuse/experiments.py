"""Experiment grid: configs, dataset cache, per-cell runs and results files.

A cell is one ``(variant, seed, p)`` triple.  Datasets depend only on the
scenario (never on the run seed), so every variant and seed of a given ``p``
is trained and tested on identical episodes.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

from .model import CollabModel, variant_spec
from .training import TrainConfig, evaluate, fit, summarize
from .world import FrameArrays, ScenarioConfig, generate_frames, stack_frames

log = logging.getLogger(__name__)

TRAIN_EPISODE_SEED = 10_000
TEST_EPISODE_SEED = 20_000
RESULT_FIELDS = ("variant", "seed", "p", "adr", "eir", "ps_kb", "epochs", "wall_seconds")
ABLATION_VARIANTS = ("full", "no_select", "no_bayes", "neither")
EMIT_FORMATS = ("csv", "json")


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "results"
    emit: str = "csv"

    def __post_init__(self):
        if self.emit not in EMIT_FORMATS:
            raise ConfigError(f"emit must be one of {EMIT_FORMATS}, got {self.emit!r}")

    def to_dict(self) -> dict:
        return {"scenario": self.scenario.to_dict(), "train": self.train.to_dict(),
                "output_dir": self.output_dir, "emit": self.emit}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            scenario = ScenarioConfig.from_dict(d.get("scenario", {}))
            train = TrainConfig.from_dict(d.get("train", {}))
            return cls(scenario, train, str(d.get("output_dir", "results")), d.get("emit", "csv"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw)


@dataclass
class ResultsRow:
    variant: str
    seed: int
    p: float
    adr: float | None
    eir: float
    ps_kb: float
    epochs: int
    wall_seconds: float

    def metrics(self) -> tuple:
        """Everything except wall time; equal across reruns."""
        return (self.variant, self.seed, self.p, self.adr, self.eir, self.ps_kb, self.epochs)


@dataclass(frozen=True)
class Cell:
    variant: str
    seed: int
    p: float


@dataclass
class CellFailure:
    cell: Cell
    error: str


# -- data ------------------------------------------------------------------

def scenario_at(scenario: ScenarioConfig, p: float) -> ScenarioConfig:
    return dataclasses.replace(scenario, corruption_prob=float(p))


@functools.lru_cache(maxsize=8)
def _datasets(scenario_key: str, n_train: int, n_test: int) -> tuple[FrameArrays, FrameArrays]:
    scenario = ScenarioConfig.from_dict(json.loads(scenario_key))
    train = stack_frames(generate_frames(scenario, n_train, TRAIN_EPISODE_SEED), scenario)
    test = stack_frames(generate_frames(scenario, n_test, TEST_EPISODE_SEED), scenario)
    return train, test


def datasets(scenario: ScenarioConfig, train: TrainConfig) -> tuple[FrameArrays, FrameArrays]:
    """Train/test arrays for a scenario, memoised within the process."""
    key = json.dumps(scenario.to_dict(), sort_keys=True)
    return _datasets(key, train.train_frames, train.test_frames)


# -- cells -----------------------------------------------------------------

def train_cell(config: ExperimentConfig, cell: Cell) -> tuple[ResultsRow, CollabModel]:
    variant_spec(cell.variant)
    scenario = scenario_at(config.scenario, cell.p)
    tcfg = dataclasses.replace(config.train, variant=cell.variant)
    train, test = datasets(scenario, tcfg)
    t0 = time.perf_counter()
    model = CollabModel(scenario, cell.variant, seed=cell.seed, config=tcfg.model)
    fit(model, train, tcfg, cell.seed)
    m = evaluate(model, test)
    row = ResultsRow(cell.variant, cell.seed, float(cell.p), m.adr, m.eir, m.ps_kb, tcfg.epochs,
                     time.perf_counter() - t0)
    log.info("cell %s seed=%d p=%.2f adr=%s eir=%.4f ps=%.4f (%.1fs)", cell.variant, cell.seed,
             cell.p, _fmt(row.adr), row.eir, row.ps_kb, row.wall_seconds)
    return row, model


def _run_cell(args) -> ResultsRow:
    config, cell = args
    return train_cell(config, cell)[0]


def grid(variants: Sequence[str], seeds: Sequence[int], ps: Sequence[float]) -> list[Cell]:
    for v in variants:
        variant_spec(v)
    return [Cell(v, int(s), float(p)) for p in ps for v in variants for s in seeds]


def run_grid(config: ExperimentConfig, cells: Sequence[Cell], jobs: int = 1
             ) -> tuple[list[ResultsRow], list[CellFailure]]:
    """Run every cell; failures are collected instead of aborting the grid.

    Rows come back in cell order regardless of ``jobs``.  Each cell seeds its
    own generators, so parallel and serial runs give identical metrics.
    """
    results: list[ResultsRow | None] = [None] * len(cells)
    failures: list[CellFailure] = []
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, (config, c)) for c in cells]
            for k, fut in enumerate(futures):
                try:
                    results[k] = fut.result()
                except Exception as exc:  # noqa: BLE001 - reported per cell
                    failures.append(CellFailure(cells[k], f"{type(exc).__name__}: {exc}"))
    else:
        for k, c in enumerate(cells):
            try:
                results[k] = _run_cell((config, c))
            except Exception as exc:  # noqa: BLE001 - reported per cell
                failures.append(CellFailure(c, f"{type(exc).__name__}: {exc}"))
    for f in failures:
        log.error("cell %s seed=%d p=%.2f failed: %s", f.cell.variant, f.cell.seed, f.cell.p, f.error)
    return [r for r in results if r is not None], failures


# -- summaries ---------------------------------------------------------------

def mean_by(rows: Iterable[ResultsRow], metric: str = "adr") -> dict[tuple[str, float], float]:
    groups: dict[tuple[str, float], list] = {}
    for r in rows:
        groups.setdefault((r.variant, r.p), []).append(getattr(r, metric))
    return {k: summarize(v).mean for k, v in groups.items()}


def ablation_summary(rows: Sequence[ResultsRow]) -> tuple[str, bool]:
    """Mean ± std per ablation variant and the ADR ordering check."""
    lines = []
    means = {}
    for v in ABLATION_VARIANTS:
        sel = [r for r in rows if r.variant == v]
        if not sel:
            continue
        adr, eir, ps = (summarize([getattr(r, k) for r in sel]) for k in ("adr", "eir", "ps_kb"))
        means[v] = adr.mean
        lines.append(f"{v:<10} adr {adr.mean:.4f} ± {adr.std:.4f}  eir {eir.mean:.4f} ± {eir.std:.4f}"
                     f"  ps_kb {ps.mean:.4f} ± {ps.std:.4f}  (n={adr.n})")
    present = [v for v in ABLATION_VARIANTS if v in means]
    ok = all(means[a] >= means[b] for a, b in zip(present, present[1:]))
    chain = " >= ".join(present)
    lines.append(f"ordering {chain} on mean ADR: {'holds' if ok else 'violated'}")
    return "\n".join(lines), ok


# -- emission ----------------------------------------------------------------

def _fmt(x) -> str:
    return "" if x is None else f"{x:.4f}"


def _row_values(row: ResultsRow) -> dict:
    d = asdict(row)
    for k in ("p", "adr", "eir", "ps_kb", "wall_seconds"):
        d[k] = None if d[k] is None else round(float(d[k]), 4)
    return d


def format_results(rows: Sequence[ResultsRow], fmt: str = "csv") -> str:
    if not rows:
        raise ValueError("no rows to emit")
    if fmt == "json":
        return json.dumps([_row_values(r) for r in rows], indent=2) + "\n"
    if fmt != "csv":
        raise ValueError(f"unknown results format {fmt!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_FIELDS)
    for r in rows:
        w.writerow([r.variant, r.seed, _fmt(r.p), _fmt(r.adr), _fmt(r.eir), _fmt(r.ps_kb), r.epochs,
                    _fmt(r.wall_seconds)])
    return buf.getvalue()


def emit_results(rows: Sequence[ResultsRow], path, fmt: str = "csv") -> str:
    """Write rows to ``path``; returns the text written."""
    text = format_results(rows, fmt)
    with open(path, "w") as fh:
        fh.write(text)
    return text


def read_results(path) -> list[ResultsRow]:
    """Parse a results file written by :func:`emit_results` (CSV or JSON)."""
    with open(path) as fh:
        text = fh.read()
    if text.lstrip().startswith("["):
        records = json.loads(text)
    else:
        records = list(csv.DictReader(io.StringIO(text)))
    out = []
    for rec in records:
        adr = rec["adr"]
        out.append(ResultsRow(rec["variant"], int(rec["seed"]), float(rec["p"]),
                              None if adr in (None, "") else float(adr), float(rec["eir"]),
                              float(rec["ps_kb"]), int(rec["epochs"]), float(rec["wall_seconds"])))
    return out


def ensure_output_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory {path} is not writable")
    return str(path)


def rows_equal_modulo_time(a: Sequence[ResultsRow], b: Sequence[ResultsRow]) -> bool:
    return [r.metrics() for r in a] == [r.metrics() for r in b]

