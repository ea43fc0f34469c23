"""Acceptance criteria 1-10.

Each test prints (and records for the terminal summary) one line of the form
``criterion N: PASS|FAIL  <measured values>``.  Criteria 5-9 share one
desk-scale experiment grid trained once per session on the default scenario
(4 seeds, 50 epochs, 8k train / 4k test frames); expect roughly 40 minutes
on a single CPU core.
"""

import json
import time

import numpy as np
import pytest
from scipy import stats

from collabfuse import comms
from collabfuse.autodiff import OP_KINDS, Tape, Tensor
from collabfuse.cli import main
from collabfuse.experiments import Cell, ExperimentConfig, datasets, mean_by, read_results, train_cell
from collabfuse.fusion import aggregate_modality
from collabfuse.selection import gumbel_noise, hard_select, soft_select, straight_through
from collabfuse.selftest import check_networks, check_op
from collabfuse.training import evaluate, uncertainty_separation

from conftest import ACCEPTANCE_LINES

SEEDS = (0, 1, 2, 3)
MAIN_VARIANTS = ("full", "single_agent", "blind_fusion", "agent_level", "no_select", "no_bayes", "neither")
SWEEP_P = (0.3, 0.5, 0.7)


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


# -- 1-4: exact property suites ---------------------------------------------------

def test_criterion_1_autodiff_oracle():
    t0 = time.perf_counter()
    worst = {kind: check_op(kind, points=20) for kind in OP_KINDS}
    nets = check_networks(points=20)
    elapsed = time.perf_counter() - t0
    err = max(max(worst.values()), max(nets.values()))
    ok = err < 1e-4 and elapsed < 30 and set(nets) == {"encoder", "policy", "fusion"}
    report(1, ok, f"max rel err {err:.2e} over {len(OP_KINDS)} op kinds + {len(nets)} networks, {elapsed:.1f}s")
    assert ok


def test_criterion_2_gumbel_max_law():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    pvals = []
    n = 100_000
    for _ in range(10):
        l = rng.normal(scale=1.5, size=2)
        z = hard_select(np.broadcast_to(l, (n, 2)), gumbel_noise(rng, (n, 2)))
        p = np.exp(l - l.max())
        p /= p.sum()
        k = z.sum()
        pvals.append(stats.chisquare([n - k, k], n * p).pvalue)
    elapsed = time.perf_counter() - t0
    passed = sum(pv > 0.01 for pv in pvals)
    ok = passed >= 9 and elapsed < 30
    report(2, ok, f"{passed}/10 p-values > 0.01 (min {min(pvals):.3f}), {elapsed:.1f}s")
    assert ok


def test_criterion_3_straight_through():
    rng = np.random.default_rng(11)
    n = 10_000
    l = Tensor(rng.normal(scale=2, size=(n, 2)), requires_grad=True)
    g = gumbel_noise(rng, (n, 2))
    c = rng.normal(size=n)
    with Tape() as tape:
        p = soft_select(l, g)
        z = straight_through(hard_select(l, g), p)
        tape.backward((z * c).sum(axis=0))
    binary = bool(np.all((z.data == 0) | (z.data == 1))) and np.array_equal(z.data, hard_select(l, g))
    noisy = l.data + g
    s = 1.0 / (1.0 + np.exp(-(noisy[:, 1] - noisy[:, 0])))
    symbolic = np.stack([-c * s * (1 - s), c * s * (1 - s)], axis=1)
    err = float(np.max(np.abs(l.grad - symbolic)))
    ok = binary and err <= 1e-12
    report(3, ok, f"forward binary on {n} draws: {binary}, max grad err {err:.1e}")
    assert ok


def test_criterion_4_bayesian_fusion():
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(1000):
        mu = rng.normal(scale=3, size=2)
        var = np.exp(rng.uniform(-3, 3, size=2))
        oracle = (var[1] * mu[0] + var[0] * mu[1]) / (var[0] + var[1])
        got = aggregate_modality([(mu[:1], np.log(var[:1]), 1.0), (mu[1:], np.log(var[1:]), 1.0)], eps=0.0).item()
        worst = max(worst, abs(got - oracle))
    sup_err, exact = 0.0, True
    for _ in range(200):
        f = rng.normal(size=(2, 16))
        u = rng.uniform(-1, 1, size=(2, 16))
        alone = aggregate_modality([(f[0], u[0], 1.0)]).data
        sup = aggregate_modality([(f[0], u[0], 1.0), (f[1], np.full(16, 20.0), 1.0)]).data
        sup_err = max(sup_err, float(np.max(np.abs(sup - alone) / np.maximum(np.abs(alone), 1.0))))
        zero = aggregate_modality([(f[0], u[0], 1.0), (f[1], u[1], 0.0)]).data
        exact &= bool(np.array_equal(zero, alone))
    ok = worst <= 1e-12 and sup_err < 1e-6 and exact
    report(4, ok, f"posterior err {worst:.1e}, suppression rel {sup_err:.1e}, Z=0 exact {exact}")
    assert ok


# -- 5-9: desk-scale experiment grid ------------------------------------------------

@pytest.fixture(scope="session")
def experiment():
    cfg = ExperimentConfig()
    rows, models = [], {}
    cells = [Cell(v, s, 0.3) for v in MAIN_VARIANTS for s in SEEDS]
    cells += [Cell(v, s, p) for p in SWEEP_P[1:] for v in ("full", "blind_fusion") for s in SEEDS]
    for cell in cells:
        row, model = train_cell(cfg, cell)
        rows.append(row)
        if cell.p == 0.3 and cell.variant in ("full", "blind_fusion"):
            models[(cell.variant, cell.seed)] = model
    return cfg, rows, models


def _adr(rows, variant, p=0.3):
    return mean_by(rows)[(variant, p)]


@pytest.mark.slow
def test_criterion_5_main_result(experiment):
    _, rows, _ = experiment
    full, solo, blind, agent = (_adr(rows, v) for v in ("full", "single_agent", "blind_fusion", "agent_level"))
    slowest = max(r.wall_seconds for r in rows)
    ok = full >= solo + 0.08 and full >= blind + 0.03 and full >= agent + 0.02 and slowest < 600
    report(5, ok, f"ADR full {full:.4f} | single {solo:.4f} (+{full - solo:.4f}) | blind {blind:.4f} "
                  f"(+{full - blind:.4f}) | agent {agent:.4f} (+{full - agent:.4f}); slowest cell {slowest:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_6_ablation_ordering(experiment):
    _, rows, _ = experiment
    a = {v: _adr(rows, v) for v in ("full", "no_select", "no_bayes", "neither")}
    chain = [("full", "no_select"), ("no_select", "no_bayes"), ("no_bayes", "neither")]
    gaps = {f"{x}-{y}": a[x] - a[y] for x, y in chain}
    drop_sel, drop_bayes = a["full"] - a["no_select"], a["full"] - a["no_bayes"]
    ok = all(g >= -0.01 for g in gaps.values()) and drop_bayes > drop_sel
    detail = " ".join(f"{k}={v:.4f}" for k, v in a.items())
    report(6, ok, f"{detail}; drop(no_bayes) {drop_bayes:.4f} vs drop(no_select) {drop_sel:.4f}")
    assert ok


@pytest.mark.slow
def test_criterion_7_robustness_slope(experiment):
    _, rows, _ = experiment
    deg = {v: _adr(rows, v, 0.3) - _adr(rows, v, 0.7) for v in ("full", "blind_fusion")}
    curve = {v: [round(_adr(rows, v, p), 4) for p in SWEEP_P] for v in deg}
    ok = deg["full"] < deg["blind_fusion"]
    report(7, ok, f"ADR drop p=0.3->0.7: full {deg['full']:.4f}, blind {deg['blind_fusion']:.4f}; curves {curve}")
    assert ok


@pytest.mark.slow
def test_criterion_8_bandwidth(experiment):
    cfg, rows, models = experiment
    ps = {v: mean_by(rows, "ps_kb")[(v, 0.3)] for v in ("full", "blind_fusion")}
    _, test = datasets(cfg.scenario, cfg.train)
    D = cfg.train.model.embed_dim
    conserved = True
    meta = feature_blind = 0
    for s in SEEDS:
        _, logs = evaluate(models[("full", s)], test, return_logs=True)
        conserved &= all(log.feature_bytes == comms.feature_packet_bytes(D) * log.accepted_pairs
                         and log.total_bytes == log.meta_bytes + log.feature_bytes for log in logs)
        meta += sum(log.meta_bytes for log in logs)
        _, blogs = evaluate(models[("blind_fusion", s)], test, return_logs=True)
        feature_blind += sum(log.feature_bytes for log in blogs)
    ratio = meta / feature_blind
    ok = ps["full"] < ps["blind_fusion"] and conserved and ratio < 0.1
    report(8, ok, f"ps_kb full {ps['full']:.4f} < blind {ps['blind_fusion']:.4f}; conservation {conserved}; "
                  f"meta/blind-feature bytes {ratio:.4f}")
    assert ok


@pytest.mark.slow
def test_criterion_9_uncertainty_separation(experiment):
    cfg, _, models = experiment
    _, test = datasets(cfg.scenario, cfg.train)
    seps = {s: uncertainty_separation(models[("full", s)], test) for s in SEEDS}
    ok = all(c > k for sep in seps.values() for c, k in sep.values())
    detail = "; ".join(f"s{s} " + " ".join(f"{m} {c:.3f}>{k:.3f}" for m, (c, k) in sep.items())
                       for s, sep in seps.items())
    report(9, ok, f"mean rho corrupted > clean: {detail}")
    assert ok


# -- 10: determinism --------------------------------------------------------------

@pytest.mark.slow
def test_criterion_10_determinism(experiment, tmp_path, capsys):
    cfg, rows, _ = experiment
    rerun, _ = train_cell(cfg, Cell("full", 0, 0.3))
    grid_row = next(r for r in rows if (r.variant, r.seed, r.p) == ("full", 0, 0.3))
    same = {"grid cell": rerun.metrics() == grid_row.metrics()}

    small = {"train": {"epochs": 2, "train_frames": 400, "test_frames": 200}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(small))

    def metrics_of(args, stem, out):
        code = main([str(a) for a in args] + ["--config", str(path), "--out", str(out)])
        assert code == 0
        return [r.metrics() for r in read_results(out / f"{stem}.csv")]

    for name, args in {
        "train": ["train", "--seed", 5],
        "sweep": ["sweep", "--variant", "full,blind_fusion", "--seeds", "0,1", "--p", "0.3,0.7"],
        "ablate": ["ablate", "--seeds", "0"],
    }.items():
        same[name] = metrics_of(args, name, tmp_path / "a") == metrics_of(args, name, tmp_path / "b")
    ckpt = tmp_path / "a" / "full_s5_p0.3.ckpt"
    same["train checkpoint bytes"] = ckpt.read_bytes() == (tmp_path / "b" / ckpt.name).read_bytes()
    same["eval"] = (metrics_of(["eval", "--checkpoint", ckpt], "eval", tmp_path / "a")
                    == metrics_of(["eval", "--checkpoint", ckpt], "eval", tmp_path / "b"))
    capsys.readouterr()  # drop the results text the commands above echoed
    outs = []
    for _ in range(2):
        assert main(["selftest"]) == 0
        outs.append(capsys.readouterr().out)
    same["selftest"] = outs[0] == outs[1]
    ok = all(same.values())
    report(10, ok, "bitwise-identical reruns: " + ", ".join(f"{k}={v}" for k, v in same.items()))
    assert ok
