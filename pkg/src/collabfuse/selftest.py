"""Built-in invariant suite behind ``collabfuse selftest``.

Each check returns ``(ok, detail)``.  The suite is deterministic and takes a
few seconds; the full pytest suite covers the same ground more thoroughly.
"""

from __future__ import annotations

import math
import sys
from typing import Callable

import numpy as np

from . import comms
from .autodiff import OP_KINDS, Tape, Tensor, forward, grad_check
from .encoders import GaussianEncoder, encode
from .fusion import FusionLayer, aggregate, aggregate_modality, fuse, predict
from .selection import SelectionPolicy, gumbel_noise, hard_select, policy_logits, soft_select, straight_through

GRAD_TOL = 1e-4


def _away_from_zero(rng, shape, lo=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 2.0, size=shape)


# kind -> (input sampler, op application); inputs are perturbed by grad_check
OP_CASES: dict[str, tuple[Callable, Callable]] = {
    "matmul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))],
               lambda a, b: forward("matmul", [a, b])),
    "add": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))],
            lambda a, b: forward("add", [a, b])),
    "sub": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))],
            lambda a, b: forward("sub", [a, b])),
    "elemwise-mul": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(3, 1))],
                     lambda a, b: forward("elemwise-mul", [a, b])),
    "div": (lambda r: [r.normal(size=(3, 4)), r.uniform(0.5, 2.0, size=(4,))],
            lambda a, b: forward("div", [a, b])),
    "scalar-mul": (lambda r: [r.normal(size=(3, 4))], lambda a: forward("scalar-mul", [a], c=-2.5)),
    "relu": (lambda r: [_away_from_zero(r, (3, 4))], lambda a: forward("relu", [a])),
    "tanh": (lambda r: [r.normal(size=(3, 4))], lambda a: forward("tanh", [a])),
    "exp": (lambda r: [r.normal(size=(3, 4))], lambda a: forward("exp", [a])),
    "neg": (lambda r: [r.normal(size=(3, 4))], lambda a: forward("neg", [a])),
    "log": (lambda r: [r.uniform(0.2, 3.0, size=(3, 4))], lambda a: forward("log", [a])),
    "sigmoid": (lambda r: [r.normal(size=(3, 4)) * 3], lambda a: forward("sigmoid", [a])),
    "softplus": (lambda r: [r.normal(size=(3, 4)) * 3], lambda a: forward("softplus", [a])),
    "mean-all": (lambda r: [r.normal(size=(3, 4))], lambda a: forward("mean-all", [a])),
    "mean-axis": (lambda r: [r.normal(size=(2, 3, 4))],
                  lambda a: forward("mean-axis", [a], axis=1, keepdims=False)),
    "sum-axis": (lambda r: [r.normal(size=(2, 3, 4))],
                 lambda a: forward("sum-axis", [a], axis=-1, keepdims=True)),
    "concat": (lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 5))],
               lambda a, b: forward("concat", [a, b], axis=-1)),
    "softmax-lastaxis": (lambda r: [r.normal(size=(3, 4)) * 2], lambda a: forward("softmax-lastaxis", [a])),
    "reshape": (lambda r: [r.normal(size=(3, 4))], lambda a: forward("reshape", [a], shape=(2, 6))),
    "index": (lambda r: [r.normal(size=(4, 3))],
              lambda a: forward("index", [a], index=(np.array([0, 2, 2, 3]), slice(None)))),
    "select-mask": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))],
                    lambda a, b: forward("select-mask", [a, b], mask=np.array([[True], [False], [True]]))),
    # finite differences see through stopgrad; check_op compares against the live branch only
    "stopgrad": (lambda r: [r.normal(size=(3, 4))],
                 lambda a: forward("add", [forward("stopgrad", [a]), forward("tanh", [a])])),
}
assert set(OP_CASES) == set(OP_KINDS)


def check_op(kind: str, points: int = 20, seed: int = 0) -> float:
    """Worst relative gradient error for one op kind over random points."""
    sample, apply = OP_CASES[kind]
    rng = np.random.default_rng([seed, OP_KINDS.index(kind)])
    worst = 0.0
    for _ in range(points):
        xs = [Tensor(a) for a in sample(rng)]
        w = Tensor(rng.normal(size=apply(*xs).shape))
        f = lambda *ts: forward("mean-all", [forward("elemwise-mul", [apply(*ts), w])])  # noqa: E731
        if kind == "stopgrad":
            worst = max(worst, _stopgrad_error(xs[0], w))
        else:
            worst = max(worst, grad_check(f, xs))
    return worst


def _stopgrad_error(a: Tensor, w: Tensor) -> float:
    """Tape gradient of stopgrad(a) + tanh(a) against finite differences of tanh(a) alone."""
    live = lambda t: forward("mean-all", [forward("elemwise-mul", [forward("tanh", [t]), w])])  # noqa: E731
    both = lambda t: forward("mean-all", [forward("elemwise-mul", [  # noqa: E731
        forward("add", [forward("stopgrad", [t]), forward("tanh", [t])]), w])])
    a.requires_grad = True
    with Tape() as tape:
        tape.backward(both(a))
    g_both = a.grad.copy()
    with Tape() as tape:
        tape.backward(live(a))
    a.requires_grad = False
    mismatch = float(np.max(np.abs(g_both - a.grad)))
    return max(mismatch, grad_check(live, a))


def _network_cases(seed: int):
    """Loss closures over each trainable network at small widths."""
    rng = np.random.default_rng(seed)
    enc = GaussianEncoder("R", 5, rng, hidden=6, dim=3)
    x = rng.normal(size=(4, 5))
    wf, wu = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))

    def enc_loss(*_):
        g = encode(Tensor(x), enc)
        return (g.f * wf).mean() + (g.u * wu).mean() + g.rho.mean()

    policy = SelectionPolicy(rng, hidden=5)
    rho = rng.uniform(0.0, 3.0, size=(6, 2))
    wl = rng.normal(size=(6, 2))

    def policy_loss(*_):
        return (policy_logits(Tensor(rho[:, 0]), Tensor(rho[:, 1]), policy) * wl).mean()

    layer = FusionLayer(("R", "L"), rng, dim=3, proj_dim=2, hidden=(4, 3))
    f = {m: rng.normal(size=(4, 3, 3)) for m in "RL"}
    u = {m: rng.uniform(0.0, 2.0, size=(4, 3, 3)) for m in "RL"}
    z = {m: (rng.uniform(size=(4, 3, 1)) < 0.6).astype(float) for m in "RL"}
    z["L"][0] = 0.0  # one empty pool exercises the learned default
    y = (rng.uniform(size=4) < 0.5).astype(float)

    def fusion_loss(*_):
        slots = [aggregate(Tensor(f[m]), Tensor(u[m]), Tensor(z[m])) for m in "RL"]
        logit = predict(fuse(slots, layer), layer)
        return (logit.softplus() - logit * y).mean()

    return [("encoder", enc.parameters(), enc_loss), ("policy", policy.parameters(), policy_loss),
            ("fusion", layer.parameters(), fusion_loss)]


def check_networks(points: int = 20, seed: int = 0) -> dict[str, float]:
    worst: dict[str, float] = {}
    for k in range(points):
        for name, params, loss in _network_cases(seed * 1000 + k):
            worst[name] = max(worst.get(name, 0.0), grad_check(loss, params))
    return worst


def chi2_sf_1dof(stat: float) -> float:
    """Survival function of the chi-square law with one degree of freedom."""
    return math.erfc(math.sqrt(max(stat, 0.0) / 2.0))


def gumbel_law(n_pairs: int = 10, draws: int = 100_000, seed: int = 0) -> list[float]:
    """p-values of accept counts against softmax(logits), one per logit pair."""
    rng = np.random.default_rng(seed)
    pvals = []
    for _ in range(n_pairs):
        l = rng.normal(scale=1.5, size=2)
        z = hard_select(np.broadcast_to(l, (draws, 2)), gumbel_noise(rng, (draws, 2)))
        p1 = 1.0 / (1.0 + math.exp(l[0] - l[1]))
        k = z.sum()
        e1, e0 = draws * p1, draws * (1 - p1)
        stat = (k - e1) ** 2 / e1 + ((draws - k) - e0) ** 2 / e0
        pvals.append(chi2_sf_1dof(stat))
    return pvals


def straight_through_contract(draws: int = 10_000, seed: int = 0, temperature: float = 1.0):
    """(forward values binary and equal to the hard sample, max gradient error)."""
    rng = np.random.default_rng(seed)
    l = Tensor(rng.normal(scale=2.0, size=(draws, 2)), requires_grad=True)
    g = gumbel_noise(rng, (draws, 2))
    w = rng.normal(size=draws)
    with Tape() as tape:
        p = soft_select(l, g, temperature)
        hard = hard_select(l, g)
        z = straight_through(hard, p)
        tape.backward((z * w).sum(axis=0))
    binary = bool(np.all((z.data == 0.0) | (z.data == 1.0)) and np.array_equal(z.data, hard))
    s = p.data * (1.0 - p.data) / temperature
    expected = np.stack([-s * w, s * w], axis=-1)
    return binary, float(np.max(np.abs(l.grad - expected)))


def fusion_oracle(cases: int = 1000, seed: int = 0) -> float:
    """Max deviation from the Gaussian posterior mean of two 1-D providers."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        f = rng.normal(scale=3.0, size=2)
        u = rng.normal(scale=2.0, size=2)
        var = np.exp(u)
        oracle = (f[0] / var[0] + f[1] / var[1]) / (1 / var[0] + 1 / var[1])
        got = aggregate_modality([(f[:1], u[:1], 1.0), (f[1:], u[1:], 1.0)], eps=0.0).item()
        worst = max(worst, abs(got - oracle) / max(1.0, abs(oracle)))
    return worst


def suppression_and_exclusion(cases: int = 200, seed: int = 0) -> tuple[float, bool]:
    rng = np.random.default_rng(seed)
    worst, exact = 0.0, True
    for _ in range(cases):
        f = rng.normal(size=(2, 4))
        u = rng.uniform(-1.0, 1.0, size=(2, 4))
        alone = aggregate_modality([(f[0], u[0], 1.0)]).data
        u_sup = u.copy()
        u_sup[1] = 20.0
        sup = aggregate_modality([(f[0], u_sup[0], 1.0), (f[1], u_sup[1], 1.0)]).data
        worst = max(worst, float(np.max(np.abs(sup - alone) / np.maximum(np.abs(alone), 1.0))))
        zero = aggregate_modality([(f[0], u[0], 1.0), (f[1], u[1], 0.0)]).data
        exact &= bool(np.array_equal(zero, alone))
    return worst, exact


def wire_checks(dim: int = 16, seed: int = 0) -> tuple[bool, float]:
    """Round trips plus the byte-conservation identity; returns (ok, meta/feature ratio)."""
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(50):
        meta = comms.MetaPacket(int(rng.integers(0, 2**16)), int(rng.integers(0, 2)), float(rng.normal()))
        ok &= comms.MetaPacket.from_bytes(meta.to_bytes()) == meta
        feat = comms.FeaturePacket(int(rng.integers(0, 2**16)), 1, rng.normal(size=dim), rng.normal(size=dim))
        ok &= comms.FeaturePacket.from_bytes(feat.to_bytes(), dim) == feat
    mods = ("R", "L")
    for _ in range(50):
        nbrs = [i for i in range(1, 4) if rng.uniform() < 0.7]
        enc = {(i, m): (rng.normal(size=dim), rng.normal(size=dim)) for i in nbrs for m in mods
               if rng.uniform() < 0.8}
        wire, meta_bytes = comms.handshake(nbrs, {k: _Enc(*v) for k, v in enc.items()}, mods)
        decisions = {k: int(rng.uniform() < 0.5) for k in enc}
        fwire, feat_bytes = comms.request_features(decisions, enc, mods, dim)
        ok &= meta_bytes == comms.META_BYTES * len(enc)
        ok &= feat_bytes == comms.feature_packet_bytes(dim) * sum(decisions.values())
    return bool(ok), comms.META_BYTES / comms.feature_packet_bytes(dim)


class _Enc:
    def __init__(self, f, u):
        self.f, self.u, self.rho = f, u, float(np.mean(u))


def run_selftest(out=sys.stdout, points: int = 20) -> bool:
    results: list[tuple[str, bool, str]] = []
    for kind in OP_KINDS:
        err = check_op(kind, points)
        results.append((f"grad {kind}", err < GRAD_TOL, f"max rel err {err:.2e}"))
    for name, err in check_networks(points).items():
        results.append((f"grad network {name}", err < GRAD_TOL, f"max rel err {err:.2e}"))
    pvals = gumbel_law()
    passed = sum(p > 0.01 for p in pvals)
    results.append(("gumbel-max law", passed >= 9, f"{passed}/10 p-values > 0.01"))
    binary, err = straight_through_contract()
    results.append(("straight-through", binary and err <= 1e-12, f"binary={binary} grad err {err:.1e}"))
    err = fusion_oracle()
    results.append(("fusion posterior mean", err <= 1e-12, f"max err {err:.1e}"))
    sup, exact = suppression_and_exclusion()
    results.append(("fusion suppression/exclusion", sup <= 1e-6 and exact, f"u=20 rel {sup:.1e}, z=0 exact={exact}"))
    ok, ratio = wire_checks()
    results.append(("wire format", ok and ratio < 0.1, f"round trips + conservation, meta/feature {ratio:.3f}"))
    for name, passed_, detail in results:
        print(f"{'PASS' if passed_ else 'FAIL'}  {name:<32} {detail}", file=out)
    return all(r[1] for r in results)
