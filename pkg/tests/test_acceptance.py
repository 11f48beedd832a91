"""Acceptance gate: one test and one printed pass/fail line per criterion.

Every criterion runs at its stated tolerance and instance count.  The
property suites (criteria 1, 2, 3, 6, 9) execute once through the shared
``battery`` fixture; the desk-scale regime-ordering run (criteria 7 and 8)
executes once through ``trend`` and takes several minutes.  Run with
``pytest -v -s tests/test_acceptance.py`` to see each criterion's line.
"""

import time

import numpy as np
import pytest

from fedmotif import verify as verification
from fedmotif.experiment import run, trend_spec
from fedmotif.generate import GenConfig, default_pattern_counts, generate
from fedmotif.graph import TASKS, constant_features
from fedmotif.metrics import average_precision
from fedmotif.model import ArchSpec, ModelParams
from fedmotif.partition import balanced_kway
from fedmotif.protocol import FRESH
from fedmotif.training import TrainConfig, train
from fedmotif.verify import REFERENCE_PREVALENCE


def _line(n: int, passed: bool, detail: str) -> None:
    print(f"[criterion {n}] {'PASS' if passed else 'FAIL'}  {detail}")
    assert passed, f"criterion {n}: {detail}"


@pytest.fixture(scope="module")
def battery():
    """All property suites at their default instance counts, seed 0."""
    return {r.suite: r for r in verification.verify_all(rng_seed=0)}


@pytest.fixture(scope="module")
def trend():
    """The pinned 1024-node / 8-client regime comparison, 3 seeds."""
    start = time.perf_counter()
    bundle = run(trend_spec())
    return bundle, time.perf_counter() - start


def _macro_mean(rows, regime: str) -> float:
    return float(np.mean([r["macro"] for r in rows if r["regime"] == regime]))


def test_criterion_1_exchange_equivalence(battery):
    rep = battery["equivalence"]
    ok = rep.passed and rep.elapsed_s < 120
    _line(1, ok, "fresh exchange == centralized forward, bitwise, on 100 "
                 f"random instances (graphs <=256 nodes, k 2..8, both "
                 f"partitioners, 1..6 layers) in {rep.elapsed_s:.1f}s")


def test_criterion_2_placeholder_gap(battery):
    rep = battery["gap"]
    ok = rep.passed and rep.elapsed_s < 60
    _line(2, ok, "placeholder mode: cut-reachable nodes deviate on >=99% of "
                 "instances, fully-owned nodes match exactly "
                 f"({rep.elapsed_s:.1f}s)")


def test_criterion_3_gradient_correctness(battery):
    rep = battery["gradient"]
    ok = rep.passed and rep.elapsed_s < 120
    _line(3, ok, "finite differences (eps 1e-4) match analytic gradients to "
                 f"rel. error <=1e-3 on 20 instances, N<=32 ({rep.elapsed_s:.1f}s)")


def test_criterion_4_ap_identity_and_prevalence():
    g, _ = generate(GenConfig(8192, 6.0, default_pattern_counts(8192), rng_seed=0))
    worst = 0.0
    prev_pct = []
    for j in range(len(TASKS)):
        y = g.labels[:, j]
        worst = max(worst, abs(average_precision(np.zeros(y.size), y) - y.mean()))
        prev_pct.append(100.0 * float(y.mean()))
    dev = max(abs(a - b) for a, b in zip(prev_pct, REFERENCE_PREVALENCE))
    ok = worst <= 1e-12 and dev <= 5.0
    _line(4, ok, f"constant-score PR-AUC == prevalence (max dev {worst:.1e}); "
                 f"regenerated prevalence within {dev:.2f}pp of the reference "
                 "table")


def test_criterion_5_fedavg_syncsgd_identity():
    g, _ = generate(GenConfig(64, 4.0, {"C3": 4, "SG": 2}, rng_seed=3))
    g = constant_features(g, 1.0)
    part = balanced_kway(g, 2, rng_seed=0)  # 32/32 split: equal client weights
    params0 = ModelParams.init(ArchSpec(d_in=1, width=4, layers=2), 0)
    flats = []
    for regime in ("fedavg", "syncsgd"):
        cfg = TrainConfig(regime=regime, remote_mode=FRESH, lr=0.05, epochs=1,
                          local_epochs=1, batch_size=None, patience=None,
                          rng_seed=0)
        flats.append(train(g, part, params0.copy(), cfg).params.flat)
    diff = float(np.max(np.abs(flats[0] - flats[1])))
    _line(5, diff <= 1e-12, "one FedAvg round (E=1, full batch) == one "
                            f"Sync-SGD step; max parameter diff {diff:.2e}")


def test_criterion_6_communication_ledger(battery):
    rep = battery["ledger"]
    _line(6, rep.passed, "fresh per-layer embeddings_sent == sum of remote "
                         "set sizes exactly; ratio formula == ledger-derived "
                         "ratio in exact rational arithmetic")


def test_criterion_7_regime_ordering(trend):
    bundle, elapsed = trend
    rows = bundle["rows"]
    local = _macro_mean(rows, "local")
    fedavg = _macro_mean(rows, "fedavg")
    fedavg_le = _macro_mean(rows, "fedavg_le")
    sync_le = _macro_mean(rows, "syncsgd_le")
    ordered = local <= fedavg <= fedavg_le <= sync_le
    le_gap = 100 * (fedavg_le - fedavg)
    sync_gap = 100 * (sync_le - local)
    ok = ordered and le_gap >= 3.0 and sync_gap >= 10.0 and elapsed < 3600
    _line(7, ok, f"macro PR-AUC local {100*local:.2f} <= fedavg "
                 f"{100*fedavg:.2f} <= fedavg+LE {100*fedavg_le:.2f} <= "
                 f"sync-SGD+LE {100*sync_le:.2f}; LE gap {le_gap:.2f}pp "
                 f"(>=3), sync vs local {sync_gap:.2f}pp (>=10), "
                 f"{elapsed/60:.1f} min")


def test_criterion_8_fresh_vs_stale(trend):
    rows = trend[0]["rows"]
    fresh = {r["seed"]: r["macro"] for r in rows if r["regime"] == "fedavg_le"}
    stale = {r["seed"]: r["macro"] for r in rows if r["regime"] == "fedavg_stale"}
    wins = sum(fresh[s] >= stale[s] for s in sorted(fresh))
    _line(8, wins >= 2, f"on the balanced k-way split, fresh exchange beats "
                        f"the per-epoch stale baseline on {wins}/3 seeds")


def test_criterion_9_scheduling_determinism(battery):
    rep = battery["determinism"]
    _line(9, rep.passed, "serial and thread-pool client scheduling give "
                         "bitwise-identical checkpoints and metrics")
