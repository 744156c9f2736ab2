"""Acceptance gate: one test per primary criterion, one PASS/FAIL line each.

Run alone with ``pytest tests/test_acceptance.py -s`` (the lines are printed
even without ``-s``).
"""

import math
import shutil
import time

import mpmath
import numpy as np
import pytest

from conftest import random_tensor
from scadatensor.cli import main
from scadatensor.cpapr import FitOptions, fit, fit_detailed, fit_smoothed, sparse_objective
from scadatensor.detector import DEFAULT_RANKS, train_detector
from scadatensor.evaluation import roc_pr
from scadatensor.experiment import ReplicationConfig, check_orderings, run_replication
from scadatensor.ingest import build_tensor
from scadatensor.scoring import poisson_tail, score_batch
from scadatensor.simulator import generate_benign, learn_profile, synthesize_history
from scadatensor.sparse_tensor import from_entries

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return emit


def _dense_objective(tensor, model):
    lam = model.full()
    x = tensor.to_dense()
    with np.errstate(divide="ignore", invalid="ignore"):
        xlog = np.where(x > 0, x * np.log(lam), 0.0)
    return float(lam.sum() - xlog.sum())


def test_poisson_tail_oracle(verdict):
    mpmath.mp.dps = 40
    lams = (0.1, 1.0, 10.0, 50.0)
    start = time.perf_counter()
    worst = 0.0
    for lam in lams:
        # direct pmf summation, in high precision
        L = mpmath.mpf(lam)
        term, cdf = mpmath.exp(-L), mpmath.mpf(0)
        for x in range(0, 201):
            expected = float(1 - cdf)
            worst = max(worst, abs(poisson_tail(x, lam) - expected))
            cdf += term
            term = term * L / (x + 1)
    spot = max(abs(poisson_tail(2, 1.0) - (1 - 2 * math.exp(-1))),
               abs(poisson_tail(1, 0.5) - (1 - math.exp(-0.5))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and spot <= 1e-12 and elapsed < 1.0
    verdict("poisson tail oracle", ok,
            f"max |err| {worst:.2e} (tol 1e-10), closed forms {spot:.2e} (tol 1e-12), "
            f"{elapsed:.2f} s (< 1 s)")


def test_cpapr_monotonicity(verdict):
    start = time.perf_counter()
    worst_rise, worst_gap, n_dense, n = -np.inf, 0.0, 0, 0
    for seed in range(24):
        rng = np.random.default_rng(1000 + seed)
        ndim = int(rng.integers(3, 5))
        shape = tuple(int(rng.integers(2, hi + 1)) for hi in (8, 7, 6, 5)[:ndim])
        tensor = random_tensor(rng, shape, density=float(rng.uniform(0.05, 0.5)))
        rank = int(rng.integers(1, 6))
        res = fit_detailed(tensor, rank, FitOptions(seed=seed, max_iters=150))
        worst_rise = max(worst_rise, float(np.max(np.diff(res.objectives), initial=-np.inf)))
        if tensor.size <= 500:
            n_dense += 1
            gap = abs(sparse_objective(tensor, res.model) - _dense_objective(tensor, res.model))
            worst_gap = max(worst_gap, gap)
        n += 1
    elapsed = time.perf_counter() - start
    ok = n >= 20 and worst_rise <= 1e-9 and worst_gap <= 1e-8 and n_dense > 0 and elapsed < 30
    verdict("CP-APR monotonicity", ok,
            f"{n} tensors, largest objective rise {worst_rise:.2e} (tol 1e-9), "
            f"sparse vs dense gap {worst_gap:.2e} on {n_dense} tensors (tol 1e-8), "
            f"{elapsed:.1f} s (< 30 s)")


def test_constant_tensor_mle(verdict):
    start = time.perf_counter()
    tensor = from_entries([(idx, 4) for idx in np.ndindex(3, 3, 3)], (3, 3, 3))
    lam = fit(tensor, 1, FitOptions(seed=0)).full()
    elapsed = time.perf_counter() - start
    err = float(np.max(np.abs(lam - 4.0)))
    verdict("constant-tensor MLE", err < 0.01 and elapsed < 1.0,
            f"max |lambda - 4| {err:.2e} (tol 0.01), {elapsed:.2f} s (< 1 s)")


def test_smoothing_guarantee(verdict):
    start = time.perf_counter()
    min_rate, min_p, max_p, n_models = np.inf, np.inf, -np.inf, 0
    for seed in range(6):
        rng = np.random.default_rng(seed)
        shape = tuple(int(v) for v in rng.integers(3, 12, size=int(rng.integers(3, 5))))
        tensor = random_tensor(rng, shape, density=float(rng.uniform(0.002, 0.05)))
        model, _ = fit_smoothed(tensor, int(rng.integers(1, 8)), FitOptions(seed=seed))
        idx = np.stack([rng.integers(0, n, size=1000) for n in shape], axis=1)
        rates = model.rates(idx)
        ps = np.array([poisson_tail(1, lam) for lam in rates])
        min_rate = min(min_rate, float(rates.min()))
        min_p, max_p = min(min_p, float(ps.min())), max(max_p, float(ps.max()))
        n_models += 1
    elapsed = time.perf_counter() - start
    ok = min_rate > 0 and min_p > 0 and max_p <= 1 and elapsed < 5
    verdict("smoothing guarantee", ok,
            f"{n_models} models x 1000 indices, min rate {min_rate:.3e}, "
            f"p in [{min_p:.3e}, {max_p:.6f}], {elapsed:.2f} s (< 5 s)")


def test_auc_oracle(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_roc = worst_pr = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        ps = np.round(rng.random(n), int(rng.integers(1, 4)))
        ys = rng.random(n) < rng.uniform(0.05, 0.6)
        ys[0], ys[1] = True, False
        scores = list(zip(ps.tolist(), ys.tolist()))
        rep = roc_pr(scores)
        pos = ps[ys]
        neg = ps[~ys]
        u = ((pos[:, None] < neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum())
        worst_roc = max(worst_roc, abs(rep.roc_auc - u / (len(pos) * len(neg))))
        ap, prev = 0.0, 0.0
        for t in np.unique(ps):
            flagged = ys[ps <= t]
            recall = flagged.sum() / ys.sum()
            ap += (recall - prev) * flagged.sum() / len(flagged)
            prev = recall
        worst_pr = max(worst_pr, abs(rep.pr_auc - ap))
    elapsed = time.perf_counter() - start
    ok = worst_roc <= 1e-9 and worst_pr <= 1e-9 and elapsed < 10
    verdict("AUC oracle", ok,
            f"100 sets, ROC vs Mann-Whitney {worst_roc:.1e}, PR vs enumeration "
            f"{worst_pr:.1e} (tol 1e-9), {elapsed:.2f} s (< 10 s)")


def test_scaled_replication(verdict, capsys):
    start = time.perf_counter()
    results = [run_replication(ReplicationConfig(seed=s, scenarios=("blackbox", "greybox1")))
               for s in SEEDS]
    elapsed = time.perf_counter() - start
    checks = [check_orderings(r) for r in results]
    with capsys.disabled():
        print()
        for s, r in zip(SEEDS, results):
            row = "  ".join(f"{sc}: " + " ".join(f"{m}={v:.3f}" for m, v in pr.items())
                            for sc, pr in r.pr_auc.items())
            print(f"    seed {s} ranks {r.ranks}\n      {row}")
    labels = {
        "blackbox_ipc": "(a) blackbox IPC PR AUC >= 0.99",
        "greybox1_ipc": "(b) greybox1 IPC PR AUC >= 0.95",
        "greybox1_ipc_nmf_pca": "(b) greybox1 IPC > NMF IxP > PCA",
        "blackbox_ipct_over_ipt": "(c) blackbox IPCT > IPT",
        "greybox1_ipct_over_ipt": "(c) greybox1 IPCT > IPT",
    }
    failed = []
    with capsys.disabled():
        for key, text in labels.items():
            held = sum(c[key] for c in checks)
            print(f"    {text}: {held}/{len(SEEDS)} seeds")
            if held < 4:
                failed.append(text)
    ok = not failed and elapsed < 300
    verdict("scaled experiment replication", ok,
            f"every claim in >= 4 of 5 seeds{'' if not failed else ' except ' + '; '.join(failed)}, "
            f"{elapsed:.0f} s (< 300 s)")


def test_benign_score_sanity(verdict):
    history = synthesize_history(80_000, seed=0)
    profile = learn_profile(history)
    model = train_detector(build_tensor(history, "IPC"), DEFAULT_RANKS["IPC"], FitOptions(seed=0))
    replay = generate_benign(profile, 13_000, seed=0)
    ps = np.array([s.p_value for s in score_batch(model, replay)])
    verdict("benign-score sanity", ps.mean() > 0.99,
            f"IPC benign replay mean p {ps.mean():.6f} (> 0.99), std {ps.std():.2e}")


def _pipeline(out):
    steps = [
        ["synthesize", "--messages", "80000", "--seed", "3", "--profile", "--out", out],
        ["simulate", "--profile", f"{out}/profile.json", "--scenario", "greybox1",
         "--benign", "13000", "--anomalies", "100", "--seed", "3", "--out", out],
        ["build", "--input", f"{out}/train.csv", "--schema", "IPCT", "--out", f"{out}/build"],
        ["train", "--build", f"{out}/build", "--rank", "5", "--seed", "3", "--baselines",
         "--out", f"{out}/model"],
        ["score", "--model", f"{out}/model/model.json", "--input", f"{out}/greybox1.csv",
         "--baselines", "--out", f"{out}/scores"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def test_determinism(verdict, tmp_path, monkeypatch, capsys):
    # build.json records its input path, so both runs use the same relative directory
    monkeypatch.chdir(tmp_path)
    _pipeline("run")
    first = _snapshot(tmp_path / "run")
    shutil.rmtree(tmp_path / "run")
    _pipeline("run")
    second = _snapshot(tmp_path / "run")
    capsys.readouterr()
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    verdict("determinism", bool(first) and not differing,
            f"{len(first)} output files compared across two greybox1 runs, "
            f"{len(differing)} differ{': ' + ', '.join(differing) if differing else ''}")
