import json

import numpy as np
import pytest

from scadatensor.cpapr import FitOptions
from scadatensor.errors import DataError
from scadatensor.evaluation import DEFAULT_RANK_GRID, rank_sweep, roc_pr
from scadatensor.sparse_tensor import SparseTensorCOO


def mann_whitney(scores):
    # probability a random anomaly has a lower p than a random benign; ties 1/2
    pos = [p for p, y in scores if y]
    neg = [p for p, y in scores if not y]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a < b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def brute_average_precision(scores):
    # enumerate every distinct threshold t: flag p <= t
    n_pos = sum(1 for _, y in scores if y)
    ap, prev_recall = 0.0, 0.0
    for t in sorted({p for p, _ in scores}):
        flagged = [y for p, y in scores if p <= t]
        tp = sum(flagged)
        recall = tp / n_pos
        precision = tp / len(flagged)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def random_scores(rng):
    n = int(rng.integers(2, 201))
    # coarse values so ties are common
    ps = np.round(rng.random(n), int(rng.integers(1, 4)))
    ys = rng.random(n) < rng.uniform(0.05, 0.6)
    ys[0], ys[1] = True, False
    return list(zip(ps.tolist(), ys.tolist()))


def test_perfect_separation():
    rep = roc_pr([(0.01, True), (0.02, True), (0.5, False), (0.9, False)])
    assert rep.roc_auc == 1.0 and rep.pr_auc == 1.0


def test_hand_example():
    scores = [(0.5, "anomalous"), (0.1, "benign"), (0.9, "benign")]
    rep = roc_pr(scores)
    assert rep.roc_auc == pytest.approx(0.5)
    assert rep.pr_auc == pytest.approx(0.5)
    assert rep.pr_auc == pytest.approx(brute_average_precision(
        [(p, y == "anomalous") for p, y in scores]))


def test_all_tied_is_chance():
    rep = roc_pr([(0.3, True), (0.3, False), (0.3, False), (0.3, True)])
    assert rep.roc_auc == 0.5
    assert rep.roc == [(0.0, 0.0), (1.0, 1.0)]


@pytest.mark.parametrize("seed", range(10))
def test_against_oracles(seed):
    rng = np.random.default_rng(seed)
    for _ in range(10):
        scores = random_scores(rng)
        rep = roc_pr(scores)
        assert abs(rep.roc_auc - mann_whitney(scores)) <= 1e-9
        assert abs(rep.pr_auc - brute_average_precision(scores)) <= 1e-9


def test_curve_shape_and_permutation_invariance(rng):
    scores = random_scores(rng)
    rep = roc_pr(scores)
    fpr, tpr = zip(*rep.roc)
    assert rep.roc[0] == (0.0, 0.0) and rep.roc[-1] == (1.0, 1.0)
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    assert 0 <= rep.roc_auc <= 1 and 0 <= rep.pr_auc <= 1
    shuffled = [scores[i] for i in rng.permutation(len(scores))]
    again = roc_pr(shuffled)
    assert again.roc == rep.roc and again.pr == rep.pr
    assert again.pr_auc == rep.pr_auc and again.roc_auc == rep.roc_auc


def test_single_class_names_missing_class():
    with pytest.raises(DataError, match="anomalous"):
        roc_pr([(0.1, False), (0.2, False)])
    with pytest.raises(DataError, match="benign"):
        roc_pr([(0.1, True)])


def test_oov_ties_get_half_credit():
    rep = roc_pr([(0.0, True), (0.0, False), (0.9, False)])
    assert rep.roc_auc == pytest.approx(0.75)


def test_report_files(tmp_path):
    rep = roc_pr([(0.1, True), (0.5, False), (0.7, False)])
    rep.extra["rank"] = 3
    rep.write(tmp_path, "x_")
    assert (tmp_path / "x_roc.csv").read_text().startswith("fpr,tpr\n")
    assert (tmp_path / "x_pr.csv").read_text().startswith("recall,precision\n")
    doc = json.loads((tmp_path / "x_metrics.json").read_text())
    assert doc["roc_auc"] == 1.0 and doc["rank"] == 3 and doc["n_anomalous"] == 1


def test_default_grid():
    assert DEFAULT_RANK_GRID[:3] == (1, 2, 3)
    assert 50 in DEFAULT_RANK_GRID and 51 not in DEFAULT_RANK_GRID
    assert DEFAULT_RANK_GRID[-1] == 100 and len(DEFAULT_RANK_GRID) == 60


def planted_rank3(seed=0):
    rng = np.random.default_rng(seed)
    shape = (9, 9, 9)
    dense = np.zeros(shape)
    for r in range(3):
        blk = slice(3 * r, 3 * r + 3)
        dense[blk, blk, blk] = rng.poisson(6.0, size=(3, 3, 3)) + 1
    coords = np.argwhere(dense > 0)
    tensor = SparseTensorCOO.from_arrays(coords, dense[dense > 0], shape)
    benign = [(tuple(int(v) for v in c), False) for c in coords[rng.choice(len(coords), 40)]]
    anomalies = []
    while len(anomalies) < 20:
        idx = tuple(int(v) for v in rng.integers(0, 9, size=3))
        if len({i // 3 for i in idx}) > 1:  # crosses planted components
            anomalies.append((idx, True))
    return tensor, benign + anomalies


def test_sweep_single_rank():
    tensor, validation = planted_rank3()
    assert rank_sweep(tensor, validation, [1], FitOptions(seed=0)).best_rank == 1


def test_sweep_recovers_planted_structure():
    tensor, validation = planted_rank3()
    res = rank_sweep(tensor, validation, [1, 2, 3, 4, 5], FitOptions(seed=0))
    assert all(res.pr_aucs[r] > res.pr_aucs[1] for r in (3, 4, 5))
    assert res.best_rank >= 3


def test_sweep_ties_go_to_smaller_rank():
    tensor, validation = planted_rank3()
    # only OOV anomalies: every rank scores them p = 0 and separates perfectly
    oov = [(None, True)] * 3 + [v for v in validation if not v[1]]
    res = rank_sweep(tensor, oov, [4, 2, 3], FitOptions(seed=0))
    assert res.best_rank == 2


def test_sweep_error_names_rank():
    tensor, validation = planted_rank3()
    with pytest.raises(DataError, match="rank 2"):
        rank_sweep(tensor, [(v, False) for v, _ in validation], [2])
    with pytest.raises(DataError):
        rank_sweep(tensor, validation, [])
