"""ROC / precision-recall evaluation of p-value scores, and rank selection.

Scores are p-values: a message is flagged when its p-value is at or below a
threshold, so thresholds are swept over the distinct p-values from smallest
to largest. Messages sharing a p-value always enter together (one step).
ROC AUC uses the trapezoid rule; PR AUC uses the average-precision step rule.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from scadatensor.artifacts import write_document
from scadatensor.cpapr import DEFAULT_FUSION, FitOptions, fit, fuse
from scadatensor.errors import DataError, ScadaTensorError, SolverError
from scadatensor.scoring import poisson_tail
from scadatensor.sparse_tensor import SparseTensorCOO

DEFAULT_RANK_GRID = tuple(range(1, 51)) + tuple(range(55, 101, 5))


@dataclass
class EvaluationReport:
    roc: list[tuple[float, float]]  # (fpr, tpr), from (0, 0) to (1, 1)
    pr: list[tuple[float, float]]  # (recall, precision), one per threshold
    roc_auc: float
    pr_auc: float
    n_anomalous: int
    n_benign: int
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"roc_auc": self.roc_auc, "pr_auc": self.pr_auc,
                "n_anomalous": self.n_anomalous, "n_benign": self.n_benign, **self.extra}

    def write(self, out_dir, prefix: str = "") -> None:
        with open(f"{out_dir}/{prefix}roc.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr"])
            w.writerows((repr(a), repr(b)) for a, b in self.roc)
        with open(f"{out_dir}/{prefix}pr.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["recall", "precision"])
            w.writerows((repr(a), repr(b)) for a, b in self.pr)
        write_document(f"{out_dir}/{prefix}metrics.json", "metrics", self.summary())


def _as_bool_label(label) -> bool:
    if isinstance(label, str):
        if label not in ("anomalous", "benign"):
            raise DataError(f"unknown label {label!r}")
        return label == "anomalous"
    return bool(label)


def roc_pr(scores: Iterable[tuple[float, object]]) -> EvaluationReport:
    """Curves and AUCs for ``(p_value, label)`` pairs; labels are bools or
    "anomalous"/"benign"."""
    pairs = list(scores)
    p = np.array([float(s) for s, _ in pairs], dtype=float)
    y = np.array([_as_bool_label(lab) for _, lab in pairs], dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0:
        raise DataError("evaluation needs at least one anomalous message")
    if n_neg == 0:
        raise DataError("evaluation needs at least one benign message")
    if np.any(np.isnan(p)):
        raise DataError("p-values must not be NaN")

    groups, inverse = np.unique(p, return_inverse=True)  # ascending p
    tp = np.cumsum(np.bincount(inverse, weights=y, minlength=len(groups)))
    fp = np.cumsum(np.bincount(inverse, weights=~y, minlength=len(groups)))
    tpr, fpr = tp / n_pos, fp / n_neg
    precision = tp / (tp + fp)

    fpr_pts = np.concatenate([[0.0], fpr])
    tpr_pts = np.concatenate([[0.0], tpr])
    roc_auc = float(np.sum(np.diff(fpr_pts) * (tpr_pts[1:] + tpr_pts[:-1]) / 2))
    pr_auc = float(np.sum(np.diff(tpr_pts) * precision))
    return EvaluationReport(
        roc=list(zip(fpr_pts.tolist(), tpr_pts.tolist())),
        pr=list(zip(tpr.tolist(), precision.tolist())),
        roc_auc=roc_auc,
        pr_auc=pr_auc,
        n_anomalous=n_pos,
        n_benign=n_neg,
    )


@dataclass
class SweepResult:
    best_rank: int
    pr_aucs: dict[int, float]


def rank_sweep(
    train_tensor: SparseTensorCOO,
    validation: Sequence[tuple[Sequence[int] | None, object]],
    ranks: Sequence[int] = DEFAULT_RANK_GRID,
    options: FitOptions | None = None,
    fusion: tuple[float, float] = DEFAULT_FUSION,
) -> SweepResult:
    """Pick the rank whose fused model gives the best validation PR AUC.

    ``validation`` holds ``(index, label)`` pairs; an index of ``None`` marks an
    out-of-vocabulary message and is scored p = 0. Ties go to the smaller rank.
    """
    ranks = sorted(set(int(r) for r in ranks))
    if not ranks:
        raise DataError("rank grid is empty")
    labels = [lab for _, lab in validation]
    known = [i for i, (idx, _) in enumerate(validation) if idx is not None]
    indices = np.array([validation[i][0] for i in known], dtype=np.int64).reshape(
        len(known), train_tensor.ndim)
    options = options or FitOptions()
    rank1 = fit(train_tensor, 1, options)
    aucs: dict[int, float] = {}
    for r in ranks:
        try:
            model = fuse(rank1, rank1 if r == 1 else fit(train_tensor, r, options), *fusion)
            rates = model.rates(indices)
            p = np.zeros(len(validation))
            p[known] = [poisson_tail(1, lam) for lam in rates]
            aucs[r] = roc_pr(zip(p.tolist(), labels)).pr_auc
        except ScadaTensorError as exc:
            raise type(exc)(f"rank {r}: {exc}") from exc
        except (ValueError, FloatingPointError) as exc:
            raise SolverError(f"rank {r}: {exc}") from exc
    best = max(ranks, key=lambda r: (aucs[r], -r))
    return SweepResult(best, aucs)
